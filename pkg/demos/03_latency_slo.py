"""Static plans versus per-stage replanning under a latency SLO.

Runs each committed scenario once, starting with the noiseless control.  The SLO
is the predicted latency of the oracle plan for a cost cap of 3; stage
latencies are multiplied by heavy-tailed noise, and in the spike scenario
one engine's queue fills for a while.
"""
from pathlib import Path

from triectl.sim import Scenario, run_scenario

HERE = Path(__file__).resolve().parent
for name in ("degenerate", "noise", "spike"):
    sc = Scenario.load_file(HERE.parent / "scenarios" / f"{name}.json")
    rep = run_scenario(sc)
    print(f"{name} (SLO {rep.lat_cap:.2f} s)")
    for policy, agg in rep.aggregates().items():
        print(f"  {policy:20s} violations {100 * agg['violation_rate']:5.1f}%  acc {agg['accuracy']:.3f}  "
              f"cost {agg['mean_cost']:.2f}")
