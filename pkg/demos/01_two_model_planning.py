"""Planning and replanning on the hand-annotated two-model trie.

Two models, G (cheap, fast) and S (expensive, slow), each usable as a
generator and as a repair step.  We pick a path for a few objectives, then
follow one request whose first stage runs slow and watch the controller
change course.
"""
from triectl.controller import RequestContext, StageResult, next_action, update_after_stage
from triectl.planner import Objective, select_path
from triectl.reference import two_model_trie

trie = two_model_trie()
print("annotated paths (acc, cost, lat):")
for node in trie.terminating():
    a = node.annotation
    print(f"  {'/'.join(node.prefix):4s} {a.acc:.2f} {a.cost:5.1f} {a.lat:4.1f}")

print("\noffline choices:")
for text in ["min_cost:acc>=0.90", "max_acc:cost<=11", "max_acc:lat<=4.9", "max_acc:lat<=7.0"]:
    res = select_path(trie, Objective.parse(text))
    print(f"  {text:20s} -> {'/'.join(res.path)}  (acc {res.acc:.2f}, expanded {res.nodes_expanded}, "
          f"pruned {res.nodes_pruned})")

# A request under a 7 s cap starts on S/S.  S takes 5.5 s instead of 3.5 s.
ctx = RequestContext(Objective.parse("max_acc:lat<=7.0"), max_depth=2)
d = next_action(trie, ctx)
print(f"\nroot plan: {'/'.join(d.suffix)}")
ctx = update_after_stage(ctx, StageResult("S", latency=5.5, cost=10.0, terminated=False))
d = next_action(trie, ctx)
print(f"after S took 5.5 s: {d.action} {d.model or ''} (predicted extra latency {d.delta_lat:.1f} s)")

ctx2 = RequestContext(Objective.parse("max_acc:lat<=7.0"), 2, prefix=("S",), elapsed=5.9, spent=10.0)
print(f"had S taken 5.9 s: {next_action(trie, ctx2).action}")
