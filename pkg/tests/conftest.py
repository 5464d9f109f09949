import pytest

from triectl.reference import two_model_trie, two_model_world, reference_world


@pytest.fixture(scope="session")
def ref_world():
    return reference_world(seed=3)


@pytest.fixture(scope="session")
def gs_world():
    return two_model_world()


@pytest.fixture
def gs_trie():
    return two_model_trie()


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
