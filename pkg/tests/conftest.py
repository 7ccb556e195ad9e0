import pytest

from causaltree.sim import SimConfig, simulate

HONEST = ("CT-H", "TS-H", "F-H", "TOT-H")

# Monte Carlo studies shared by the acceptance and pruning tests
RUNS = {
    "d1": dict(design=1, estimators=HONEST + ("F-A",), adaptive_sample="train"),
    "d2": dict(design=2, estimators=HONEST + ("CT-A",), adaptive_sample="train"),
    "d3": dict(design=3, estimators=HONEST + ("CT-A",), adaptive_sample="union"),
    "d3_1000": dict(design=3, n_train=1000, n_est=1000, estimators=("CT-H", "TS-H"), adaptive_sample="train"),
}
REPLICATIONS = 200
SEED = 1

_cache = {}
_verdicts = []


@pytest.fixture(scope="session")
def study():
    """``study(key)`` runs (once per session) and returns a SimReport."""

    def get(key):
        if key not in _cache:
            _cache[key] = simulate(SimConfig(replications=REPLICATIONS, seed=SEED, **RUNS[key]))
        return _cache[key]

    return get


@pytest.fixture
def verdict():
    """Record one acceptance line, then assert it."""

    def record(number, ok, detail):
        _verdicts.append((number, bool(ok), detail))
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(_verdicts):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
