import time

import pytest

from cmt.config import from_flat
from cmt.runner import run

_RUNS = {}
_VERDICTS = []


def cached_run(tmp_root, **flat):
    """Run once per distinct config within the session; returns (metrics, seconds, run_dir)."""
    key = tuple(sorted((k, repr(v)) for k, v in flat.items()))
    if key not in _RUNS:
        run_dir = tmp_root / f"run_{len(_RUNS):03d}"
        cfg = from_flat({**flat, "output.run_dir": str(run_dir)})
        t0 = time.perf_counter()
        metrics = run(cfg)
        _RUNS[key] = (metrics, time.perf_counter() - t0, run_dir)
    return _RUNS[key]


def all_cached_runs():
    return [v for v in _RUNS.values()]


@pytest.fixture(scope="session")
def run_root(tmp_path_factory):
    return tmp_path_factory.mktemp("runs")


@pytest.fixture(scope="session")
def runner(run_root):
    return lambda **flat: cached_run(run_root, **flat)


@pytest.fixture
def verdict():
    """Record one pass/fail line for the end-of-session acceptance summary."""

    def record(name, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
