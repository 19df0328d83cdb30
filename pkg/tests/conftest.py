import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vvosim import powerflow  # noqa: E402
from vvosim.cosim import load_config, run_scenario  # noqa: E402
from vvosim.feeder import build_ieee34_modified  # noqa: E402

BALANCE_LIMIT = 1e-6  # p.u.


class BalanceTracker:
    """Records the power-balance residual of every converged sweep in the session."""

    def __init__(self):
        self.count = 0
        self.worst = 0.0
        self.offenders = []

    def record(self, residual: float, where: str) -> None:
        self.count += 1
        if residual > self.worst:
            self.worst = residual
        if residual > BALANCE_LIMIT and len(self.offenders) < 20:
            self.offenders.append((residual, where))


TRACKER = BalanceTracker()
_orig_run = powerflow.SweepProblem.run


def _tracked_run(self, *args, **kwargs):
    raw = _orig_run(self, *args, **kwargs)
    if raw[6]:
        TRACKER.record(self.solution(raw).balance_residual, self.model.name)
    return raw


powerflow.SweepProblem.run = _tracked_run


@pytest.fixture(scope="session")
def balance_tracker():
    return TRACKER


class Acceptance:
    """One verdict line per acceptance criterion, printed at the end of the session."""

    def __init__(self):
        self.lines: dict[int, tuple[bool, str]] = {}

    def record(self, n: int, ok: bool, detail: str) -> bool:
        self.lines[n] = (bool(ok), detail)
        return bool(ok)


ACCEPTANCE = Acceptance()


@pytest.fixture(scope="session")
def acceptance():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    ok = TRACKER.worst <= BALANCE_LIMIT
    terminalreporter.write_line(
        f"energy balance: {TRACKER.count} converged sweeps, worst residual {TRACKER.worst:.3e} p.u. "
        f"(limit {BALANCE_LIMIT:g}) {'PASS' if ok else 'FAIL'}")
    for res, where in TRACKER.offenders:
        terminalreporter.write_line(f"  residual {res:.3e} on {where}")
    if ACCEPTANCE.lines:
        terminalreporter.section("acceptance criteria")
        for n, (passed, detail) in sorted(ACCEPTANCE.lines.items()):
            if n == 7:
                # the balance half of this criterion covers every sweep of the session
                passed = passed and ok
                detail += f"; balance worst {TRACKER.worst:.2e} over {TRACKER.count} sweeps"
            terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {n:2d}: {detail}")


def pytest_sessionfinish(session, exitstatus):
    if TRACKER.worst > BALANCE_LIMIT and exitstatus == 0:
        session.exitstatus = 1


@pytest.fixture(scope="session")
def ieee34():
    return build_ieee34_modified()


class ScenarioCache:
    """Runs each builtin scenario at most once per session."""

    def __init__(self):
        self._runs = {}
        self.seconds = {}

    def get(self, name: str):
        if name not in self._runs:
            cfg = load_config(f"builtin:scenarios/{name}.json")
            t0 = time.perf_counter()
            self._runs[name] = run_scenario(cfg)
            self.seconds[name] = time.perf_counter() - t0
        return self._runs[name]

    def report(self, name: str):
        return self.get(name)[0]


@pytest.fixture(scope="session")
def scenarios():
    return ScenarioCache()
