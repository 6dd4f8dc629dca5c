"""Shared expensive runs and the acceptance report.

The J = 25 master-equation runs, the J = 2 trajectory ensembles and the J
sweeps are each computed once per session and reused by unit and
acceptance tests.
"""
import pytest

from qndsqueeze.config import SimulationConfig
from qndsqueeze.control import Conditioned, EnsembleSelfConsistent, NoFeedback
from qndsqueeze.dynamics import TimeGrid, integrate_me
from qndsqueeze.experiments import make_gain, run_me, sweep_minima
from qndsqueeze.spin_algebra import SpinQuantumNumber, css_x
from qndsqueeze.stochastic import ensemble_average, run_ensemble

_REPORT = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_REPORT] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion: ``criterion(n, checks, detail)``."""
    book = request.config.stash[_REPORT]

    def record(number, checks: dict, detail: str = ""):
        failed = [name for name, ok in checks.items() if not ok]
        book[number] = (not failed, detail, failed)
        status = "PASS" if not failed else "FAIL"
        print(f"criterion {number:>2}: {status}  {detail}")
        return failed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    book = config.stash.get(_REPORT, {})
    if not book:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(book):
        ok, detail, failed = book[number]
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        if failed:
            line += f"  [failed: {', '.join(failed)}]"
        terminalreporter.write_line(line)


J25 = SpinQuantumNumber(50)


@pytest.fixture(scope="session")
def me_j25():
    """J = 25, M = 1 to Mt = 3 with the self-consistent and closed-form gains."""
    cfg = SimulationConfig(mode="me", two_j=50)
    ensemble = run_me(cfg, J25, EnsembleSelfConsistent(1.0), state_stride=10**9)
    analytic = run_me(cfg, J25, make_gain(cfg, J25, "analytic"), state_stride=10**9)
    return {"ensemble": ensemble, "analytic": analytic}


SME_GRID = TimeGrid(0.0, 1.0, 1e-4)
SME_N = 1000


@pytest.fixture(scope="session")
def sme_j2():
    """1000 trajectories at J = 2 with and without conditioned feedback, plus ME references."""
    rho0 = css_x(2)
    out = {}
    for name, seed, controller, me_gain in (("none", 20240611, NoFeedback(), NoFeedback()),
                                            ("conditioned", 20240612, Conditioned(1.0), EnsembleSelfConsistent(1.0))):
        records = run_ensemble(rho0, SME_GRID, 1.0, controller, n_trajectories=SME_N, master_seed=seed,
                               threads=4, record_stride=100, snapshot_stride=1000)
        me = integrate_me(rho0, TimeGrid(0.0, 1.0, 1e-3), 1.0, me_gain, state_stride=100)
        out[name] = {"records": records, "average": ensemble_average(records), "me": me}
    return out


SWEEP_J = (5, 10, 15, 20, 25, 30, 40)


@pytest.fixture(scope="session")
def sweeps():
    cfg = SimulationConfig(mode="robustness", two_j_list=tuple(2 * j for j in SWEEP_J), threads=4)
    return {"exact": sweep_minima(cfg, "analytic", 0.0), "perturbed": sweep_minima(cfg, "analytic", 0.2)}
