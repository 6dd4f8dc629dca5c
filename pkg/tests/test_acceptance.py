"""Acceptance gate: one test per criterion, each reporting PASS/FAIL with its numbers.

Tolerances are the stated ones; nothing here is tuned to make a result pass.
Run ``pytest tests/test_acceptance.py -v`` (add ``-s`` to see the lines as
they happen); the summary block at the end lists every criterion.
"""
import math
from pathlib import Path

import numpy as np
import pytest
from scipy.linalg import expm

from qndsqueeze.config import SimulationConfig
from qndsqueeze.control import single_shot_bound
from qndsqueeze.dynamics import TimeGrid, integrate_me
from qndsqueeze.experiments import run
from qndsqueeze.observables import (
    SqueezingCurve,
    find_minimum,
    fit_scaling,
    xi2_analytic,
    xi2_analytic_minimum,
)
from qndsqueeze.spin_algebra import build_spin_operators, css_x, trace_distance

from conftest import SWEEP_J


def _minimum(rec):
    return find_minimum(SqueezingCurve(rec.times, rec["xi2_z"], 25.0))


def test_c01_operator_algebra(criterion):
    worst_comm = worst_cas = 0.0
    for j in (0.5, 1, 5, 25, 50):
        jx, jy, jz = (np.asarray(o) for o in build_spin_operators(j))
        for a, b, c in ((jx, jy, jz), (jy, jz, jx), (jz, jx, jy)):
            worst_comm = max(worst_comm, np.max(np.abs(a @ b - b @ a - 1j * c)))
        cas = jx @ jx + jy @ jy + jz @ jz - j * (j + 1) * np.eye(int(2 * j + 1))
        worst_cas = max(worst_cas, np.max(np.abs(cas)))
    failed = criterion(1, {"commutators": worst_comm <= 1e-10, "casimir": worst_cas <= 1e-10},
                       f"max commutator error {worst_comm:.2e}, max Casimir error {worst_cas:.2e} (tol 1e-10)")
    assert not failed


def test_c02_qnd_conservation(criterion):
    j = 5
    jy = np.asarray(build_spin_operators(j).jy)
    u = expm(-1j * 0.4 * jy)  # tilt the CSS so <J_z> is not zero
    rho0 = u @ css_x(j) @ u.conj().T
    rec = integrate_me(rho0, TimeGrid(0.0, 3.0, 1e-3), 1.0, state_stride=10**9)
    dz = np.max(np.abs(rec["jz"] - rec["jz"][0]))
    dz2 = np.max(np.abs(rec["jz2"] - rec["jz2"][0]))
    pur = rec["purity"]
    failed = criterion(2, {"<J_z> constant": dz <= 1e-8, "<J_z^2> constant": dz2 <= 1e-8,
                           "purity decays": bool(pur[-1] < pur[0] - 0.1 and np.all(np.diff(pur) <= 1e-15))},
                       f"<J_z>={rec['jz'][0]:.4f} drift {dz:.1e}, <J_z^2> drift {dz2:.1e}, "
                       f"purity {pur[0]:.3f} -> {pur[-1]:.3f}")
    assert not failed


def test_c03_spin_half_dephasing(criterion):
    rec = integrate_me(css_x(0.5), TimeGrid(0.0, 1.0, 1e-3), 1.0)
    err = abs(rec.states[-1][0, 1] - 0.5 * math.exp(-0.5))
    failed = criterion(3, {"rho_01(Mt=1)": err <= 1e-6}, f"|rho_01 - exp(-1/2)/2| = {err:.1e} (tol 1e-6)")
    assert not failed


def test_c04_feedback_holds_mean(criterion, me_j25):
    rec = me_j25["ensemble"]
    worst = float(np.max(np.abs(rec["jz"])))
    failed = criterion(4, {"|<J_z>| <= 1e-6 J": worst <= 1e-6 * 25 and rec.times[-1] >= 3.0 - 1e-12},
                       f"max |<J_z>| = {worst:.1e} to Mt = {rec.times[-1]:g} (dt = {rec.meta['dt']:g})")
    assert not failed


def test_c05_purity_near_unity(criterion, me_j25):
    rec = me_j25["ensemble"]
    t_min, _ = _minimum(rec)
    window = rec.times <= 1.5 + 1e-12
    worst = float(rec["purity"][window].min())
    t_worst = float(rec.times[window][np.argmin(rec["purity"][window])])
    at_min = float(np.interp(t_min, rec.times, rec["purity"]))
    failed = criterion(5, {"purity >= 0.90 for Mt <= 1.5": worst >= 0.90, "purity >= 0.95 at minimum": at_min >= 0.95},
                       f"min purity on [0, 1.5] = {worst:.3f} at Mt = {t_worst:.2f}; "
                       f"purity at xi2 minimum (Mt = {t_min:.3f}) = {at_min:.4f}")
    assert not failed


def test_c06_curves_a_b_agree(criterion, me_j25):
    ta, ya = _minimum(me_j25["ensemble"])
    tb, yb = _minimum(me_j25["analytic"])
    dy = abs(ya - yb) / yb
    dt = abs(ta - tb) / tb
    failed = criterion(6, {"xi2_min within 10%": dy <= 0.10, "t* within 20%": dt <= 0.20},
                       f"ensemble gain ({ta:.4f}, {ya:.5f}) vs closed-form gain ({tb:.4f}, {yb:.5f}): "
                       f"xi2 {100 * dy:.2f}%, t* {100 * dt:.2f}%")
    assert not failed


def test_c07_analytic_minimum_identity(criterion):
    t = np.arange(0.0, 3.0 + 1e-12, 1e-3)
    worst = 0.0
    for j in (5, 25, 100):
        t_ref, y_ref = xi2_analytic_minimum(1.0, j)
        tv, yv = find_minimum(SqueezingCurve(t, xi2_analytic(t, 1.0, j), j))
        worst = max(worst, abs(tv - t_ref) / t_ref, abs(yv - y_ref) / y_ref)
    large_j = abs(math.e / 50 - xi2_analytic_minimum(1.0, 25)[1]) / xi2_analytic_minimum(1.0, 25)[1]
    failed = criterion(7, {"find_minimum vs closed form": worst <= 1e-4, "e/2J within 2.1%": large_j <= 0.021},
                       f"worst relative error {worst:.1e} (tol 1e-4); e/2J off by {100 * large_j:.2f}% at J = 25")
    assert not failed


def _fit(points):
    return fit_scaling([p["J"] for p in points], [p["xi2_min"] for p in points])


def test_c08_scaling_law(criterion, sweeps):
    points = sweeps["exact"]
    assert [p["J"] for p in points] == list(SWEEP_J) and all(p["status"] == "ok" for p in points)
    fit = _fit(points)
    jx = np.array([p["J_xi2_min"] for p in points])
    decreasing = bool(np.all(np.diff(jx) < 0))
    toward = abs(jx[-1] - 1.665) < abs(jx[0] - 1.665)
    failed = criterion(8, {"b in [0.9, 1.1]": 0.9 <= fit.exponent <= 1.1,
                           "c in [1.4, 2.0]": 1.4 <= fit.coefficient <= 2.0,
                           "J xi2_min decreasing toward 1.665": decreasing and toward},
                       f"b = {fit.exponent:.4f}, c = {fit.coefficient:.4f}, "
                       f"J*xi2_min = {', '.join(f'{v:.3f}' for v in jx)}")
    assert not failed


def test_c09_robustness(criterion, sweeps):
    exact, pert = _fit(sweeps["exact"]), _fit(sweeps["perturbed"])
    shift = pert.coefficient / exact.coefficient - 1
    bound = 0.2**2
    assert single_shot_bound(0.2) == pytest.approx(bound)
    large = [p for p in sweeps["perturbed"] if p["J"] >= 20]
    exceeds = [bound > p["xi2_min"] for p in large]
    failed = criterion(9, {"b in [0.9, 1.1]": 0.9 <= pert.exponent <= 1.1,
                           "|c shift| < 10%": abs(shift) < 0.10,
                           "c shifts toward 1.744": shift > 0,
                           "0.04 > xi2_min for J >= 20": all(exceeds)},
                       f"perturbed b = {pert.exponent:.4f}, c = {pert.coefficient:.4f} ({100 * shift:+.2f}%); "
                       f"xi2_min(J >= 20) = {', '.join(format(p['xi2_min'], '.4f') for p in large)} vs bound 0.04")
    assert not failed


def test_c10_unraveling_consistency(criterion, sme_j2):
    distances = {}
    for name, run_ in sme_j2.items():
        avg = run_["average"]
        distances[name] = trace_distance(avg.states[-1], run_["me"].state_at(1.0))
        assert avg.state_times[-1] == pytest.approx(1.0) and avg.n_used == 1000
    failed = criterion(10, {f"{k} < 0.05": v < 0.05 for k, v in distances.items()},
                       f"trace distance at Mt = 1: no feedback {distances['none']:.4f}, "
                       f"conditioned feedback {distances['conditioned']:.4f} (tol 0.05)")
    assert not failed


def test_c11_current_statistics(criterion, sme_j2):
    checks, parts = {}, []
    for name, run_ in sme_j2.items():
        recs = run_["records"]
        dt = recs[0].dt
        # per recorded step: dI - 2 sqrt(M) <J_z>_c dt for every trajectory
        diff = np.stack([r.dI - 2 * r.jz[:-1] * dt for r in recs])
        n = diff.size
        z = diff.mean() / (diff.std(ddof=1) / math.sqrt(n))
        per_step = diff.mean(axis=0) / (diff.std(axis=0, ddof=1) / math.sqrt(diff.shape[0]))
        checks[f"{name} within 3 sigma"] = abs(z) < 3
        parts.append(f"{name}: pooled z = {z:+.2f}, per-step |z| max {np.max(np.abs(per_step)):.2f}")
    failed = criterion(11, checks, "; ".join(parts))
    assert not failed


def _bundle_bytes(cfg, out: Path) -> dict:
    run(cfg).write(out)
    return {p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))}


def test_c12_reproducibility(criterion, tmp_path):
    configs = {
        "sme": SimulationConfig(mode="sme", two_j=3, n_trajectories=150, t_end=0.3, dt=1e-3, master_seed=77),
        "sweep": SimulationConfig(mode="sweep", two_j_list=(2, 4, 6, 8), t_end=3.0),
        "me": SimulationConfig(mode="me", two_j=8, t_end=2.0, analytic_gain_curve=True),
    }
    checks, parts = {}, []
    for name, cfg in configs.items():
        outputs = []
        for threads in (1, 4, 1):
            cfg.threads = threads
            outputs.append(_bundle_bytes(cfg, tmp_path / f"{name}-{threads}-{len(outputs)}"))
        same = all(o == outputs[0] for o in outputs[1:]) and bool(outputs[0])
        checks[name] = same
        parts.append(f"{name}: {len(outputs[0])} CSV files {'identical' if same else 'DIFFER'}")
    failed = criterion(12, checks, "threads 1/4/1 reruns; " + "; ".join(parts))
    assert not failed
