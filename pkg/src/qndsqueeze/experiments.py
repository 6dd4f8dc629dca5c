"""Experiment drivers behind the CLI: single ME runs, J sweeps, robustness
to gain errors, trajectory ensembles and the cavity-regime check.

All times in configs and outputs are dimensionless (Mt); lambda is reported
in units of M.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import SimulationConfig, config_to_text, replace
from .control import (AnalyticClosedForm, Conditioned, EnsembleSelfConsistent, NoFeedback, Perturbed,
                      Tabulated, regime_check, single_shot_bound)
from .dynamics import TimeGrid, default_me_dt, integrate_me
from .errors import InsufficientData, SqueezeError, StepSizeError
from .observables import (SqueezingCurve, find_minimum, fit_scaling, xi2_analytic,
                          xi2_analytic_minimum)
from .spin_algebra import SpinQuantumNumber, css_x, trace_distance
from .stochastic import ensemble_average, run_ensemble

log = logging.getLogger(__name__)

DEFAULT_SME_DT = 1e-4


@dataclass
class Table:
    columns: tuple
    rows: list

    def to_csv(self) -> str:
        out = [",".join(self.columns)]
        for row in self.rows:
            out.append(",".join(_fmt(v) for v in row))
        return "\n".join(out) + "\n"


def _fmt(value, exact: bool = True) -> str:
    """CSV cells use 17 significant digits; summaries the shortest round-trip form."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g") if exact else repr(float(value))
    return str(value)


@dataclass
class ResultBundle:
    metadata: dict
    tables: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def summary_text(self) -> str:
        lines = [f"{k} = {_fmt(v, False)}" for k, v in self.metadata.items() if k != "config"]
        lines += [f"{k} = {_fmt(v, False)}" for k, v in self.summary.items()]
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.txt").write_text(self.summary_text())
        (out / "config.resolved.ini").write_text(self.metadata["config"])
        for name, table in self.tables.items():
            (out / f"{name}.csv").write_text(table.to_csv())
        return out


def _metadata(cfg: SimulationConfig, start: float) -> dict:
    return {
        "mode": cfg.mode,
        "code_version": __version__,
        "wall_time_s": round(time.perf_counter() - start, 3),
        "config": config_to_text(cfg),
    }


def make_gain(cfg: SimulationConfig, j: SpinQuantumNumber, gain_type: str | None = None,
              epsilon: float | None = None):
    gain_type = cfg.gain_type if gain_type is None else gain_type
    epsilon = cfg.epsilon if epsilon is None else epsilon
    if gain_type == "ensemble":
        gain = EnsembleSelfConsistent(cfg.m)
    elif gain_type == "conditioned":
        gain = Conditioned(cfg.m)
    elif gain_type == "analytic":
        gain = AnalyticClosedForm(cfg.m, j)
    elif gain_type == "zero":
        return NoFeedback()
    else:
        table = Tabulated.from_file(cfg.table_path)
        # table times are Mt and values are lambda/M
        gain = Tabulated(tuple(t / cfg.m for t in table.times), tuple(v * cfg.m for v in table.values))
    return Perturbed(gain, epsilon) if epsilon else gain


def _nice_step(limit: float) -> float:
    """Largest value of the form {1, 2, 5} x 10^k not above ``limit``."""
    exp = math.floor(math.log10(limit))
    for mant in (5, 2, 1):
        if mant * 10.0**exp <= limit:
            return mant * 10.0**exp
    return 10.0 ** (exp - 1) * 5


def run_me(cfg: SimulationConfig, j: SpinQuantumNumber, gain, state_stride: int = 1000):
    """Integrate from the x-polarized CSS.

    With ``grid.dt = auto`` a run that outgrows the RK4 stability bound (the
    self-consistent gain can rise well above M) is restarted with a step
    from the 1-2-5 series below the bound reported by the integrator.
    """
    dt_mt = cfg.dt if cfg.dt is not None else default_me_dt(j.two_j)
    while True:
        grid = TimeGrid(0.0, cfg.t_end / cfg.m, dt_mt / cfg.m)
        try:
            return integrate_me(css_x(j), grid, cfg.m, gain, state_stride=state_stride)
        except StepSizeError as exc:
            if cfg.dt is not None or exc.max_stable_dt is None:
                raise
            smaller = _nice_step(0.8 * exc.max_stable_dt * cfg.m)
            if smaller >= dt_mt:
                raise
            log.info("J=%s: restarting with dt=%g (%s)", j, smaller, exc)
            dt_mt = smaller


def _minimum(rec, j: SpinQuantumNumber, m: float):
    mt = rec.times * m
    t_min, xi2_min = find_minimum(SqueezingCurve(mt, rec["xi2_z"], j.j))
    purity_at = float(np.interp(t_min, mt, rec["purity"]))
    return t_min, xi2_min, purity_at


def run_me_experiment(cfg: SimulationConfig) -> ResultBundle:
    start = time.perf_counter()
    j = cfg.j
    gain = make_gain(cfg, j)
    rec = run_me(cfg, j, gain)
    mt = rec.times * cfg.m
    columns = ["Mt", "purity", "Jx", "Jz", "Jz2", "Jy2", "lambda", "xi2_z"]
    data = [mt, rec["purity"], rec["jx"], rec["jz"], rec["jz2"], rec["jy2"], rec["lam"] / cfg.m, rec["xi2_z"]]
    summary = {"J": str(j), "gain": gain.label,
               "steps": len(mt) - 1, "dt_Mt": float(mt[1] - mt[0])}
    try:
        t_min, xi2_min, pur = _minimum(rec, j, cfg.m)
        summary.update(t_min=t_min, xi2_min=xi2_min, J_xi2_min=j.j * xi2_min, purity_at_min=pur,
                       min_status="ok")
    except SqueezeError as exc:
        summary.update(min_status=exc.category)
    summary["max_abs_Jz"] = float(np.max(np.abs(rec["jz"])))
    summary["min_purity"] = float(np.min(rec["purity"]))
    summary["max_trace_correction"] = rec.meta["max_trace_correction"]

    if cfg.analytic_gain_curve:
        ref = run_me(cfg, j, make_gain(cfg, j, "analytic"))
        columns.append("xi2_z_analytic_gain")
        data.append(ref["xi2_z"])
        try:
            t_b, xi2_b, _ = _minimum(ref, j, cfg.m)
            summary.update(analytic_gain_t_min=t_b, analytic_gain_xi2_min=xi2_b)
        except SqueezeError as exc:
            summary.update(analytic_gain_min_status=exc.category)
    if cfg.analytic_curve:
        columns.append("xi2_analytic")
        data.append(xi2_analytic(mt, 1.0, j))
        t_c, xi2_c = xi2_analytic_minimum(1.0, j)
        summary.update(analytic_t_min=t_c, analytic_xi2_min=xi2_c)

    rows = list(zip(*[np.asarray(col).tolist() for col in data]))
    return ResultBundle(_metadata(cfg, start), {"timeseries": Table(tuple(columns), rows)}, summary)


def _sweep_one(cfg: SimulationConfig, j: SpinQuantumNumber, gain_type: str, epsilon: float):
    try:
        rec = run_me(cfg, j, make_gain(cfg, j, gain_type, epsilon), state_stride=10**9)
        t_min, xi2_min, pur = _minimum(rec, j, cfg.m)
        return {"J": j.j, "t_min": t_min, "xi2_min": xi2_min, "J_xi2_min": j.j * xi2_min,
                "purity_at_min": pur, "status": "ok"}
    except SqueezeError as exc:
        log.warning("J=%s failed: %s", j, exc)
        nan = float("nan")
        return {"J": j.j, "t_min": nan, "xi2_min": nan, "J_xi2_min": nan, "purity_at_min": nan,
                "status": exc.category}


def sweep_minima(cfg: SimulationConfig, gain_type: str | None = None, epsilon: float | None = None) -> list[dict]:
    """Minimum of xi^2_z for every J in ``cfg.j_list``, in list order."""
    gain_type = cfg.gain_type if gain_type is None else gain_type
    epsilon = cfg.epsilon if epsilon is None else epsilon
    js = cfg.j_list
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            return list(pool.map(lambda j: _sweep_one(cfg, j, gain_type, epsilon), js))
    return [_sweep_one(cfg, j, gain_type, epsilon) for j in js]


def _fit_summary(points: list[dict], prefix: str = "") -> dict:
    ok = [p for p in points if p["status"] == "ok"]
    try:
        fit = fit_scaling([p["J"] for p in ok], [p["xi2_min"] for p in ok], [p["t_min"] for p in ok])
    except InsufficientData as exc:
        return {f"{prefix}fit_status": "degenerate", f"{prefix}fit_message": str(exc)}
    return {
        f"{prefix}fit_status": "ok",
        f"{prefix}coefficient": fit.coefficient,
        f"{prefix}fit_residual": fit.residual,
        f"{prefix}exponent": fit.exponent,
        f"{prefix}amplitude": fit.amplitude,
    }


_SWEEP_COLUMNS = ("J", "t_min", "xi2_min", "J_xi2_min", "purity_at_min", "status")


def run_sweep(cfg: SimulationConfig) -> ResultBundle:
    start = time.perf_counter()
    points = sweep_minima(cfg)
    rows = [tuple(p[c] for c in _SWEEP_COLUMNS) for p in points]
    summary = {"gain": cfg.gain_type, "epsilon": cfg.epsilon, "n_points": len(points),
               "n_failed": sum(p["status"] != "ok" for p in points)}
    summary.update(_fit_summary(points))
    return ResultBundle(_metadata(cfg, start), {"sweep": Table(_SWEEP_COLUMNS, rows)}, summary)


def run_robustness(cfg: SimulationConfig) -> ResultBundle:
    """Sweep with the exact gain and with lambda scaled by (1 + epsilon)."""
    start = time.perf_counter()
    base = sweep_minima(cfg, epsilon=0.0)
    pert = sweep_minima(cfg, epsilon=cfg.epsilon)
    bound = single_shot_bound(abs(cfg.epsilon)) if abs(cfg.epsilon) <= 1 else float("nan")
    columns = ("J", "xi2_min", "xi2_min_perturbed", "J_xi2_min", "J_xi2_min_perturbed",
               "t_min", "t_min_perturbed", "single_shot_bound", "bound_exceeds_continuous")
    rows = []
    for b, p in zip(base, pert):
        rows.append((b["J"], b["xi2_min"], p["xi2_min"], b["J_xi2_min"], p["J_xi2_min"],
                     b["t_min"], p["t_min"], bound, bool(bound > p["xi2_min"])))
    summary = {"gain": cfg.gain_type, "epsilon": cfg.epsilon, "single_shot_bound": bound}
    summary.update(_fit_summary(base, "exact_"))
    summary.update(_fit_summary(pert, "perturbed_"))
    if summary.get("exact_fit_status") == "ok" and summary.get("perturbed_fit_status") == "ok":
        summary["coefficient_shift"] = summary["perturbed_coefficient"] / summary["exact_coefficient"] - 1
    return ResultBundle(_metadata(cfg, start), {"robustness": Table(columns, rows)}, summary)


def _nanmax_abs(z: np.ndarray) -> float:
    # z-scores are undefined when the standard error vanishes (e.g. one trajectory)
    finite = np.abs(z[np.isfinite(z)])
    return float(finite.max()) if finite.size else float("nan")


def _sme_strides(cfg: SimulationConfig, dt_mt: float) -> tuple[int, int]:
    record = cfg.record_stride or max(1, int(round(0.01 / dt_mt)))
    snapshot = cfg.snapshot_stride or max(1, int(round(0.1 / dt_mt)))
    return record, snapshot


def run_sme_experiment(cfg: SimulationConfig) -> ResultBundle:
    """Trajectory ensemble plus its comparison with the deterministic equation."""
    start = time.perf_counter()
    j = cfg.j
    dt_mt = cfg.dt if cfg.dt is not None else DEFAULT_SME_DT
    record_stride, snapshot_stride = _sme_strides(cfg, dt_mt)
    grid = TimeGrid(0.0, cfg.t_end / cfg.m, dt_mt / cfg.m)
    rho0 = css_x(j)
    controller = make_gain(cfg, j)
    records = run_ensemble(rho0, grid, cfg.m, controller, n_trajectories=cfg.n_trajectories,
                           master_seed=cfg.master_seed, threads=cfg.threads,
                           record_stride=record_stride, snapshot_stride=snapshot_stride)
    avg = ensemble_average(records)

    # reference ME on a grid that lands on every snapshot time
    interval = snapshot_stride * grid.dt
    sub = max(1, math.ceil(interval / (default_me_dt(j.two_j) / cfg.m)))
    me_gain = make_gain(cfg, j, "ensemble" if cfg.gain_type == "conditioned" else None)
    me_grid = TimeGrid(0.0, cfg.t_end / cfg.m, interval / sub)
    me = integrate_me(rho0, me_grid, cfg.m, me_gain, state_stride=sub)
    distances = []
    for t, state in zip(avg.state_times, avg.states):
        distances.append(trace_distance(state, me.state_at(t)))
    distances = np.array(distances)

    traj_rows = []
    for r in records:
        traj_rows.append((r.index, "ok" if r.ok else "gain-singularity",
                          r.jz[-1], r.var_jz[-1], r.jx[-1], r.integrated_current[-1],
                          float(np.min(r.jx)), float(np.mean(np.abs(r.jz))),
                          float("nan") if r.failed_at is None else r.failed_at * cfg.m))
    traj_table = Table(("index", "status", "Jz_final", "var_Jz_final", "Jx_final", "integrated_current_final",
                        "Jx_min", "mean_abs_Jz", "failed_at_Mt"), traj_rows)

    o = avg.observables
    ens_rows = list(zip((avg.state_times * cfg.m).tolist(), o["purity"].tolist(),
                        avg.conditional["purity"].tolist(), o["jx"].tolist(), o["jz"].tolist(),
                        o["jz2"].tolist(), o["var_jz"].tolist(), o["xi2_z"].tolist(), distances.tolist()))
    ens_table = Table(("Mt", "purity_of_mean", "mean_conditional_purity", "Jx", "Jz", "Jz2", "var_Jz",
                       "xi2_z", "trace_distance_to_me"), ens_rows)

    c = avg.conditional
    dt = grid.dt
    signal = 2 * math.sqrt(cfg.m) * c["jz"][:-1] * dt
    # standard error of dI - signal is dominated by the white noise, ~ sqrt(dt/n)
    current_z = (c["dI"] - signal) / np.where(c["dI_sem"] > 0, c["dI_sem"], np.nan)
    jz_z = c["jz"][1:] / np.where(c["jz_sem"][1:] > 0, c["jz_sem"][1:], np.nan)
    cond_rows = list(zip((avg.record_times * cfg.m).tolist(), c["jz"].tolist(), c["jz_sem"].tolist(),
                         c["var_jz"].tolist(), c["jx"].tolist(), c["integrated_current"].tolist(),
                         np.append(c["lam"] / cfg.m, np.nan).tolist(),
                         np.append(c["dI"], np.nan).tolist(), np.append(signal, np.nan).tolist(),
                         np.append(c["dI_sem"], np.nan).tolist()))
    cond_table = Table(("Mt", "E_Jz", "sem_Jz", "E_var_Jz", "E_Jx", "E_integrated_current", "E_lambda",
                        "E_dI", "signal_2sqrtM_EJz_dt", "sem_dI"), cond_rows)

    summary = {
        "J": str(j), "gain": controller.label, "dt_Mt": dt_mt,
        "n_trajectories": cfg.n_trajectories, "n_used": avg.n_used, "n_failed": avg.n_failed,
        "record_stride": record_stride, "snapshot_stride": snapshot_stride,
        "max_trace_distance": float(distances.max()),
        "final_trace_distance": float(distances[-1]),
        "max_abs_current_z": _nanmax_abs(current_z),
        "max_abs_mean_Jz_z": _nanmax_abs(jz_z),
    }
    if avg.n_failed:
        log.warning("%d of %d trajectories failed and were excluded", avg.n_failed, len(records))
    one = np.flatnonzero(np.isclose(avg.state_times * cfg.m, 1.0))
    if one.size:
        summary["trace_distance_at_Mt1"] = float(distances[one[0]])
    tables = {"trajectories": traj_table, "ensemble": ens_table, "conditional": cond_table}
    return ResultBundle(_metadata(cfg, start), tables, summary)


def run_regime_check(cfg: SimulationConfig) -> ResultBundle:
    start = time.perf_counter()
    report = regime_check(**cfg.regime, threshold=cfg.regime_threshold)
    return ResultBundle(_metadata(cfg, start), {}, report.as_dict())


RUNNERS = {
    "me": run_me_experiment,
    "sme": run_sme_experiment,
    "sweep": run_sweep,
    "robustness": run_robustness,
    "regime-check": run_regime_check,
}


def run(cfg: SimulationConfig) -> ResultBundle:
    return RUNNERS[cfg.mode](cfg)


__all__ = ["ResultBundle", "Table", "make_gain", "run", "run_me", "run_me_experiment", "run_sweep",
           "run_robustness", "run_sme_experiment", "run_regime_check", "sweep_minima", "replace"]
