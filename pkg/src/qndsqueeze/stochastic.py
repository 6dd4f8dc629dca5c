"""Conditioned (stochastic master equation) trajectories under homodyne
detection of J_z, with and without Markovian feedback.

Trajectories are evolved in stacks of shape (n, d, d); a single trajectory
is a stack of one.  The noise for trajectory k depends only on
(master_seed, k), and stacks are formed from fixed index chunks, so results
do not depend on how many worker threads run them.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .control import EnsembleSelfConsistent, NoFeedback
from .dynamics import EvolutionRecord, TimeGrid, _kernels, feedback_rhs
from .errors import DimensionError, GainSingularity, InsufficientData, PositivityViolation

DEFAULT_CHUNK = 64


@dataclass(frozen=True)
class NoiseStream:
    """Wiener increments for one trajectory, a pure function of (seed, index)."""

    master_seed: int
    trajectory_index: int

    def __post_init__(self):
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")
        if self.trajectory_index < 0:
            raise ValueError("trajectory_index must be non-negative")

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(self.trajectory_index,))
        return np.random.Generator(np.random.Philox(seq))

    def increments(self, n_steps: int, dt: float) -> np.ndarray:
        return self.generator().standard_normal(n_steps) * math.sqrt(dt)


@dataclass(frozen=True)
class ZeroNoise:
    """All dW = 0; turns a trajectory into a deterministic integration."""

    master_seed: int = 0
    trajectory_index: int = 0

    def increments(self, n_steps: int, dt: float) -> np.ndarray:
        return np.zeros(n_steps)


@dataclass
class TrajectoryRecord:
    """One conditioned trajectory sampled every ``record_stride`` steps.

    ``jz``, ``var_jz``, ``jx`` and ``integrated_current`` (int_0^t I_c dt) are
    aligned with ``times``.  ``lam``, ``dI`` and ``dW`` hold the gain applied
    and the increments of the single step that starts at each record time
    except the last, so dI = 2 sqrt(M) <J_z>_c dt + dW holds entrywise.
    """

    index: int
    master_seed: int
    dt: float
    times: np.ndarray
    jz: np.ndarray
    var_jz: np.ndarray
    jx: np.ndarray
    integrated_current: np.ndarray
    lam: np.ndarray
    dI: np.ndarray
    dW: np.ndarray
    state_times: np.ndarray
    states: np.ndarray | None
    failure: str | None = None
    failed_at: float | None = None

    @property
    def ok(self) -> bool:
        return self.failure is None


def measurement_H(r: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """H[r]rho = r rho + rho r^dag - Tr[(r + r^dag) rho] rho."""
    if r.shape != rho.shape[-2:]:
        raise DimensionError(f"shape mismatch: {r.shape} vs {rho.shape}")
    rd = r.conj().T
    mean = np.einsum("ij,...ji->...", r + rd, rho)
    if rho.ndim == 3:
        mean = mean[:, None, None]
    return r @ rho + rho @ rd - mean * rho


def _innovation(rho: np.ndarray, m: float, lam) -> np.ndarray:
    """Coefficient of dW: sqrt(M) H[J_z]rho - i (lam / sqrt M) [J_y, rho]."""
    spin, ops, mz, dephase, anti, jy, jy2 = _kernels(rho.shape[-1])
    diag = np.diagonal(rho, axis1=-2, axis2=-1).real
    two_mean = 2.0 * (diag @ mz)
    if rho.ndim == 3:
        two_mean = two_mean[:, None, None]
    out = math.sqrt(m) * (anti * rho - two_mean * rho)
    lam = np.asarray(lam, dtype=float)
    if lam.ndim:
        lam = lam[:, None, None]
    elif lam == 0.0:
        return out
    return out - 1j * (lam / math.sqrt(m)) * (jy @ rho - rho @ jy)


def _finish(rho: np.ndarray) -> np.ndarray:
    rho = 0.5 * (rho + np.swapaxes(rho.conj(), -1, -2))
    tr = np.trace(rho, axis1=-2, axis2=-1).real
    if rho.ndim == 3:
        tr = tr[:, None, None]
    return rho / tr


@lru_cache(maxsize=64)
def _jy_eigen(dim: int):
    spin, ops, *_ = _kernels(dim)
    mu, vec = np.linalg.eigh(np.asarray(ops.jy))
    return mu, vec, vec.conj().T


def _euler_step(rho, dt, m, lam, dW):
    dW_b = dW[:, None, None] if dW.ndim else dW
    return rho + dt * feedback_rhs(rho, m, lam) + dW_b * _innovation(rho, m, lam)


def _kraus_step(rho, dt, m, lam, dI):
    """Measurement Kraus update followed by the feedback rotation.

    The measurement operator is diagonal in the Dicke basis,
    1 - (M/2) J_z^2 dt + sqrt(M) J_z dI + (M/2) J_z^2 (dI^2 - dt), and the
    feedback is the unitary exp(-i lam dI J_y / sqrt M) driven by the same
    current increment.  Both maps are completely positive.
    """
    spin, ops, mz, *_ = _kernels(rho.shape[-1])
    dI_b = dI[:, None] if dI.ndim else dI
    k = 1 - 0.5 * m * mz**2 * dt + math.sqrt(m) * mz * dI_b + 0.5 * m * mz**2 * (dI_b**2 - dt)
    rho = k[..., :, None] * rho * k[..., None, :]
    theta = np.asarray(lam, dtype=float) * dI / math.sqrt(m)
    if np.any(theta != 0):
        mu, vec, vec_h = _jy_eigen(rho.shape[-1])
        phase = np.exp(-1j * np.multiply.outer(theta, mu))
        rotated = vec_h @ rho @ vec
        rotated = phase[..., :, None] * rotated * phase.conj()[..., None, :]
        rho = vec @ rotated @ vec_h
    return rho


def sme_step_feedback(rho_c: np.ndarray, dt: float, m: float, lam, dW, *,
                      scheme: str = "kraus", normalize: bool = True) -> np.ndarray:
    """One step of the feedback SME

    drho = dt {M D[J_z] - i lam [J_y, J_z . + . J_z] + lam^2/M D[J_y]} rho
         + dW {sqrt(M) H[J_z] - i lam/sqrt(M) [J_y, .]} rho

    ``scheme="euler"`` is the plain Euler-Maruyama update, whose average over
    dW is exactly one explicit Euler step of the unconditioned equation.
    ``scheme="kraus"`` (default) applies the same dynamics as completely
    positive maps and agrees with it to the same order in dt while keeping
    the state positive.

    Accepts one state with scalar ``lam``/``dW`` or a stack of n states with
    length-n arrays.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    dW = np.asarray(dW, dtype=float)
    if not np.all(np.isfinite(dW)):
        raise ValueError("non-finite Wiener increment")
    lam = np.asarray(lam, dtype=float)
    if scheme == "euler":
        new = _euler_step(rho_c, dt, m, lam, dW)
    elif scheme == "kraus":
        mz = _kernels(rho_c.shape[-1])[2]
        jz = np.diagonal(rho_c, axis1=-2, axis2=-1).real @ mz
        new = _kraus_step(rho_c, dt, m, lam, 2 * math.sqrt(m) * jz * dt + dW)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return _finish(new) if normalize else new


def sme_step_no_feedback(rho_c: np.ndarray, dt: float, m: float, dW, *,
                         scheme: str = "kraus", normalize: bool = True) -> np.ndarray:
    """Step of drho = M D[J_z]rho dt + sqrt(M) H[J_z]rho dW."""
    return sme_step_feedback(rho_c, dt, m, 0.0, dW, scheme=scheme, normalize=normalize)


def _check_controller(controller):
    inner = controller
    while hasattr(inner, "inner"):
        inner = inner.inner
    if isinstance(inner, EnsembleSelfConsistent):
        raise ValueError("the ensemble gain needs the unconditioned state; use Conditioned for trajectories")


def _run_stack(rho0: np.ndarray, grid: TimeGrid, m: float, controller, noises, *,
               record_stride: int, snapshot_stride: int | None, scheme: str = "kraus",
               positivity_every: int = 100, eigen_floor: float = -1e-6) -> list[TrajectoryRecord]:
    n_traj = len(noises)
    n = grid.n_steps
    dt = grid.dt
    if scheme not in ("kraus", "euler"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if record_stride < 1 or (snapshot_stride is not None and snapshot_stride < 1):
        raise ValueError("strides must be >= 1")
    spin, ops, mz, *_ = _kernels(rho0.shape[0])
    jx_op = np.asarray(ops.jx)
    sqrt_m = math.sqrt(m)

    dW_all = np.stack([noise.increments(n, dt) for noise in noises])
    rhos = np.broadcast_to(rho0, (n_traj, *rho0.shape)).astype(complex)
    times = grid.times()

    rec_steps = list(range(0, n + 1, record_stride))
    if rec_steps[-1] != n:
        rec_steps.append(n)
    rec_pos = {k: i for i, k in enumerate(rec_steps)}
    n_rec = len(rec_steps)
    jz_rec = np.empty((n_traj, n_rec))
    var_rec = np.empty((n_traj, n_rec))
    jx_rec = np.empty((n_traj, n_rec))
    q_rec = np.empty((n_traj, n_rec))
    lam_rec = np.empty((n_traj, n_rec - 1))
    di_rec = np.empty((n_traj, n_rec - 1))
    dw_rec = np.empty((n_traj, n_rec - 1))

    if snapshot_stride is None:
        snap_steps = []
    else:
        snap_steps = list(range(0, n + 1, snapshot_stride))
        if snap_steps[-1] != n:
            snap_steps.append(n)
    snap_pos = {k: i for i, k in enumerate(snap_steps)}
    snaps = np.empty((n_traj, len(snap_steps), *rho0.shape), dtype=complex) if snap_steps else None

    alive = np.ones(n_traj, dtype=bool)
    failure = [None] * n_traj
    failed_at = [None] * n_traj
    q = np.zeros(n_traj)

    for k in range(n + 1):
        t = times[k]
        diag = np.diagonal(rhos, axis1=1, axis2=2).real
        jz = diag @ mz
        if k in rec_pos:
            i = rec_pos[k]
            jz_rec[:, i] = jz
            var_rec[:, i] = diag @ (mz * mz) - jz * jz
            jx_rec[:, i] = np.einsum("ij,nji->n", jx_op, rhos).real
            q_rec[:, i] = q
        if k in snap_pos:
            snaps[:, snap_pos[k]] = rhos
        if k % positivity_every == 0 or k == n:
            _check_stack(rhos, alive, t, eigen_floor)
        if k == n:
            break
        lam = np.asarray(controller.batch(t, rhos), dtype=float)
        newly_bad = alive & ~np.isfinite(lam)
        for idx in np.flatnonzero(newly_bad):
            failure[idx] = f"GainSingularity: <J_x>_c collapsed at t = {t:g}"
            failed_at[idx] = float(t)
        alive &= ~newly_bad
        lam = np.where(alive, lam, 0.0)
        dW = np.where(alive, dW_all[:, k], 0.0)
        dI = 2 * sqrt_m * jz * dt + dW
        if k in rec_pos:
            i = rec_pos[k]
            lam_rec[:, i] = lam
            di_rec[:, i] = dI
            dw_rec[:, i] = dW
        q = q + dI
        if scheme == "kraus":
            rhos = _finish(_kraus_step(rhos, dt, m, lam, dI))
        else:
            rhos = _finish(_euler_step(rhos, dt, m, lam, dW))

    records = []
    for s, noise in enumerate(noises):
        records.append(TrajectoryRecord(
            index=noise.trajectory_index,
            master_seed=noise.master_seed,
            dt=dt,
            times=times[rec_steps],
            jz=jz_rec[s],
            var_jz=var_rec[s],
            jx=jx_rec[s],
            integrated_current=q_rec[s],
            lam=lam_rec[s],
            dI=di_rec[s],
            dW=dw_rec[s],
            state_times=times[snap_steps] if snap_steps else np.empty(0),
            states=None if snaps is None else snaps[s],
            failure=failure[s],
            failed_at=failed_at[s],
        ))
    return records


def _check_stack(rhos: np.ndarray, alive: np.ndarray, t: float, eigen_floor: float):
    live = rhos[alive]
    if live.size == 0:
        return
    if not np.all(np.isfinite(live)):
        raise PositivityViolation(f"conditioned state became non-finite at t = {t:g}; reduce dt")
    lowest = np.linalg.eigvalsh(live)[:, 0].min()
    if lowest < eigen_floor:
        raise PositivityViolation(f"conditioned state eigenvalue {lowest:.3e} at t = {t:g}; reduce dt")


def run_trajectory(rho0: np.ndarray, grid: TimeGrid, m: float, controller=None, noise=None, *,
                   record_stride: int = 1, snapshot_stride: int | None = None,
                   scheme: str = "kraus", eigen_floor: float = -1e-6) -> TrajectoryRecord:
    """Integrate one conditioned trajectory.

    Each step draws dW, forms the current increment
    I_c dt = 2 sqrt(M) <J_z>_c dt + dW, evaluates the gain and applies one
    feedback SME step.  Raises GainSingularity if a state-based gain fails.
    """
    controller = NoFeedback() if controller is None else controller
    _check_controller(controller)
    noise = NoiseStream(0, 0) if noise is None else noise
    rho0 = np.asarray(rho0, dtype=complex)
    (rec,) = _run_stack(rho0, grid, m, controller, [noise],
                        record_stride=record_stride, snapshot_stride=snapshot_stride, scheme=scheme,
                        eigen_floor=eigen_floor)
    if not rec.ok:
        raise GainSingularity(rec.failure)
    return rec


def run_ensemble(rho0: np.ndarray, grid: TimeGrid, m: float, controller=None, *,
                 n_trajectories: int, master_seed: int, threads: int = 1,
                 chunk_size: int = DEFAULT_CHUNK, record_stride: int = 1,
                 snapshot_stride: int | None = None, first_index: int = 0,
                 scheme: str = "kraus", eigen_floor: float = -1e-6) -> list[TrajectoryRecord]:
    """Run trajectories ``first_index .. first_index + n_trajectories - 1``.

    Failed trajectories are returned with ``failure`` set rather than raised.
    Output is independent of ``threads``.
    """
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be >= 1")
    controller = NoFeedback() if controller is None else controller
    _check_controller(controller)
    rho0 = np.asarray(rho0, dtype=complex)
    indices = list(range(first_index, first_index + n_trajectories))
    chunks = [indices[i:i + chunk_size] for i in range(0, len(indices), chunk_size)]

    def work(chunk):
        noises = [NoiseStream(master_seed, k) for k in chunk]
        return _run_stack(rho0, grid, m, controller, noises, record_stride=record_stride,
                          snapshot_stride=snapshot_stride, scheme=scheme, eigen_floor=eigen_floor)

    if threads <= 1:
        results = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, chunks))
    return [rec for chunk in results for rec in chunk]


@dataclass
class EnsembleAverage(EvolutionRecord):
    """``times``/``states``/``observables`` refer to the snapshot times;
    ``conditional`` arrays are aligned with ``record_times``."""

    record_times: np.ndarray | None = None
    n_used: int = 0
    n_failed: int = 0
    conditional: dict = field(default_factory=dict)


def ensemble_average(trajectories) -> EnsembleAverage:
    """Average states and conditioned observables over successful trajectories.

    Sums run in trajectory-index order.  ``observables`` are computed from the
    averaged state (including its purity); ``conditional`` holds the means
    and standard errors of the per-trajectory quantities, plus the mean
    conditional purity at the snapshot times.
    """
    records = sorted(trajectories, key=lambda r: r.index)
    if not records:
        raise InsufficientData("no trajectories to average")
    good = [r for r in records if r.ok]
    if not good:
        raise InsufficientData("every trajectory failed")
    ref = good[0]
    for r in good[1:]:
        if r.times.shape != ref.times.shape or not np.array_equal(r.times, ref.times):
            raise ValueError("trajectories were recorded on different grids")
    n = len(good)

    def mean_sem(name):
        data = np.stack([getattr(r, name) for r in good])
        mean = data.sum(axis=0) / n
        sem = data.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full(mean.shape, np.nan)
        return mean, sem

    conditional = {}
    for name in ("jz", "var_jz", "jx", "integrated_current", "lam", "dI", "dW"):
        conditional[name], conditional[name + "_sem"] = mean_sem(name)

    observables = {}
    if ref.states is not None and ref.states.size:
        stack = np.stack([r.states for r in good])
        mean_states = stack.sum(axis=0) / n
        cond_purity = np.einsum("nsij,nsij->ns", stack, stack.conj()).real
        conditional["purity"] = cond_purity.sum(axis=0) / n
        spin, ops, mz, dephase, anti, jy, jy2 = _kernels(mean_states.shape[-1])
        diag = np.diagonal(mean_states, axis1=1, axis2=2).real
        jx = np.einsum("ij,sji->s", ops.jx, mean_states).real
        jz = diag @ mz
        jz2 = diag @ (mz * mz)
        observables = {
            "jx": jx,
            "jy": np.einsum("ij,sji->s", ops.jy, mean_states).real,
            "jz": jz,
            "jz2": jz2,
            "var_jz": jz2 - jz * jz,
            "jy2": np.einsum("ij,sji->s", jy2, mean_states).real,
            "purity": np.einsum("sij,sij->s", mean_states, mean_states.conj()).real,
            "xi2_z": spin.n_atoms * jz2 / (jx * jx),
        }
        state_times = ref.state_times
    else:
        mean_states = np.empty((0,))
        state_times = np.empty(0)

    return EnsembleAverage(
        times=state_times,
        observables=observables,
        state_times=state_times,
        states=mean_states,
        meta={"dt": ref.dt, "master_seed": ref.master_seed},
        record_times=ref.times,
        n_used=n,
        n_failed=len(records) - n,
        conditional=conditional,
    )
