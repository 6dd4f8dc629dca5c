"""Deterministic evolution of the unconditioned state.

The feedback master equation is

    drho/dt = M D[J_z]rho - i lam(t) [J_y, J_z rho + rho J_z] + (lam(t)^2 / M) D[J_y]rho

with lam = 0 giving pure measurement dephasing.  It is integrated with
fixed-step classical RK4.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .control import NoFeedback
from .errors import DimensionError, PositivityViolation, StepSizeError
from .spin_algebra import build_spin_operators, m_values, spin_j_from_dim

log = logging.getLogger(__name__)

# RK4 stability interval on the negative real axis
RK4_STABILITY = 2.785


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    t_end: float
    dt: float

    def __post_init__(self):
        if not (math.isfinite(self.t_start) and math.isfinite(self.t_end) and math.isfinite(self.dt)):
            raise ValueError("time grid values must be finite")
        if self.t_end <= self.t_start:
            raise ValueError("t_end must exceed t_start")
        if self.dt <= 0 or self.dt > self.t_end - self.t_start:
            raise ValueError("dt must be positive and no longer than the interval")
        if self.n_steps > 2**31:
            raise ValueError("too many steps")

    @property
    def n_steps(self) -> int:
        return int(round((self.t_end - self.t_start) / self.dt))

    def times(self) -> np.ndarray:
        # t_k = t0 + k dt exactly, no accumulated drift
        return self.t_start + self.dt * np.arange(self.n_steps + 1)


@dataclass
class EvolutionRecord:
    times: np.ndarray
    observables: dict
    state_times: np.ndarray
    states: np.ndarray
    meta: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.observables[key]

    def state_at(self, t: float) -> np.ndarray:
        idx = int(np.argmin(np.abs(self.state_times - t)))
        if abs(self.state_times[idx] - t) > 1e-9 * max(1.0, abs(t)):
            raise KeyError(f"no stored state at t = {t}")
        return self.states[idx]


OBSERVABLES = ("jx", "jy", "jz", "jz2", "jy2", "purity", "lam", "xi2_z")


@lru_cache(maxsize=64)
def _kernels(dim: int):
    spin = spin_j_from_dim(dim)
    ops = build_spin_operators(spin)
    m = m_values(spin)
    dephase = -0.5 * (m[:, None] - m[None, :]) ** 2
    anti = m[:, None] + m[None, :]
    jy = np.asarray(ops.jy)
    jy2 = jy @ jy
    return spin, ops, m, dephase, anti, jy, jy2


@lru_cache(maxsize=64)
def _ladder(dim: int) -> np.ndarray:
    """Superdiagonal of J+, <J, m+1| J+ |J, m> in descending-m order."""
    spin = spin_j_from_dim(dim)
    m = m_values(spin)[1:]
    return np.sqrt(spin.j * (spin.j + 1) - m * (m + 1))


def jy_left(x: np.ndarray) -> np.ndarray:
    """J_y @ x using the tridiagonal structure; x may be a stack (..., d, d)."""
    c = _ladder(x.shape[-1])[:, None]
    out = np.zeros(x.shape, dtype=complex)
    out[..., :-1, :] = c * x[..., 1:, :]
    out[..., 1:, :] -= c * x[..., :-1, :]
    out *= -0.5j
    return out


def jy_right(x: np.ndarray) -> np.ndarray:
    """x @ J_y using the tridiagonal structure."""
    c = _ladder(x.shape[-1])
    out = np.zeros(x.shape, dtype=complex)
    out[..., :, 1:] = x[..., :, :-1] * c
    out[..., :, :-1] -= x[..., :, 1:] * c
    out *= -0.5j
    return out


def lindblad_D(r: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """D[r]rho = r rho r^dag - (r^dag r rho + rho r^dag r) / 2."""
    if r.shape != rho.shape[-2:]:
        raise DimensionError(f"shape mismatch: {r.shape} vs {rho.shape}")
    rd = r.conj().T
    rdr = rd @ r
    return r @ rho @ rd - 0.5 * (rdr @ rho + rho @ rdr)


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b - b @ a


def feedback_rhs(rho: np.ndarray, m: float, lam) -> np.ndarray:
    """Right-hand side for a given gain value (or array of values for a stack).

    ``rho`` must be Hermitian; products of the form X rho are reused through
    (X rho)^dag = rho X.
    """
    spin, ops, mz, dephase, anti, jy, jy2 = _kernels(rho.shape[-1])
    out = m * dephase * rho
    lam = np.asarray(lam, dtype=float)
    if lam.ndim:
        lam = lam[:, None, None]
    elif lam == 0.0:
        return out
    a = jy_left(anti * rho)
    b = jy_left(rho)
    c = jy_left(b)
    out = out - 1j * lam * (a - _dag(a))
    out = out + (lam * lam / m) * (jy_right(b) - 0.5 * (c + _dag(c)))
    return out


def _dag(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2).conj()


def me_rhs(rho: np.ndarray, t: float, m: float, gain=None) -> np.ndarray:
    """Time derivative of the unconditioned state under feedback ``gain``."""
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise DimensionError(f"expected a square matrix, got {rho.shape}")
    gain = NoFeedback() if gain is None else gain
    return feedback_rhs(rho, m, gain(t, rho))


def rk4_stable_dt(two_j: int, m: float) -> float:
    """Largest RK4 step that keeps the fastest dephasing mode stable.

    The measurement dissipator damps rho_{mn} at rate M (m - n)^2 / 2, at most
    2 J^2 M.  Feedback noise adds a comparable term once lam ~ M.
    """
    j = two_j / 2
    return RK4_STABILITY / (2 * j * j * m)


def stable_dt_for_gain(two_j: int, m: float, lam: float) -> float:
    """RK4 step bound once feedback noise lam^2/M D[J_y] joins the dephasing."""
    j = two_j / 2
    return RK4_STABILITY / (2 * j * j * (m + lam * lam / m))


def default_me_dt(two_j: int, m: float = 1.0) -> float:
    """1e-3/M, tightened for large J so that feedback gains up to ~M stay stable."""
    j = two_j / 2
    return min(1e-3, 0.4 / (j * j)) / m


def _observables(rho: np.ndarray, ops, mz: np.ndarray, jy2: np.ndarray, j: float) -> tuple:
    diag = np.diagonal(rho).real
    jx = np.einsum("ij,ji->", ops.jx, rho).real
    jy = np.einsum("ij,ji->", ops.jy, rho).real
    jz = diag @ mz
    jz2 = diag @ (mz * mz)
    jy2v = np.einsum("ij,ji->", jy2, rho).real
    pur = np.vdot(rho, rho).real
    xi2 = 2 * j * jz2 / (jx * jx) if jx != 0 else np.inf
    return jx, jy, jz, jz2, jy2v, pur, xi2


def integrate_me(rho0: np.ndarray, grid: TimeGrid, m: float, gain=None, *,
                 state_stride: int = 1, positivity_every: int = 100,
                 eigen_floor: float = -1e-6) -> EvolutionRecord:
    """Integrate the feedback master equation with fixed-step RK4.

    State-based gains are re-evaluated at every RK4 stage.  After each step
    the state is re-Hermitized and its trace reset to one.
    """
    if m <= 0:
        raise ValueError("measurement strength must be positive")
    gain = NoFeedback() if gain is None else gain
    rho = np.array(rho0, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise DimensionError(f"expected a square matrix, got {rho.shape}")
    spin, ops, mz, dephase, anti, jy, jy2 = _kernels(rho.shape[0])
    if grid.dt > rk4_stable_dt(spin.two_j, m):
        raise StepSizeError(
            f"dt = {grid.dt:g} exceeds the RK4 stability limit {rk4_stable_dt(spin.two_j, m):.3g} for J = {spin}",
            max_stable_dt=rk4_stable_dt(spin.two_j, m),
        )
    if state_stride < 1:
        raise ValueError("state_stride must be >= 1")

    n = grid.n_steps
    times = grid.times()
    obs = np.empty((n + 1, len(OBSERVABLES)))
    states = []
    state_idx = []
    max_correction = 0.0
    dt = grid.dt

    def rhs(t, r):
        return feedback_rhs(r, m, gain(t, r))

    for k in range(n + 1):
        t = times[k]
        lam = gain(t, rho)
        if not math.isfinite(lam):
            raise PositivityViolation(f"gain became non-finite at t = {t:g}")
        limit = stable_dt_for_gain(spin.two_j, m, lam)
        if dt > limit:
            raise StepSizeError(
                f"gain reached {lam:.3g} at t = {t:g}; RK4 needs dt <= {limit:.3g} (have {dt:g})",
                max_stable_dt=limit,
            )
        vals = _observables(rho, ops, mz, jy2, spin.j)
        obs[k] = (*vals[:6], lam, vals[6])
        if k % state_stride == 0 or k == n:
            states.append(rho.copy())
            state_idx.append(k)
        if k % positivity_every == 0 or k == n:
            _check_step(rho, t, eigen_floor)
        if k == n:
            break
        k1 = rhs(t, rho)
        k2 = rhs(t + dt / 2, rho + (dt / 2) * k1)
        k3 = rhs(t + dt / 2, rho + (dt / 2) * k2)
        k4 = rhs(t + dt, rho + dt * k3)
        rho = rho + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        rho = 0.5 * (rho + rho.conj().T)
        tr = np.trace(rho).real
        max_correction = max(max_correction, abs(tr - 1))
        rho /= tr

    log.debug("integrate_me: J=%s steps=%d max trace correction %.2e", spin, n, max_correction)
    observables = {name: obs[:, i].copy() for i, name in enumerate(OBSERVABLES)}
    return EvolutionRecord(
        times=times,
        observables=observables,
        state_times=times[state_idx],
        states=np.array(states),
        meta={"two_j": spin.two_j, "m": m, "dt": dt, "gain": getattr(gain, "label", "custom"),
              "max_trace_correction": max_correction},
    )


def _check_step(rho: np.ndarray, t: float, eigen_floor: float):
    if not np.all(np.isfinite(rho)):
        raise PositivityViolation(f"state became non-finite at t = {t:g}; reduce dt")
    lowest = np.linalg.eigvalsh(rho)[0]
    if lowest < eigen_floor:
        raise PositivityViolation(f"smallest eigenvalue {lowest:.3e} at t = {t:g}; reduce dt")
