"""Feedback gain schedules lambda(t) and the cavity-regime checker.

A schedule is called as ``schedule(t, rho)`` and returns the feedback
strength.  State-based schedules read ``rho``; the others ignore it.  Every
schedule also has ``batch(t, rhos)`` taking a stack of states of shape
(n, d, d) and returning an array of n gains, which the trajectory ensemble
uses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, GainSingularity
from .spin_algebra import SpinQuantumNumber, _as_spin, m_values, build_spin_operators, spin_j_from_dim

SINGULARITY_REL = 1e-6


@lru_cache(maxsize=64)
def _moment_kernels(dim: int):
    spin = spin_j_from_dim(dim)
    m = m_values(spin)
    return spin.j, m * m, np.ascontiguousarray(build_spin_operators(spin).jx.real)


def _state_moments(rhos: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """<J_z^2> and <J_x> for one state (d, d) or a stack (n, d, d)."""
    j, m2, jx = _moment_kernels(rhos.shape[-1])
    jz2 = np.diagonal(rhos, axis1=-2, axis2=-1).real @ m2
    # Tr[J_x rho] with J_x real symmetric
    jx_mean = np.einsum("ij,...ij->...", jx, rhos.real)
    return jz2, jx_mean, j


def _state_gain(rho: np.ndarray, m: float, eps_rel: float) -> float:
    jz2, jx_mean, j = _state_moments(rho)
    if jx_mean <= eps_rel * j:
        raise GainSingularity(f"<J_x> = {float(jx_mean):.3e} <= {eps_rel * j:.1e}; linearized feedback regime has broken down")
    return float(2.0 * m * jz2 / jx_mean)


def gain_conditioned(rho_c: np.ndarray, m: float, eps_rel: float = SINGULARITY_REL) -> float:
    """lambda = 2M <J_z^2>_c / <J_x>_c for a conditioned state."""
    return _state_gain(rho_c, m, eps_rel)


def gain_ensemble(rho: np.ndarray, m: float, eps_rel: float = SINGULARITY_REL) -> float:
    """Same formula fed the unconditioned state (self-consistent schedule)."""
    return _state_gain(rho, m, eps_rel)


def gain_analytic(t, m: float, j) -> float | np.ndarray:
    """Closed-form schedule M exp(Mt/2) / (1 + 2JMt)."""
    j = _as_spin(j).j
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("gain_analytic needs t >= 0")
    mt = m * t
    out = m * np.exp(mt / 2) / (1 + 2 * j * mt)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class NoFeedback:
    label = "zero"
    state_dependent = False

    def __call__(self, t: float, rho: np.ndarray | None = None) -> float:
        return 0.0

    def batch(self, t: float, rhos: np.ndarray) -> np.ndarray:
        return np.zeros(rhos.shape[0])


@dataclass(frozen=True)
class _StateGain:
    m: float
    eps_rel: float = SINGULARITY_REL
    state_dependent = True

    def __call__(self, t: float, rho: np.ndarray) -> float:
        return _state_gain(rho, self.m, self.eps_rel)

    def batch(self, t: float, rhos: np.ndarray) -> np.ndarray:
        """Vectorized gain; singular members come back as NaN."""
        jz2, jx_mean, j = _state_moments(rhos)
        ok = jx_mean > self.eps_rel * j
        out = np.full(rhos.shape[0], np.nan)
        out[ok] = 2.0 * self.m * jz2[ok] / jx_mean[ok]
        return out


@dataclass(frozen=True)
class Conditioned(_StateGain):
    label = "conditioned"


@dataclass(frozen=True)
class EnsembleSelfConsistent(_StateGain):
    label = "ensemble"


@dataclass(frozen=True)
class AnalyticClosedForm:
    m: float
    j: SpinQuantumNumber
    label = "analytic"
    state_dependent = False

    def __post_init__(self):
        object.__setattr__(self, "j", _as_spin(self.j))

    def __call__(self, t: float, rho: np.ndarray | None = None) -> float:
        return gain_analytic(t, self.m, self.j)

    def batch(self, t: float, rhos: np.ndarray) -> np.ndarray:
        return np.full(rhos.shape[0], self(t))


@dataclass(frozen=True)
class Tabulated:
    """Linear interpolation through (t, lambda) samples; no extrapolation."""

    times: tuple
    values: tuple
    label = "tabulated"
    state_dependent = False

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.ndim != 1 or times.shape != values.shape or times.size < 2:
            raise ConfigError("gain table needs at least two (t, lambda) rows")
        if np.any(np.diff(times) <= 0):
            raise ConfigError("gain table times must be strictly increasing")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise ConfigError("gain table has non-finite entries")
        object.__setattr__(self, "times", tuple(times))
        object.__setattr__(self, "values", tuple(values))

    @classmethod
    def from_file(cls, path) -> "Tabulated":
        """Two columns (t, lambda), whitespace or comma separated; '#' comments."""
        rows = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 2:
                raise ConfigError(f"{path}:{lineno}: expected two columns, got {len(parts)}")
            try:
                rows.append((float(parts[0]), float(parts[1])))
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from exc
        if not rows:
            raise ConfigError(f"{path}: empty gain table")
        t, v = zip(*rows)
        return cls(t, v)

    def __call__(self, t: float, rho: np.ndarray | None = None) -> float:
        lo, hi = self.times[0], self.times[-1]
        # tolerate float drift of the time grid at the table edges
        slack = 1e-9 * max(1.0, abs(hi - lo))
        if t < lo - slack or t > hi + slack:
            raise ValueError(f"t = {t} outside gain table domain [{lo}, {hi}]")
        return float(np.interp(t, self.times, self.values))

    def batch(self, t: float, rhos: np.ndarray) -> np.ndarray:
        return np.full(rhos.shape[0], self(t))


@dataclass(frozen=True)
class Perturbed:
    """Scales another schedule by (1 + epsilon), modelling a miscalibrated gain."""

    inner: object
    epsilon: float

    @property
    def label(self):
        return f"{self.inner.label}*{1 + self.epsilon:g}"

    @property
    def state_dependent(self):
        return self.inner.state_dependent

    def __call__(self, t: float, rho: np.ndarray | None = None) -> float:
        return (1.0 + self.epsilon) * self.inner(t, rho)

    def batch(self, t: float, rhos: np.ndarray) -> np.ndarray:
        return (1.0 + self.epsilon) * self.inner.batch(t, rhos)


@dataclass(frozen=True)
class RegimeReport:
    inputs: dict
    threshold: float
    adiabatic_margin: float
    loss_margin: float
    detuning_margin: float
    onset_margin: float
    adiabatic_ok: bool = field(init=False)
    loss_ok: bool = field(init=False)
    detuning_ok: bool = field(init=False)
    squeezing_onset: bool = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "adiabatic_ok", bool(self.adiabatic_margin > self.threshold))
        object.__setattr__(self, "loss_ok", bool(self.loss_margin > self.threshold))
        object.__setattr__(self, "detuning_ok", bool(self.detuning_margin > self.threshold))
        object.__setattr__(self, "squeezing_onset", bool(self.onset_margin > 1.0))

    @property
    def all_ok(self) -> bool:
        return self.adiabatic_ok and self.loss_ok and self.detuning_ok

    def as_dict(self) -> dict:
        out = {f"input.{k}": v for k, v in self.inputs.items()}
        out.update(
            threshold=self.threshold,
            adiabatic_margin=self.adiabatic_margin,
            adiabatic_ok=self.adiabatic_ok,
            loss_margin=self.loss_margin,
            loss_ok=self.loss_ok,
            detuning_margin=self.detuning_margin,
            detuning_ok=self.detuning_ok,
            onset_margin=self.onset_margin,
            squeezing_onset=self.squeezing_onset,
            all_ok=self.all_ok,
        )
        return out


def regime_check(g, kappa, gamma, delta, chi, beta_sq, n_atoms, threshold: float = 10.0) -> RegimeReport:
    """Check the cavity-QED conditions the feedback scheme relies on.

    Margins are raw ratios; a condition "a >> b" passes when a/b is strictly
    above ``threshold``.

    * adiabatic elimination: kappa / (chi |beta| sqrt N)
    * negligible probe loss by t = 1/M: g^2 / (N kappa gamma)
    * both at once: Delta / (gamma N^{3/2})
    * squeezing onset (xi^2 < 1 reachable): g^2 N / (kappa gamma) > 1
    """
    inputs = dict(g=g, kappa=kappa, gamma=gamma, delta=delta, chi=chi, beta_sq=beta_sq, n_atoms=n_atoms)
    for name, value in inputs.items():
        if not (value > 0 and math.isfinite(value)):
            raise ValueError(f"{name} must be positive and finite, got {value!r}")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    n = float(n_atoms)
    return RegimeReport(
        inputs=inputs,
        threshold=float(threshold),
        adiabatic_margin=kappa / (chi * math.sqrt(beta_sq) * math.sqrt(n)),
        loss_margin=g * g / (n * kappa * gamma),
        detuning_margin=delta / (gamma * n ** 1.5),
        onset_margin=g * g * n / (kappa * gamma),
    )


def single_shot_bound(epsilon: float) -> float:
    """Floor on xi^2_min for one measurement pulse plus one feedback pulse
    with relative gain error epsilon; independent of J."""
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    return float(epsilon) ** 2
