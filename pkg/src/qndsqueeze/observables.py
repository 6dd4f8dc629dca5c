"""Squeezing parameters, minimum finding and 1/J scaling fits."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDirection, InsufficientData, MinimumAtBoundary
from .spin_algebra import _as_spin, build_spin_operators, expectation, spin_j_from_dim


@dataclass
class SqueezingCurve:
    times: np.ndarray
    xi2_values: np.ndarray
    j: float
    label: str = ""


@dataclass
class ScalingFit:
    j_values: np.ndarray
    xi2_min_values: np.ndarray
    t_min_values: np.ndarray | None
    coefficient: float
    residual: float
    amplitude: float
    exponent: float


def _direction_operator(ops, n) -> np.ndarray:
    return n[0] * ops.jx + n[1] * ops.jy + n[2] * ops.jz


def xi2_direction(rho: np.ndarray, n1, n2, n3) -> float:
    """N Var(J_n1) / (<J_n2>^2 + <J_n3>^2) for an orthonormal triad."""
    frame = np.array([n1, n2, n3], dtype=float)
    if frame.shape != (3, 3) or np.max(np.abs(frame @ frame.T - np.eye(3))) > 1e-10:
        raise ValueError("n1, n2, n3 must be orthonormal")
    spin = spin_j_from_dim(rho.shape[0])
    ops = build_spin_operators(spin)
    a1 = _direction_operator(ops, frame[0])
    mean1 = expectation(a1, rho)
    var1 = expectation(a1 @ a1, rho) - mean1 * mean1
    denom = expectation(_direction_operator(ops, frame[1]), rho) ** 2 + \
        expectation(_direction_operator(ops, frame[2]), rho) ** 2
    if denom <= 1e-12 * spin.j ** 2:
        raise DegenerateDirection("mean spin has no component in the n2-n3 plane")
    return spin.n_atoms * var1 / denom


def xi2_z(rho: np.ndarray) -> float:
    """2J <J_z^2> / <J_x>^2."""
    spin = spin_j_from_dim(rho.shape[0])
    ops = build_spin_operators(spin)
    jx = expectation(ops.jx, rho)
    if jx * jx <= 1e-12 * spin.j ** 2:
        raise DegenerateDirection("<J_x> vanishes")
    return spin.n_atoms * expectation(ops.jz @ ops.jz, rho) / (jx * jx)


def xi2_analytic(t, m: float, j) -> float | np.ndarray:
    """exp(Mt) / (1 + 2JMt)."""
    j = _as_spin(j).j
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("xi2_analytic needs t >= 0")
    out = np.exp(m * t) / (1 + 2 * j * m * t)
    return float(out) if out.ndim == 0 else out


def xi2_analytic_minimum(m: float, j) -> tuple[float, float]:
    """Stationary point of ``xi2_analytic``: t* = (1 - 1/2J)/M."""
    j = _as_spin(j).j
    x = 1 - 1 / (2 * j)
    return x / m, math.exp(x) / (2 * j)


def find_minimum(curve: SqueezingCurve) -> tuple[float, float]:
    """Smallest sample refined by a parabola through it and its neighbours."""
    t = np.asarray(curve.times, dtype=float)
    y = np.asarray(curve.xi2_values, dtype=float)
    if t.size < 3 or t.shape != y.shape:
        raise InsufficientData("need at least three aligned samples")
    finite = np.isfinite(y)
    if not finite.all():
        raise ValueError("curve contains non-finite values")
    i = int(np.argmin(y))
    if i == 0 or i == t.size - 1:
        raise MinimumAtBoundary(
            f"minimum at grid edge t = {t[i]:g}; extend the run (e.g. to 3/M)"
        )
    t0, t1, t2 = t[i - 1:i + 2]
    y0, y1, y2 = y[i - 1:i + 2]
    # vertex of the interpolating parabola (divided differences)
    d01 = (y1 - y0) / (t1 - t0)
    d12 = (y2 - y1) / (t2 - t1)
    a = (d12 - d01) / (t2 - t0)
    if a <= 0:
        return float(t1), float(y1)
    b = d01 - a * (t0 + t1)
    tv = -b / (2 * a)
    yv = y0 + d01 * (tv - t0) + a * (tv - t0) * (tv - t1)
    return float(tv), float(yv)


def fit_scaling(j_values, xi2_min_values, t_min_values=None) -> ScalingFit:
    """Fit xi2_min = c / J through the origin and xi2_min = a J^-b in log space."""
    j = np.asarray(j_values, dtype=float)
    y = np.asarray(xi2_min_values, dtype=float)
    if j.shape != y.shape or np.unique(j).size < 3:
        raise InsufficientData("scaling fit needs at least three distinct J values")
    if np.any(y <= 0) or np.any(j <= 0):
        raise ValueError("J and xi2_min must be positive")
    x = 1.0 / j
    c = float(x @ y / (x @ x))
    residual = float(np.sqrt(np.mean((y - c * x) ** 2)))
    slope, intercept = np.polyfit(np.log(j), np.log(y), 1)
    return ScalingFit(
        j_values=j,
        xi2_min_values=y,
        t_min_values=None if t_min_values is None else np.asarray(t_min_values, dtype=float),
        coefficient=c,
        residual=residual,
        amplitude=float(np.exp(intercept)),
        exponent=float(-slope),
    )
