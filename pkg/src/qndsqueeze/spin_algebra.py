"""Collective spin operators and states in the Dicke basis.

Basis ordering is |J, m> with m running from +J down to -J, shared by every
module in the package.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .errors import DimensionError, PositivityViolation

MAX_DIM = 4001

TRACE_TOL = 1e-9
HERMITIAN_TOL = 1e-9
EIGEN_TOL = 1e-8


@dataclass(frozen=True)
class SpinQuantumNumber:
    """Total spin J stored as the integer 2J (= number of atoms N)."""

    two_j: int

    def __post_init__(self):
        if int(self.two_j) != self.two_j or self.two_j < 1:
            raise DimensionError(f"two_j must be a positive integer, got {self.two_j!r}")
        object.__setattr__(self, "two_j", int(self.two_j))

    @classmethod
    def from_j(cls, j) -> "SpinQuantumNumber":
        """Accepts 0.5, "1/2", "25", Fraction(5, 2), ..."""
        try:
            frac = Fraction(j.strip()) if isinstance(j, str) else Fraction(j)
        except (ValueError, TypeError) as exc:
            raise DimensionError(f"cannot read J from {j!r}") from exc
        two_j = 2 * frac
        if two_j.denominator != 1:
            raise DimensionError(f"J must be an integer or half-integer, got {j!r}")
        return cls(int(two_j))

    @property
    def j(self) -> float:
        return self.two_j / 2

    @property
    def n_atoms(self) -> int:
        return self.two_j

    @property
    def dim(self) -> int:
        return self.two_j + 1

    def __str__(self):
        return str(self.two_j // 2) if self.two_j % 2 == 0 else f"{self.two_j}/2"


def _as_spin(j) -> SpinQuantumNumber:
    if isinstance(j, SpinQuantumNumber):
        return j
    return SpinQuantumNumber.from_j(j)


class SpinOperators(NamedTuple):
    jx: np.ndarray
    jy: np.ndarray
    jz: np.ndarray


def m_values(j) -> np.ndarray:
    """Magnetic quantum numbers J, J-1, ..., -J."""
    j = _as_spin(j)
    return j.j - np.arange(j.dim, dtype=float)


@lru_cache(maxsize=64)
def _operators(two_j: int, max_dim: int) -> SpinOperators:
    dim = two_j + 1
    if dim > max_dim:
        raise DimensionError(f"Hilbert-space dimension {dim} exceeds the maximum {max_dim}")
    jval = two_j / 2
    m = jval - np.arange(dim, dtype=float)
    # <J, m+1| J+ |J, m> sits one row above the diagonal in descending order
    jplus = np.diag(np.sqrt(jval * (jval + 1) - m[1:] * (m[1:] + 1)), k=1).astype(complex)
    jminus = jplus.conj().T
    jx = 0.5 * (jplus + jminus)
    jy = -0.5j * (jplus - jminus)
    jz = np.diag(m).astype(complex)
    for op in (jx, jy, jz):
        op.setflags(write=False)
    return SpinOperators(jx, jy, jz)


def build_spin_operators(j, max_dim: int = MAX_DIM) -> SpinOperators:
    """Return (J_x, J_y, J_z) as dense complex matrices.

    The arrays are cached and read-only; copy before modifying.
    """
    return _operators(_as_spin(j).two_j, max_dim)


def spin_j_from_dim(dim: int) -> SpinQuantumNumber:
    return SpinQuantumNumber(dim - 1)


def css_x(j, max_dim: int = MAX_DIM) -> np.ndarray:
    """Coherent spin state polarized along +x (every atom in (|1>+|2>)/sqrt 2)."""
    j = _as_spin(j)
    if j.dim > max_dim:
        raise DimensionError(f"Hilbert-space dimension {j.dim} exceeds the maximum {max_dim}")
    # amplitudes of the rotated |J, J>: sqrt(binom(2J, k)) / 2^J, built in log space
    k = np.arange(j.dim)
    logamp = 0.5 * (_log_binom(j.two_j, k) - j.two_j * np.log(2.0))
    psi = np.exp(logamp).astype(complex)
    psi /= np.linalg.norm(psi)
    return np.outer(psi, psi.conj())


def _log_binom(n: int, k: np.ndarray) -> np.ndarray:
    from scipy.special import gammaln

    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def _check_dims(op: np.ndarray, rho: np.ndarray):
    if op.shape != rho.shape or op.ndim != 2 or op.shape[0] != op.shape[1]:
        raise DimensionError(f"shape mismatch: operator {op.shape} vs state {rho.shape}")


def expectation(op: np.ndarray, rho: np.ndarray) -> float:
    """Re Tr[op rho] for Hermitian ``op``."""
    _check_dims(op, rho)
    value = np.einsum("ij,ji->", op, rho)
    if abs(value.imag) > 1e-9 * max(1.0, abs(value.real)):
        raise ValueError(f"expectation has imaginary part {value.imag:.3e}; operator not Hermitian?")
    return float(value.real)


def variance(op: np.ndarray, rho: np.ndarray) -> float:
    mean = expectation(op, rho)
    return expectation(op @ op, rho) - mean * mean


def purity(rho: np.ndarray) -> float:
    """Tr[rho^2]."""
    # Tr[rho rho] = sum |rho_ij|^2 for Hermitian rho
    return float(np.vdot(rho, rho).real)


def trace_distance(rho1: np.ndarray, rho2: np.ndarray) -> float:
    """Half the sum of singular values of rho1 - rho2."""
    _check_dims(rho1, rho2)
    diff = rho1 - rho2
    diff = 0.5 * (diff + diff.conj().T)
    return float(0.5 * np.abs(np.linalg.eigvalsh(diff)).sum())


def maximally_mixed(j) -> np.ndarray:
    j = _as_spin(j)
    return np.eye(j.dim, dtype=complex) / j.dim


def check_density_matrix(rho: np.ndarray, *, check_positivity: bool = True,
                         eigen_tol: float = EIGEN_TOL) -> None:
    """Raise if ``rho`` breaks the trace, Hermiticity or positivity invariants."""
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise DimensionError(f"density matrix must be square, got {rho.shape}")
    if not np.all(np.isfinite(rho)):
        raise PositivityViolation("density matrix has non-finite entries")
    tr = np.trace(rho)
    if abs(tr - 1) > TRACE_TOL:
        raise ValueError(f"trace {tr} differs from 1")
    herm = np.max(np.abs(rho - rho.conj().T))
    if herm > HERMITIAN_TOL:
        raise ValueError(f"density matrix not Hermitian (deviation {herm:.2e})")
    if check_positivity:
        lowest = np.linalg.eigvalsh(rho)[0]
        if lowest < -eigen_tol:
            raise PositivityViolation(f"smallest eigenvalue {lowest:.3e} below {-eigen_tol:.1e}")
