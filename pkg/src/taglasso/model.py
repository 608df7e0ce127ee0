"""Covariance and precision matrix primitives.

Matrices are plain ``numpy`` arrays; the helpers here validate symmetry
and positive definiteness and evaluate the Gaussian negative
log-likelihood used for fitting and cross-validation.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

PD_TOL = 1e-10
SYM_TOL = 1e-10


class NotPositiveDefiniteError(ValueError):
    """Raised when a matrix that must be positive definite is not."""


def as_symmetric(m, tol: float = SYM_TOL) -> np.ndarray:
    """Validate ``m`` as a square symmetric finite matrix.

    The upper triangle is authoritative: the returned array is the
    upper triangle mirrored, so asymmetry below ``tol`` is silently
    removed and anything larger raises.
    """
    m = np.array(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
        raise ValueError(f"expected a non-empty square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(m))))
    asym = float(np.max(np.abs(m - m.T)))
    if asym > tol * scale:
        raise ValueError(f"matrix is not symmetric (max |m - m.T| = {asym:.3g})")
    return np.triu(m) + np.triu(m, 1).T


@dataclass(frozen=True)
class SampleCovariance:
    """Sample covariance ``matrix`` estimated from ``n`` observations."""

    matrix: np.ndarray
    n: int
    centered: bool = True

    def __post_init__(self):
        m = as_symmetric(self.matrix)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        if self.n < 1:
            raise ValueError("sample count must be positive")
        w = np.linalg.eigvalsh(m)
        if w[0] < -1e-10 * max(1.0, abs(w[-1])):
            raise ValueError(
                f"covariance is not positive semidefinite (min eigenvalue {w[0]:.3g})")

    @property
    def p(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class PrecisionEstimate:
    """A positive definite precision matrix with fit diagnostics."""

    omega: np.ndarray
    objective_value: float
    converged_residual: float


def sample_covariance(data) -> SampleCovariance:
    """Maximum likelihood covariance ``Xc.T @ Xc / n`` of column-centred data."""
    x = np.asarray(data, dtype=float)
    if x.ndim != 2:
        raise ValueError("data must be a 2-d array (n samples x p variables)")
    n, p = x.shape
    if n < 2:
        raise ValueError(f"need at least 2 rows to estimate a covariance, got {n}")
    if p < 2:
        raise ValueError(f"need at least 2 columns, got {p}")
    if not np.all(np.isfinite(x)):
        raise ValueError("data contains missing or non-finite entries")
    xc = x - x.mean(axis=0)
    s = xc.T @ xc / n
    const = np.flatnonzero(np.diag(s) == 0)
    if const.size:
        warnings.warn(f"columns {const.tolist()} are constant (zero variance)",
                      RuntimeWarning, stacklevel=2)
    return SampleCovariance(s, n=n, centered=True)


def is_positive_definite(m, tol: float = PD_TOL) -> bool:
    """True iff the smallest eigenvalue exceeds ``tol`` times the largest.

    ``tol`` is relative to the largest absolute eigenvalue (absolute when
    that is below one).
    """
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    w = np.linalg.eigvalsh((m + m.T) / 2)
    return bool(w[0] > tol * max(1.0, float(np.max(np.abs(w)))))


def _logdet_pd(omega: np.ndarray) -> float:
    try:
        chol = np.linalg.cholesky(omega)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("matrix is not positive definite") from None
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def neg_log_likelihood(omega, s) -> float:
    """``-logdet(omega) + tr(s @ omega)``.

    ``s`` may be a :class:`SampleCovariance` or a plain matrix.
    """
    omega = np.asarray(omega, dtype=float)
    s = s.matrix if isinstance(s, SampleCovariance) else np.asarray(s, dtype=float)
    if omega.shape != s.shape:
        raise ValueError(f"shape mismatch: omega {omega.shape} vs s {s.shape}")
    omega = (omega + omega.T) / 2
    return -_logdet_pd(omega) + float(np.sum(s * omega))
