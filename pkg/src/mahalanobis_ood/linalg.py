"""Dense SPD linear algebra: ridge-regularised Cholesky and quadratic forms.

No explicit inverse is ever formed. Every quadratic form goes through a
triangular solve against the Cholesky factor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimMismatch, NonSymmetric, NotFactorizable

logger = logging.getLogger(__name__)

DEFAULT_REL_RIDGE = 1e-6
SYMMETRY_TOL = 1e-9
MAX_ESCALATIONS = 8
RIDGE_FLOOR = 1e-12


@dataclass(frozen=True)
class SpdFactor:
    """Lower Cholesky factor ``L`` of ``a + ridge_used * I``."""

    lower: np.ndarray
    ridge_used: float

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def matrix(self) -> np.ndarray:
        """The regularised matrix ``L @ L.T`` that this factor actually represents."""
        return self.lower @ self.lower.T


def _as_square(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimMismatch(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NotFactorizable("matrix has non-finite entries")
    return a


def _try_cholesky(a: np.ndarray) -> np.ndarray | None:
    try:
        low = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return None
    d = np.diag(low)
    if not (np.all(np.isfinite(low)) and np.all(d > 0)):
        return None
    return low


def cholesky_with_ridge(a, rel_ridge: float = DEFAULT_REL_RIDGE) -> SpdFactor:
    """Factor ``a + rho*I`` with ``rho = rel_ridge * trace(a) / dim``.

    If the factorisation fails, ``rho`` is multiplied by 10 up to
    ``MAX_ESCALATIONS`` times. A zero starting ridge is lifted to a floor of
    ``1e-12`` times the mean diagonal (or ``1e-12`` absolute for a zero
    trace) before escalating.

    Raises:
        NonSymmetric: ``a`` deviates from symmetry by more than 1e-9 relative.
        NotFactorizable: no ridge in the escalation ladder made ``a`` PD.
    """
    a = _as_square(a)
    if rel_ridge < 0:
        raise NotFactorizable(f"rel_ridge must be >= 0, got {rel_ridge}")
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > SYMMETRY_TOL * max(scale, np.finfo(float).tiny):
        raise NonSymmetric(f"matrix asymmetry {asym:.3e} exceeds tolerance")
    a = 0.5 * (a + a.T)
    dim = a.shape[0]
    mean_diag = float(np.trace(a)) / dim
    rho = rel_ridge * mean_diag
    floor = RIDGE_FLOOR * (mean_diag if mean_diag > 0 else 1.0)
    eye = np.eye(dim)
    for attempt in range(MAX_ESCALATIONS + 1):
        low = _try_cholesky(a + rho * eye if rho > 0 else a)
        if low is not None:
            if attempt:
                logger.info("cholesky needed %d ridge escalations, rho=%.3e", attempt, rho)
            return SpdFactor(lower=low, ridge_used=float(rho))
        rho = max(rho * 10.0, floor)
    raise NotFactorizable(f"matrix not positive definite even with ridge {rho / 10:.3e}")


def cholesky_fixed(a, ridge: float) -> SpdFactor:
    """Factor ``a + ridge*I`` with exactly the given ridge (used when loading models)."""
    a = _as_square(a)
    a = 0.5 * (a + a.T)
    low = _try_cholesky(a + ridge * np.eye(a.shape[0]) if ridge > 0 else a)
    if low is None:
        raise NotFactorizable(f"matrix not positive definite with ridge {ridge:.3e}")
    return SpdFactor(lower=low, ridge_used=float(ridge))


def _check_len(factor: SpdFactor, v: np.ndarray, name: str) -> None:
    if v.shape[-1] != factor.dim:
        raise DimMismatch(f"{name} has length {v.shape[-1]}, factor dim is {factor.dim}")


def whiten(factor: SpdFactor, v) -> np.ndarray:
    """Return ``L^{-1} v`` for a vector or for each row of a 2-D array."""
    v = np.asarray(v, dtype=np.float64)
    _check_len(factor, v, "vector")
    if v.ndim == 1:
        return solve_triangular(factor.lower, v, lower=True)
    return solve_triangular(factor.lower, v.T, lower=True).T


def mahalanobis_sq(factor: SpdFactor, x, mu) -> float | np.ndarray:
    """Squared Mahalanobis distance ``(x-mu)^T S^{-1} (x-mu)``.

    ``x`` may be a single vector or an ``(n, d)`` batch; ``mu`` broadcasts
    against it.
    """
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    _check_len(factor, x, "x")
    _check_len(factor, mu, "mu")
    z = whiten(factor, x - mu)
    if z.ndim == 1:
        return float(z @ z)
    return np.einsum("ij,ij->i", z, z)


def solve_spd(factor: SpdFactor, b) -> np.ndarray:
    """Solve ``(L L^T) y = b``; ``b`` may hold several right-hand sides as rows."""
    b = np.asarray(b, dtype=np.float64)
    _check_len(factor, b, "b")
    rhs = b if b.ndim == 1 else b.T
    z = solve_triangular(factor.lower, rhs, lower=True)
    y = solve_triangular(factor.lower.T, z, lower=False)
    return y if b.ndim == 1 else y.T
