"""Small batched linear-algebra helpers shared by the filters and the losses."""
from __future__ import annotations

import numpy as np


class NumericalError(ArithmeticError):
    """A covariance lost positive definiteness or a solve became singular."""


def mT(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + mT(a))


def cholesky(a: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor of (a stack of) SPD matrices, raising NumericalError."""
    try:
        L = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise NumericalError(f"{what} is not positive definite") from None
    if not np.all(np.isfinite(L)):
        raise NumericalError(f"{what} has non-finite entries")
    return L


def tri_solve(L: np.ndarray, b: np.ndarray, trans: bool = False) -> np.ndarray:
    """Solve ``L u = b`` (or ``L^T u = b``) for lower-triangular ``L``, batched."""
    if L.shape[-1] == 1:
        return b / L[..., :1, :1] if b.ndim == L.ndim else b / L[..., 0, :]
    A = mT(L) if trans else L
    if b.ndim == L.ndim - 1:
        return np.linalg.solve(A, b[..., None])[..., 0]
    return np.linalg.solve(A, b)


def chol_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``(L L^T) u = b`` given the lower Cholesky factor ``L``."""
    return tri_solve(L, tri_solve(L, b), trans=True)
