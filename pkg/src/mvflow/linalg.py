"""Small batched matrix helpers for d <= 3 Jacobians."""

from __future__ import annotations

import numpy as np

# scale-relative invertibility threshold on det(J)
SINGULAR_RTOL = 1e-12


def det(J: np.ndarray) -> np.ndarray:
    d = J.shape[-1]
    if d == 1:
        return J[..., 0, 0].copy()
    if d == 2:
        return J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    return np.linalg.det(J)


def frobenius(J: np.ndarray) -> np.ndarray:
    if J.shape[-1] == 1:
        return np.abs(J[..., 0, 0])
    return np.sqrt(np.sum(J * J, axis=(-2, -1)))


def invertible(J: np.ndarray) -> np.ndarray:
    """det(J) > 1e-12 |J|_F^d, with the sign kept.

    Jacobians start at the identity, so a non-positive determinant means
    the path crossed a singular matrix at or before this knot.
    """
    d = J.shape[-1]
    if d == 1:
        j = J[..., 0, 0]
        with np.errstate(invalid="ignore"):
            return (j > SINGULAR_RTOL * np.abs(j)) & np.isfinite(j)
    with np.errstate(invalid="ignore"):
        ok = det(J) > SINGULAR_RTOL * frobenius(J) ** d
    return ok & np.all(np.isfinite(J), axis=(-2, -1))


def inverse(J: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(inv, ok)``; ``inv`` is NaN where ``ok`` is False."""
    d = J.shape[-1]
    ok = invertible(J)
    out = np.full(J.shape, np.nan)
    if d == 1:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(ok[..., None, None], 1.0 / J, np.nan)
        return out, ok
    if ok.any():
        out[ok] = np.linalg.inv(J[ok])
    return out, ok


def inverse_norm(J: np.ndarray) -> np.ndarray:
    """Frobenius norm of J^{-1}; +inf where J is numerically singular."""
    if J.shape[-1] == 1:
        j = J[..., 0, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(invertible(J), 1.0 / np.abs(j), np.inf)
    inv, ok = inverse(J)
    norm = np.full(ok.shape, np.inf)
    norm[ok] = frobenius(inv[ok])
    return norm
