"""Empirical measures on R^d and exact Wasserstein-2 distances."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import CapabilityError, ConfigurationError, MeasureError

# assignment cost guard for w2_exact_small
MAX_EXACT_ATOMS = 12


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted atoms ``atoms[i]`` in R^d with weights summing to one.

    Weights default to uniform. Instances are treated as immutable; the
    arrays are made read-only on construction.
    """

    atoms: np.ndarray
    weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        if atoms.ndim != 2 or atoms.shape[0] == 0:
            raise ConfigurationError(f"atoms must have shape (N, d) with N >= 1, got {atoms.shape}")
        if not np.all(np.isfinite(atoms)):
            raise MeasureError("atoms must be finite (second moment must exist)")
        n = atoms.shape[0]
        if self.weights is None:
            weights = np.full(n, 1.0 / n)
        else:
            weights = np.asarray(self.weights, dtype=float).reshape(-1)
            if weights.shape != (n,):
                raise ConfigurationError(f"expected {n} weights, got {weights.shape}")
            if np.any(weights < 0) or not np.all(np.isfinite(weights)):
                raise MeasureError("weights must be finite and nonnegative")
            if abs(weights.sum() - 1.0) > 1e-12:
                raise MeasureError(f"weights sum to {weights.sum()!r}, not 1")
        atoms.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def dirac(cls, point) -> EmpiricalMeasure:
        return cls(np.atleast_1d(np.asarray(point, dtype=float))[None, :])

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def mean(self) -> np.ndarray:
        return self.weights @ self.atoms

    def second_moment(self) -> float:
        return float(self.weights @ np.sum(self.atoms**2, axis=1))

    def rows(self) -> list[list[float]]:
        """One row per atom: weight followed by coordinates."""
        return [[float(w), *map(float, a)] for w, a in zip(self.weights, self.atoms)]


def moments(mu: EmpiricalMeasure, stats: Sequence[Callable[[np.ndarray], np.ndarray]]) -> np.ndarray:
    """Return ``m_j = sum_i w_i h_j(z_i)`` for each statistic ``h_j``.

    Each ``h_j`` maps an ``(N, d)`` array of atoms to ``N`` values. The
    summation runs in atom order so the result is reproducible.
    """
    out = np.empty(len(stats))
    for j, h in enumerate(stats):
        values = np.asarray(h(mu.atoms), dtype=float).reshape(-1)
        if values.shape[0] != mu.size:
            raise ConfigurationError(f"statistic {j} returned {values.shape[0]} values for {mu.size} atoms")
        bad = ~np.isfinite(values)
        if bad.any():
            i = int(np.argmax(bad))
            raise MeasureError(f"statistic {j} is non-finite at atom {i} ({mu.atoms[i].tolist()})")
        total = 0.0
        for w, v in zip(mu.weights, values):
            total += w * v
        out[j] = total
    return out


def w2_1d(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Exact W2 between one-dimensional empirical measures.

    Uses the monotone (quantile) coupling. For equal-size uniform inputs
    this is the sorted pairing ``sqrt(mean((x_(i) - y_(i))**2))``.
    """
    if mu.dim != 1 or nu.dim != 1:
        raise CapabilityError("w2_1d needs one-dimensional measures; use w2_exact_small for d > 1")
    x, y = mu.atoms[:, 0], nu.atoms[:, 0]
    if mu.size == nu.size and mu.is_uniform and nu.is_uniform:
        diff = np.sort(x) - np.sort(y)
        return float(np.sqrt(np.mean(diff * diff)))
    ix, iy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    xs, ys = x[ix], y[iy]
    cx, cy = np.cumsum(mu.weights[ix]), np.cumsum(nu.weights[iy])
    cx[-1] = cy[-1] = 1.0
    levels = np.union1d(cx, cy)
    lo = np.concatenate(([0.0], levels[:-1]))
    mass = levels - lo
    keep = mass > 0
    # quantile functions are left-continuous step functions; sample each interval's right end
    qx = xs[np.minimum(np.searchsorted(cx, levels[keep], side="left"), xs.size - 1)]
    qy = ys[np.minimum(np.searchsorted(cy, levels[keep], side="left"), ys.size - 1)]
    return float(np.sqrt(np.sum(mass[keep] * (qx - qy) ** 2)))


def w2_exact_small(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Exact W2 in any dimension for equal-size uniform measures (N <= 12).

    Solves the optimal assignment on squared Euclidean costs.
    """
    if mu.size != nu.size:
        raise CapabilityError("w2_exact_small needs equal atom counts")
    if mu.size > MAX_EXACT_ATOMS:
        raise CapabilityError(f"w2_exact_small supports at most {MAX_EXACT_ATOMS} atoms, got {mu.size}")
    if not (mu.is_uniform and nu.is_uniform):
        raise CapabilityError("w2_exact_small needs uniform weights")
    if mu.dim != nu.dim:
        raise ConfigurationError("measures live in different dimensions")
    diff = mu.atoms[:, None, :] - nu.atoms[None, :, :]
    cost = np.sum(diff * diff, axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].sum() / mu.size))


def paired_w2_bound(x: np.ndarray, y: np.ndarray) -> float:
    """Upper bound on W2 from the index coupling ``x[i] <-> y[i]``."""
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    return float(np.sqrt(np.mean(np.sum((x - y) ** 2, axis=1))))
