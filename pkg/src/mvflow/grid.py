"""Regular spatial grids of initial points and multilinear interpolation."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class SpatialGrid:
    """Tensor grid on the box [lower, upper]; nodes are in C (row-major) order."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    points: tuple[int, ...]

    def __post_init__(self):
        lo, hi, n = (tuple(map(float, self.lower)), tuple(map(float, self.upper)), tuple(map(int, self.points)))
        if not (len(lo) == len(hi) == len(n)) or not lo:
            raise ConfigurationError("lower, upper and points need one entry per dimension", "grid")
        for i, (a, b, m) in enumerate(zip(lo, hi, n)):
            if m < 1:
                raise ConfigurationError("need at least one point per axis", f"grid.points[{i}]")
            if m > 1 and not b > a:
                raise ConfigurationError("box is degenerate", f"grid.upper[{i}]")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "points", n)

    @classmethod
    def single(cls, x) -> SpatialGrid:
        x = tuple(np.atleast_1d(np.asarray(x, dtype=float)).tolist())
        return cls(x, x, (1,) * len(x))

    @property
    def dim(self) -> int:
        return len(self.points)

    @property
    def size(self) -> int:
        return int(np.prod(self.points))

    @property
    def axes(self) -> list[np.ndarray]:
        return [np.linspace(a, b, m) if m > 1 else np.array([a]) for a, b, m in zip(self.lower, self.upper, self.points)]

    @property
    def spacing(self) -> np.ndarray:
        return np.array([(b - a) / (m - 1) if m > 1 else 0.0 for a, b, m in zip(self.lower, self.upper, self.points)])

    @property
    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)

    def contains(self, y: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        lo, hi = np.array(self.lower), np.array(self.upper)
        span = np.maximum(hi - lo, 1.0)
        return np.all((y >= lo - tol * span) & (y <= hi + tol * span), axis=-1)

    def stencil(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Corner node indices and multilinear weights for points ``y``.

        Returns ``(index, weight)`` of shapes (P, 2**d). Points outside the
        box are clipped to it; callers check :meth:`contains` first.
        """
        y = np.atleast_2d(np.asarray(y, dtype=float))
        per_axis = []
        for j, (ax, m) in enumerate(zip(self.axes, self.points)):
            if m == 1:
                per_axis.append((np.zeros(len(y), dtype=np.int64), np.zeros(len(y))))
                continue
            h = (ax[-1] - ax[0]) / (m - 1)
            u = np.clip((y[:, j] - ax[0]) / h, 0.0, m - 1)
            # snap to nodes so nodal evaluation is exact
            r = np.round(u)
            u = np.where(np.abs(u - r) < 1e-10, r, u)
            i0 = np.minimum(np.floor(u).astype(np.int64), m - 2)
            per_axis.append((i0, u - i0))
        strides = np.cumprod((1,) + self.points[::-1][:-1])[::-1]
        idx, wts = [], []
        for corner in itertools.product((0, 1), repeat=self.dim):
            flat = np.zeros(len(y), dtype=np.int64)
            w = np.ones(len(y))
            for j, c in enumerate(corner):
                i0, frac = per_axis[j]
                if self.points[j] == 1:
                    if c:
                        w = w * 0.0
                    flat += i0 * strides[j]
                    continue
                flat += (i0 + c) * strides[j]
                w = w * (frac if c else 1.0 - frac)
            idx.append(flat)
            wts.append(w)
        return np.stack(idx, axis=1), np.stack(wts, axis=1)

    def interpolate(self, values: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Multilinear interpolation of node ``values`` (G, ...) at ``y`` (P, d)."""
        index, weight = self.stencil(y)
        gathered = values[index]  # (P, 2**d, ...)
        w = weight.reshape(weight.shape + (1,) * (gathered.ndim - 2))
        return np.sum(gathered * w, axis=1)
