"""Time grids and reproducible Brownian driver paths.

Every Gaussian draw is addressed by ``(seed, purpose, level, replica,
position)``: the replica's key is derived from the first four and the
position selects a word of the Philox counter stream, which is mapped to
a normal by the inverse CDF. Generation order and worker count therefore
never change a value.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .errors import ConfigurationError

_BASE, _BRIDGE = 0, 1
_WORDS_PER_BLOCK = 4  # Philox4x64 emits four 64-bit words per counter value


@dataclass(frozen=True)
class TimeGrid:
    s: float
    T: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigurationError("n_steps must be positive", "n_steps")
        if not self.T > self.s:
            raise ConfigurationError("T must exceed s", "T")

    @property
    def dt(self) -> float:
        return (self.T - self.s) / self.n_steps

    @property
    def knots(self) -> np.ndarray:
        return self.s + self.dt * np.arange(self.n_steps + 1)

    def knot_of(self, t: float) -> int:
        """Index of the first knot at or after ``t`` (clipped to the grid)."""
        i = int(np.ceil((t - self.s) / self.dt - 1e-9))
        return min(max(i, 0), self.n_steps)

    def halved(self) -> TimeGrid:
        return TimeGrid(self.s, self.T, 2 * self.n_steps)


def _key(seed: int, purpose: int, level: int, replica: int) -> np.ndarray:
    return np.random.SeedSequence([seed, purpose, level, replica]).generate_state(2, np.uint64)


def _words_to_normal(words: np.ndarray) -> np.ndarray:
    u = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


def standard_normals(seed: int, purpose: int, level: int, replica: int, count: int, start: int = 0) -> np.ndarray:
    """Normals at stream positions ``start .. start + count - 1`` of one replica."""
    bitgen = np.random.Philox(key=_key(seed, purpose, level, replica))
    block, offset = divmod(start, _WORDS_PER_BLOCK)
    if block:
        bitgen.advance(block)
    words = bitgen.random_raw(offset + count)[offset:]
    return _words_to_normal(np.asarray(words, dtype=np.uint64))


def _draw_all(seed, purpose, level, n_replicas, count, threads) -> np.ndarray:
    out = np.empty((n_replicas, count))

    def fill(rows):
        for r in rows:
            out[r] = standard_normals(seed, purpose, level, r, count)

    chunks = np.array_split(np.arange(n_replicas), max(1, min(threads, n_replicas)))
    if threads <= 1:
        fill(range(n_replicas))
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, chunks))
    return out


@dataclass(frozen=True)
class BrownianPaths:
    """Brownian knot values ``knots[r, i, k]`` (W at t_i, W_s = 0)."""

    grid: TimeGrid
    knots: np.ndarray
    seed: int
    level: int = 0

    def __post_init__(self):
        self.knots.setflags(write=False)

    @property
    def increments(self) -> np.ndarray:
        """``increments[r, i, k] = W_{t_{i+1}} - W_{t_i}``."""
        return np.diff(self.knots, axis=1)

    @property
    def n_replicas(self) -> int:
        return self.knots.shape[0]

    @property
    def n_drivers(self) -> int:
        return self.knots.shape[2]

    def subset(self, replicas) -> BrownianPaths:
        return BrownianPaths(self.grid, self.knots[np.asarray(replicas)].copy(), self.seed, self.level)


def sample_paths(grid: TimeGrid, n_replicas: int, n_drivers: int, seed: int, threads: int = 1) -> BrownianPaths:
    """Draw independent N(0, dt) increments for every (replica, step, driver)."""
    if n_replicas < 1:
        raise ConfigurationError("need at least one replica", "replicas")
    if n_drivers < 1:
        raise ConfigurationError("need at least one noise driver")
    count = grid.n_steps * n_drivers
    z = _draw_all(seed, _BASE, 0, n_replicas, count, threads)
    inc = z.reshape(n_replicas, grid.n_steps, n_drivers) * np.sqrt(grid.dt)
    knots = np.zeros((n_replicas, grid.n_steps + 1, n_drivers))
    np.cumsum(inc, axis=1, out=knots[:, 1:])
    return BrownianPaths(grid, knots, seed, 0)


def increment_draw(seed: int, replica: int, step: int, driver: int, n_drivers: int) -> float:
    """The standard normal behind base increment (replica, step, driver)."""
    return float(standard_normals(seed, _BASE, 0, replica, 1, start=step * n_drivers + driver)[0])


def refine_halve(paths: BrownianPaths, threads: int = 1) -> BrownianPaths:
    """Insert Brownian-bridge midpoints, halving the step.

    Coarse knots are copied unchanged; each midpoint is the average of its
    neighbours plus an independent N(0, dt/4) draw, so each coarse
    increment splits as dW/2 + xi and dW/2 - xi.
    """
    grid = paths.grid
    R, n, k = paths.n_replicas, grid.n_steps, paths.n_drivers
    level = paths.level + 1
    xi = _draw_all(paths.seed, _BRIDGE, level, R, n * k, threads).reshape(R, n, k) * np.sqrt(grid.dt / 4)
    fine = np.empty((R, 2 * n + 1, k))
    fine[:, 0::2] = paths.knots
    fine[:, 1::2] = 0.5 * (paths.knots[:, :-1] + paths.knots[:, 1:]) + xi
    return BrownianPaths(grid.halved(), fine, paths.seed, level)


def coarsen(paths: BrownianPaths, factor: int) -> BrownianPaths:
    """Keep every ``factor``-th knot (the inverse of repeated refinement)."""
    if paths.grid.n_steps % factor:
        raise ConfigurationError("factor must divide the number of steps")
    grid = TimeGrid(paths.grid.s, paths.grid.T, paths.grid.n_steps // factor)
    return BrownianPaths(grid, paths.knots[:, ::factor].copy(), paths.seed, paths.level)
