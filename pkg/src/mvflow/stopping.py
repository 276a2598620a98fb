"""First-hit detectors for the flow's stopping times and domain estimation.

Hit times are knot indices. In arrays, "not hit on [s, T]" is encoded as
the number of knots K (one past the last knot); the scalar detectors
return ``None`` instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import CapabilityError
from .flow import FlowField

MIN_AXIS_POINTS = 7  # third differences need a 7-point central stencil


def _first(mask: np.ndarray, start: int = 0) -> int | None:
    idx = np.flatnonzero(mask[start:])
    return int(idx[0]) + start if idx.size else None


def inverse_jacobian_sup(field: FlowField) -> np.ndarray:
    """Per knot, the max over grid points of |J^{-1}|_F (inf if singular)."""
    return linalg.inverse_norm(field.J).max(axis=1)


def detect_theta(field: FlowField, m: float) -> int | None:
    """First knot where sup over the grid of |J^{-1}|_F exceeds ``m``."""
    return _first(inverse_jacobian_sup(field) > m)


def _derivative_norms(phi: np.ndarray, points: tuple[int, ...], spacing: np.ndarray):
    """Frobenius norms of the 2nd and 3rd spatial differences of one map.

    ``phi`` has shape (G, d). Returns two (G,) arrays with NaN outside the
    interior where the stencils are central.
    """
    d = phi.shape[-1]
    axes = [j for j, n in enumerate(points) if n > 1]
    f = phi.reshape(points + (d,))
    first = [np.gradient(f, spacing[j], axis=j) for j in axes]
    second = [np.gradient(g, spacing[j], axis=j) for g in first for j in axes]
    third = [np.gradient(g, spacing[j], axis=j) for g in second for j in axes]
    n2 = np.sqrt(sum(np.sum(g * g, axis=-1) for g in second))
    n3 = np.sqrt(sum(np.sum(g * g, axis=-1) for g in third))
    interior = np.zeros(points, dtype=bool)
    sl = tuple(slice(3, n - 3) if n > 1 else slice(None) for n in points)
    interior[sl] = True
    n2 = np.where(interior, n2, np.nan).reshape(-1)
    n3 = np.where(interior, n3, np.nan).reshape(-1)
    return n2, n3


def tau_monitor(field: FlowField) -> np.ndarray:
    """Per knot: sup over the grid of max(|Phi|, |dPhi|, |D^2 Phi|, |D^3 Phi|)."""
    grid = field.grid
    short = [n for n in grid.points if n > 1 and n < MIN_AXIS_POINTS]
    if short or all(n == 1 for n in grid.points):
        raise CapabilityError(
            f"third differences need at least {MIN_AXIS_POINTS} points per axis, grid has {grid.points}"
        )
    out = np.empty(field.n_knots)
    for i in range(field.n_knots):
        n2, n3 = _derivative_norms(field.X[i], grid.points, grid.spacing)
        out[i] = max(
            float(np.max(np.linalg.norm(field.X[i], axis=-1))),
            float(np.max(linalg.frobenius(field.J[i]))),
            float(np.nanmax(n2)),
            float(np.nanmax(n3)),
        )
    return out


def detect_tau_n(field: FlowField, n: float, monitor: np.ndarray | None = None) -> int | None:
    """First knot where the map/derivative monitor exceeds ``n``."""
    mon = tau_monitor(field) if monitor is None else monitor
    return _first(mon > n)


def detect_rho(jacobians: np.ndarray, exploded: np.ndarray | None = None) -> int | None:
    """First knot after s where J is numerically singular or V exploded.

    ``jacobians`` is a (K, d, d) series for one initial point. Only the
    first failure is reported, even if invertibility later resumes.
    """
    bad = ~linalg.invertible(np.asarray(jacobians))
    if exploded is not None:
        bad = bad | np.asarray(exploded, dtype=bool)
    return _first(bad, start=1)


@dataclass
class StoppingRecord:
    """Stopping times on one physical path, as knot indices.

    ``theta`` and ``tau_n`` are global (sup over the grid); ``rho``,
    ``tau_bar``, ``tau_bar_prime`` and ``tau`` are per grid point, with
    ``n_knots`` meaning "not hit".
    """

    n_knots: int
    theta: dict[float, int | None]
    tau_n: dict[float, int | None]
    rho: np.ndarray
    tau_bar_m: dict[float, np.ndarray]
    tau_bar: np.ndarray
    tau_bar_prime: np.ndarray
    tau: np.ndarray

    def rows(self, nodes: np.ndarray) -> list[dict]:
        K = self.n_knots

        def fmt(v):
            return "-" if v is None or v >= K else int(v)

        rows = []
        for g, x in enumerate(nodes):
            row = {f"x{j}": float(c) for j, c in enumerate(x)}
            row["rho"] = fmt(self.rho[g])
            for m, arr in self.tau_bar_m.items():
                row[f"tau_bar_m{m:g}"] = fmt(arr[g])
            row["tau_bar"] = fmt(self.tau_bar[g])
            row["tau_bar_prime"] = fmt(self.tau_bar_prime[g])
            row["tau"] = fmt(self.tau[g])
            rows.append(row)
        return rows


def rho_per_point(field: FlowField) -> np.ndarray:
    K = field.n_knots
    out = np.full(field.J.shape[1], K)
    for g in range(field.J.shape[1]):
        hit = detect_rho(field.J[:, g], field.v_exploded[:, g])
        if hit is not None:
            out[g] = hit
    return out


def estimate_domain(record: StoppingRecord, field: FlowField, knot: int):
    """Mask of {x : tau(s, x) > t} on the grid and the image of those points.

    Returns ``(mask, images)``; ``images`` are Phi_t(x) for masked x.
    """
    mask = record.tau > knot
    return mask, field.X[knot][mask]


def mask_raster(mask: np.ndarray, points: tuple[int, ...]) -> str:
    """0/1 text raster; rows run over the first axis."""
    grid = mask.reshape(points) if len(points) > 1 else mask.reshape(1, -1)
    return "\n".join("".join("1" if v else "0" for v in row.reshape(-1)) for row in grid) + "\n"
