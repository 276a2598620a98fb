"""The inverse flow Psi_t = Phi_t^{-1} on the physical path.

Psi is integrated forward on the stored flow field. Writing
G_k(t, y) = -J_t(y)^{-1} V_k(Phi_t(y), m_t(y)) with V_0 the Stratonovich
drift, Psi solves dPsi = G_0 dt + sum_k G_k o dW^k, and its Itô form is

    dPsi = [G_0 + 1/2 sum_k (dy G_k G_k + H_k)] dt + sum_k G_k dW^k,
    H_k  = J^{-1} E_k J^{-1} V_k,

where E_k = dm v_k(Phi, m) N is the mean-field part of the Jacobian
bracket. H_k is the covariation of the random field G_k with the driver;
it vanishes when the coefficients do not depend on the law. Fields
between grid nodes come from multilinear interpolation, and dy G_k is a
central difference of the interpolated composite with half the grid
spacing as step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .coefficients import CoefficientSet
from .errors import CapabilityError, OutOfDomainError
from .flow import FlowField
from .stopping import detect_theta

DEFAULT_M_LADDER = (2.0, 5.0, 10.0, 50.0)

# failure reasons, in the order they are checked
OK, OUTSIDE, SINGULAR, NONFINITE, THRESHOLD, THETA = range(6)
REASONS = ("ok", "outside", "singular", "nonfinite", "threshold", "theta")


@dataclass
class FlowSample:
    """Interpolated physical-path fields at points y (knot fixed)."""

    phi: np.ndarray  # (P, d)
    jac: np.ndarray  # (P, d, d)
    law_stats: np.ndarray | None  # (P, n)
    jac_stats: np.ndarray | None  # (P, n, d)
    inside: np.ndarray  # (P,)


def _sample(field: FlowField, knot: int, y: np.ndarray) -> FlowSample:
    grid = field.grid
    y = np.atleast_2d(y)
    index, weight = grid.stencil(y)

    def interp(values):
        gathered = values[index]
        w = weight.reshape(weight.shape + (1,) * (gathered.ndim - 2))
        return np.sum(gathered * w, axis=1)

    return FlowSample(
        phi=interp(field.X[knot]),
        jac=interp(field.J[knot]),
        law_stats=None if field.law_stats is None else interp(field.law_stats[knot]),
        jac_stats=None if field.jac_stats is None else interp(field.jac_stats[knot]),
        inside=grid.contains(y),
    )


def interpolate_flow(field: FlowField, knot: int, y) -> FlowSample:
    """Phi_t, dx Phi_t and the law moments at off-grid points ``y``."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    sample = _sample(field, knot, y)
    if not sample.inside.all():
        bad = y[~sample.inside][0]
        raise OutOfDomainError(f"point {bad.tolist()} lies outside the grid box")
    return sample


@dataclass
class InverseTrajectory:
    """Psi_t(x) for a batch of starting points.

    ``psi`` is (K, P, d) and ``dpsi`` = J(Psi)^{-1} is (K, P, d, d); both
    are frozen (psi) or NaN (dpsi) from the largest-threshold failure on.
    ``fail[m]`` is the per-point failure knot tau_bar_m (K when never).
    """

    x: np.ndarray
    psi: np.ndarray
    dpsi: np.ndarray
    fail: dict[float, np.ndarray]
    reason: np.ndarray
    theta: dict[float, int | None]

    @property
    def n_knots(self) -> int:
        return self.psi.shape[0]

    @property
    def m_max(self) -> float:
        return max(self.fail)

    def tau_bar(self, m: float | None = None) -> np.ndarray:
        return self.fail[self.m_max if m is None else m]


def _outer_eval(fun, x: np.ndarray, m: np.ndarray) -> np.ndarray:
    return fun(x[:, None, :], m[:, None, :])[:, 0]


def _composite(field: FlowField, cset: CoefficientSet, knot: int, y: np.ndarray):
    """G_k(y) for k = 0..d' plus the pieces the Itô drift needs."""
    spec = cset.moment
    s = _sample(field, knot, y)
    jinv, ok = linalg.inverse(s.jac)
    x, m, N = s.phi, s.law_stats, s.jac_stats
    vals, vxs = [], []
    for outer in spec.diffusion:
        vals.append(_outer_eval(outer.v, x, m))
        vxs.append(_outer_eval(outer.v_x, x, m))
    v0 = _outer_eval(spec.drift.v, x, m)
    for v, vx in zip(vals, vxs):
        v0 = v0 - 0.5 * np.einsum("pij,pj->pi", vx, v)
    G = [-np.einsum("pij,pj->pi", jinv, v) for v in (v0, *vals)]
    H = []
    for coeff, outer, v in zip(cset.diffusion, spec.diffusion, vals):
        if coeff.measure_free:
            H.append(np.zeros_like(v))
            continue
        E = np.einsum("pia,pal->pil", _outer_eval(outer.v_m, x, m), N)
        H.append(np.einsum("pij,pjk,pkl,pl->pi", jinv, E, jinv, v))
    return np.stack(G), H, jinv, ok, s.inside


def integrate_psi(
    field: FlowField,
    cset: CoefficientSet,
    x: np.ndarray | None = None,
    m_ladder=DEFAULT_M_LADDER,
) -> InverseTrajectory:
    """Integrate Psi from each point of ``x`` (default: the grid nodes).

    One integration serves the whole ladder: for each m the failure knot
    is the first knot after s where Psi leaves the box, J(Psi) is
    singular, a value is non-finite or |J(Psi)^{-1}|_F > m, capped at the
    global explosion time theta_m.
    """
    if cset.moment is None:
        raise CapabilityError("the inverse flow needs a moment-form coefficient set")
    if field.law_stats is None:
        raise CapabilityError("the flow field carries no law moments")
    grid = field.grid
    if any(n < 2 for n in grid.points):
        raise CapabilityError("the inverse flow needs at least two grid points per axis")
    ladder = sorted(float(m) for m in m_ladder)
    if not ladder or ladder[0] <= 0:
        raise CapabilityError("m_ladder needs positive thresholds")
    x = grid.nodes if x is None else np.atleast_2d(np.asarray(x, dtype=float))
    K, d = field.n_knots, grid.dim
    P = len(x)
    dt = field.dt
    h = 0.5 * grid.spacing
    lo, hi = np.array(grid.lower), np.array(grid.upper)

    theta = {m: detect_theta(field, m) for m in ladder}
    fail = {m: np.full(P, K) for m in ladder}
    reason = np.zeros(P, dtype=np.int64)
    psi = np.empty((K, P, d))
    dpsi = np.full((K, P, d, d), np.nan)
    psi[0] = x
    alive = np.ones(P, dtype=bool)

    for i in range(K):
        y = psi[i]
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            psi[i + 1:] = psi[i]
            break
        G, H, jinv, ok, inside = _composite(field, cset, i, y[idx])
        norm = np.where(ok, linalg.frobenius(np.nan_to_num(jinv)), np.inf)
        finite = np.all(np.isfinite(y[idx]), axis=-1)
        hard = np.full(idx.size, OK)
        if i > 0:
            hard[~ok] = SINGULAR
            hard[~inside] = OUTSIDE
            hard[~finite] = NONFINITE
        for m in ladder:
            open_ = fail[m][idx] == K
            hit = open_ & ((hard != OK) | ((norm > m) & (i > 0)))
            if theta[m] is not None and i >= theta[m]:
                hit = open_
            fail[m][idx[hit]] = i
        done = fail[ladder[-1]][idx] <= i
        if done.any():
            r = np.where(hard != OK, hard, np.where(norm > ladder[-1], THRESHOLD, THETA))
            reason[idx[done]] = r[done]
        dpsi[i, idx[~done]] = jinv[~done]
        alive[idx[done]] = False
        if i == K - 1:
            break
        psi[i + 1] = psi[i]
        live = ~done
        if not live.any():
            continue
        sub = idx[live]
        ys = y[sub]
        drift = G[0][live].copy()
        for k in range(cset.dim_noise):
            dG = np.zeros((sub.size, d, d))
            for j in range(d):
                up = ys.copy()
                dn = ys.copy()
                up[:, j] = np.minimum(ys[:, j] + h[j], hi[j])
                dn[:, j] = np.maximum(ys[:, j] - h[j], lo[j])
                Gu = _composite(field, cset, i, up)[0][k + 1]
                Gd = _composite(field, cset, i, dn)[0][k + 1]
                dG[:, :, j] = (Gu - Gd) / (up[:, j] - dn[:, j])[:, None]
            Gk = G[k + 1][live]
            drift += 0.5 * (np.einsum("pij,pj->pi", dG, Gk) + H[k][live])
        step = ys + drift * dt
        for k in range(cset.dim_noise):
            step = step + G[k + 1][live] * field.dW[i, k]
        psi[i + 1, sub] = step
    return InverseTrajectory(x=x, psi=psi, dpsi=dpsi, fail=fail, reason=reason, theta=theta)


@dataclass
class TwoSidedReport:
    """Composition residuals on both sides, per grid point.

    ``left`` is sup over knots before tau_bar of |Phi_t(Psi_t(x)) - x|;
    ``right`` is sup over knots before tau_bar_prime of
    |Psi_t(Phi_t(x)) - x|. Stopping times are knot indices (K = never).
    """

    left: np.ndarray
    right: np.ndarray
    tau_bar: np.ndarray
    tau_bar_prime: np.ndarray
    tau: np.ndarray
    m: float


def verify_two_sided(field: FlowField, inv: InverseTrajectory, m: float | None = None) -> TwoSidedReport:
    """Check Phi o Psi = id and Psi o Phi = id on the grid.

    ``inv`` must have been integrated from the grid nodes. tau_bar_prime
    fires at the first knot after s where Phi_t(x) leaves the box, lands
    in a cell with a corner whose Psi has already failed, or where the
    interpolated |d Psi| exceeds m.
    """
    grid = field.grid
    nodes = grid.nodes
    if inv.x.shape != nodes.shape or not np.allclose(inv.x, nodes):
        raise CapabilityError("two-sided verification needs Psi started from every grid node")
    m = inv.m_max if m is None else float(m)
    tau_bar = inv.fail[m]
    K, G = field.n_knots, len(nodes)
    left = np.zeros(G)
    right = np.zeros(G)
    tau_bar_prime = np.full(G, K)
    for i in range(K):
        live = tau_bar > i
        if live.any():
            s = _sample(field, i, inv.psi[i, live])
            res = np.linalg.norm(s.phi - nodes[live], axis=-1)
            left[live] = np.maximum(left[live], res)
        open_ = tau_bar_prime == K
        if not open_.any():
            continue
        y = field.X[i, open_]
        index, weight = grid.stencil(y)
        inside = grid.contains(y)
        corners_ok = np.all((tau_bar[index] > i) | (weight == 0.0), axis=1)
        w3 = weight[:, :, None, None]
        dpsi = np.sum(np.where(w3 == 0.0, 0.0, np.nan_to_num(inv.dpsi[i][index], nan=np.inf)) * w3, axis=1)
        with np.errstate(invalid="ignore"):
            dnorm = linalg.frobenius(dpsi)
        good = inside & corners_ok & np.isfinite(dnorm) & (dnorm <= m)
        if i == 0:
            good[:] = True
        which = np.flatnonzero(open_)
        tau_bar_prime[which[~good]] = i
        ok = which[good]
        if ok.size:
            psi_at = np.sum(inv.psi[i][index[good]] * weight[good][:, :, None], axis=1)
            res = np.linalg.norm(psi_at - nodes[ok], axis=-1)
            right[ok] = np.maximum(right[ok], res)
    return TwoSidedReport(left, right, tau_bar, tau_bar_prime, np.minimum(tau_bar, tau_bar_prime), m)
