"""Measure-dependent coefficient families V_k(x, mu) and their derivatives.

Batched evaluator shapes used throughout the package::

    x      (B, P, d)   evaluation points, one block per law
    atoms  (B, M, d)   the law of block b is the uniform measure on atoms[b]
    value  -> (B, P, d)
    dx     -> (B, P, d, d)        [..., i, j] = d_{x_j} V^i
    dmu    (x, atoms, v: (B, Q, d)) -> (B, P, Q, d, d)
                                  [..., i, l] = (d_mu V^i)(x, mu, v)_l

Index 0 of a coefficient set is the drift, indices 1..d' the diffusion
vector fields. Matrix norms are Frobenius norms.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, ProbeError
from .measure import EmpiricalMeasure, w2_1d, w2_exact_small

FD_STEP = 1e-5


def replica_mean(a: np.ndarray, axis: int = 1) -> np.ndarray:
    """Mean over ``axis`` with a summation order fixed by that axis alone.

    The reduced axis is moved last and made contiguous, so each output
    entry is summed identically whatever the size of the other axes.
    """
    moved = np.ascontiguousarray(np.moveaxis(a, axis, -1))
    return np.add.reduce(moved, axis=-1) / moved.shape[-1]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] == 1 and a.shape[-2] == 1 and b.shape[-2] == 1:
        return a * b
    return a @ b


@dataclass(frozen=True)
class Outer:
    """Outer map v(x, m) of a moment-form coefficient, with derivatives.

    ``v_xx`` ([..., i, j, l] = d_j d_l v^i) and ``v_xm`` ([..., i, j, a] =
    d_{x_j} d_{m_a} v^i) are optional; they are only needed when the
    coefficient enters a Stratonovich correction.
    """

    v: Callable[[np.ndarray, np.ndarray], np.ndarray]
    v_x: Callable[[np.ndarray, np.ndarray], np.ndarray]
    v_m: Callable[[np.ndarray, np.ndarray], np.ndarray]
    v_xx: Callable | None = None
    v_xm: Callable | None = None


@dataclass(frozen=True)
class MomentFormSpec:
    """Coefficients depending on the law only through ``m = E[h(Z)]``.

    ``stats`` maps (..., d) to (..., n); ``stats_grad`` maps (..., d) to
    (..., n, d). ``drift`` and ``diffusion`` are outer maps v(x, m).
    """

    dim_state: int
    n_stats: int
    stats: Callable[[np.ndarray], np.ndarray]
    stats_grad: Callable[[np.ndarray], np.ndarray]
    drift: Outer
    diffusion: tuple[Outer, ...]

    @property
    def dim_noise(self) -> int:
        return len(self.diffusion)

    @property
    def outers(self) -> tuple[Outer, ...]:
        return (self.drift, *self.diffusion)

    def law_stats(self, atoms: np.ndarray) -> np.ndarray:
        """m[b] = mean over atoms[b] of h; shape (B, n)."""
        return replica_mean(self.stats(atoms), axis=1)

    def jacobian_stats(self, atoms: np.ndarray, jac: np.ndarray) -> np.ndarray:
        """N[b] = mean_j dh(atoms[b, j]) @ jac[b, j]; shape (B, n, d)."""
        return replica_mean(matmul(self.stats_grad(atoms), jac), axis=1)


@dataclass(frozen=True)
class Coefficient:
    """One vector field V(x, mu) with its spatial and Lions derivatives."""

    value: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dx: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dmu: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    dxx: Callable | None = None
    dx_dmu: Callable | None = None  # [..., i, l, j] = d_{x_j} (d_mu V^i)_l
    measure_free: bool = False

    def mean_field(self, x: np.ndarray, atoms: np.ndarray, jac: np.ndarray, chunk: int = 256) -> np.ndarray:
        """(1/M) sum_j dmu(x_p, law, atoms_j) @ jac_j, shape (B, P, d, d)."""
        B, P, d = x.shape
        if self.measure_free:
            return np.zeros((B, P, d, d))
        out = np.empty((B, P, d, d))
        for lo in range(0, P, chunk):
            xs = x[:, lo:lo + chunk]
            dm = self.dmu(xs, atoms, atoms)  # (B, p, M, d, d)
            out[:, lo:lo + chunk] = replica_mean(matmul(dm, jac[:, None]), axis=2)
        return out

    def at(self, x, mu: EmpiricalMeasure) -> np.ndarray:
        """Evaluate at a single point against a single uniform measure."""
        xb, ab = _single(x, mu)
        return self.value(xb, ab)[0, 0]

    def dx_at(self, x, mu: EmpiricalMeasure) -> np.ndarray:
        xb, ab = _single(x, mu)
        return self.dx(xb, ab)[0, 0]

    def dmu_at(self, x, mu: EmpiricalMeasure, v) -> np.ndarray:
        xb, ab = _single(x, mu)
        vb = np.atleast_1d(np.asarray(v, dtype=float))[None, None, :]
        return self.dmu(xb, ab, vb)[0, 0, 0]


def _single(x, mu: EmpiricalMeasure):
    if not mu.is_uniform:
        raise ConfigurationError("coefficient evaluation uses uniform-weight measures")
    xb = np.atleast_1d(np.asarray(x, dtype=float))[None, None, :]
    return xb, mu.atoms[None]


@dataclass(frozen=True)
class CoefficientSet:
    """Drift and diffusion family in canonical Itô form.

    ``convention`` is ``"ito"`` or ``"stratonovich_converted"``; in the
    latter case ``raw_drift`` holds the Stratonovich V_0 and ``drift`` the
    corrected V_0' = V_0 + 1/2 sum_k dx V_k V_k.
    """

    dim_state: int
    dim_noise: int
    drift: Coefficient
    diffusion: tuple[Coefficient, ...]
    lipschitz_bound: float = 1.0
    convention: str = "ito"
    raw_drift: Coefficient | None = None
    moment: MomentFormSpec | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim_state < 1 or self.dim_noise < 0:
            raise ConfigurationError("dimensions must be positive")
        if len(self.diffusion) != self.dim_noise:
            raise ConfigurationError(
                f"expected {self.dim_noise} diffusion fields, got {len(self.diffusion)}"
            )
        if self.convention not in ("ito", "stratonovich_converted"):
            raise ConfigurationError(f"unknown convention {self.convention!r}")
        if self.lipschitz_bound <= 0:
            raise ConfigurationError("lipschitz_bound must be positive")

    @property
    def fields(self) -> tuple[Coefficient, ...]:
        return (self.drift, *self.diffusion)

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"

    def strat_drift(self, x: np.ndarray, atoms: np.ndarray) -> np.ndarray:
        """Stratonovich drift V_0 = V_0' - 1/2 sum_k dx V_k V_k."""
        if self.raw_drift is not None:
            return self.raw_drift.value(x, atoms)
        out = self.drift.value(x, atoms).copy()
        for c in self.diffusion:
            out -= 0.5 * _apply(c.dx(x, atoms), c.value(x, atoms))
        return out


def _apply(mat: np.ndarray, vec: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", mat, vec)


# ---------------------------------------------------------------------------
# moment-form construction


def _moment_coefficient(spec: MomentFormSpec, outer: Outer, measure_free: bool) -> Coefficient:
    def value(x, atoms):
        m = spec.law_stats(atoms)[:, None, :]
        return np.broadcast_to(outer.v(x, m), x.shape).copy()

    def dx(x, atoms):
        m = spec.law_stats(atoms)[:, None, :]
        return np.broadcast_to(outer.v_x(x, m), x.shape + (x.shape[-1],)).copy()

    def dmu(x, atoms, v):
        B, P, d = x.shape
        if measure_free:
            return np.zeros((B, P, v.shape[1], d, d))
        m = spec.law_stats(atoms)[:, None, :]
        vm = np.broadcast_to(outer.v_m(x, m), (B, P, d, spec.n_stats))
        hg = spec.stats_grad(v)  # (B, Q, n, d)
        return np.einsum("bpia,bqal->bpqil", vm, hg)

    def mean_field(x, atoms, jac, chunk=None):
        B, P, d = x.shape
        if measure_free:
            return np.zeros((B, P, d, d))
        m = spec.law_stats(atoms)[:, None, :]
        n_jac = spec.jacobian_stats(atoms, jac)  # (B, n, d)
        vm = np.broadcast_to(outer.v_m(x, m), (B, P, d, spec.n_stats))
        return np.einsum("bpia,bal->bpil", vm, n_jac)

    dxx = None
    if outer.v_xx is not None:
        def dxx(x, atoms):
            m = spec.law_stats(atoms)[:, None, :]
            d = x.shape[-1]
            return np.broadcast_to(outer.v_xx(x, m), x.shape + (d, d)).copy()

    dx_dmu = None
    if outer.v_xm is not None:
        def dx_dmu(x, atoms, v):
            B, P, d = x.shape
            m = spec.law_stats(atoms)[:, None, :]
            vxm = np.broadcast_to(outer.v_xm(x, m), (B, P, d, d, spec.n_stats))
            hg = spec.stats_grad(v)
            return np.einsum("bpija,bqal->bpqilj", vxm, hg)

    coeff = Coefficient(value, dx, dmu, dxx=dxx, dx_dmu=dx_dmu, measure_free=measure_free)
    object.__setattr__(coeff, "mean_field", mean_field)
    return coeff


def make_moment_coeffs(
    spec: MomentFormSpec,
    *,
    lipschitz_bound: float = 1.0,
    measure_free: Sequence[bool] | None = None,
    name: str = "custom",
    params: dict | None = None,
) -> CoefficientSet:
    """Build an Itô coefficient set from a moment-form description.

    Lions derivatives follow from the chain rule
    ``d_mu v(x, E h)(y) = sum_j d_{m_j} v(x, m) (x) grad h_j(y)``.
    ``measure_free[k]`` marks fields whose outer map ignores ``m``; their
    Lions derivative is returned as an exact zero.
    """
    _check_moment_spec(spec)
    flags = list(measure_free) if measure_free is not None else [False] * len(spec.outers)
    if len(flags) != len(spec.outers):
        raise ConfigurationError("measure_free needs one flag per coefficient")
    coeffs = [_moment_coefficient(spec, o, f) for o, f in zip(spec.outers, flags)]
    return CoefficientSet(
        dim_state=spec.dim_state,
        dim_noise=spec.dim_noise,
        drift=coeffs[0],
        diffusion=tuple(coeffs[1:]),
        lipschitz_bound=lipschitz_bound,
        moment=spec,
        name=name,
        params=dict(params or {}),
    )


def _check_moment_spec(spec: MomentFormSpec) -> None:
    d, n = spec.dim_state, spec.n_stats
    x = np.zeros((1, 1, d))
    m = np.zeros((1, 1, n))
    if spec.stats(x).shape[-1] != n or spec.stats_grad(x).shape[-2:] != (n, d):
        raise ConfigurationError("statistics do not match dim_state / n_stats")
    for k, o in enumerate(spec.outers):
        if np.shape(o.v(x, m))[-1] != d:
            raise ConfigurationError(f"coefficient {k} does not return a vector in R^{d}")


# ---------------------------------------------------------------------------
# Stratonovich -> Itô


def strat_to_ito(
    raw_drift: Coefficient | Outer,
    raw_diffusion: Sequence[Coefficient | Outer],
    *,
    dim_state: int,
    spec: MomentFormSpec | None = None,
    lipschitz_bound: float = 1.0,
    name: str = "custom",
    params: dict | None = None,
) -> CoefficientSet:
    """Convert Stratonovich coefficients to an Itô set.

    The Itô drift is ``V_0 + 1/2 sum_k dx V_k . V_k``; no Lions-derivative
    term enters the correction because the law moves deterministically.

    Pass :class:`Outer` objects together with ``spec`` (whose own drift and
    diffusion entries are ignored) to keep the result in moment form; the
    derivatives of the correction then use ``v_xx``/``v_xm`` when supplied
    and central differences in (x, m) otherwise. Generic
    :class:`Coefficient` inputs are converted with ``dxx``/``dx_dmu`` when
    available and central differences in x otherwise.
    """
    if spec is not None:
        outers = [raw_drift, *raw_diffusion]
        if not all(isinstance(o, Outer) for o in outers):
            raise ConfigurationError("moment-form conversion needs Outer inputs")
        raw_spec = MomentFormSpec(dim_state, spec.n_stats, spec.stats, spec.stats_grad, outers[0], tuple(outers[1:]))
        _check_moment_spec(raw_spec)
        ito_spec = MomentFormSpec(
            dim_state, spec.n_stats, spec.stats, spec.stats_grad,
            _corrected_outer(raw_spec), raw_spec.diffusion,
        )
        cset = make_moment_coeffs(ito_spec, lipschitz_bound=lipschitz_bound, name=name, params=params)
        raw0 = _moment_coefficient(raw_spec, raw_spec.drift, False)
        return _replace(cset, convention="stratonovich_converted", raw_drift=raw0)

    coeffs = [raw_drift, *raw_diffusion]
    if not all(isinstance(c, Coefficient) for c in coeffs):
        raise ConfigurationError("generic conversion needs Coefficient inputs")
    _check_generic_dims(coeffs, dim_state)
    drift = _corrected_coefficient(raw_drift, list(raw_diffusion))
    return CoefficientSet(
        dim_state=dim_state,
        dim_noise=len(raw_diffusion),
        drift=drift,
        diffusion=tuple(raw_diffusion),
        lipschitz_bound=lipschitz_bound,
        convention="stratonovich_converted",
        raw_drift=raw_drift,
        name=name,
        params=dict(params or {}),
    )


def _replace(cset: CoefficientSet, **changes) -> CoefficientSet:
    from dataclasses import replace

    return replace(cset, **changes)


def _check_generic_dims(coeffs: Sequence[Coefficient], d: int) -> None:
    x = np.zeros((1, 1, d))
    atoms = np.zeros((1, 2, d))
    for k, c in enumerate(coeffs):
        out = np.asarray(c.value(x, atoms))
        if out.shape != (1, 1, d):
            raise ConfigurationError(f"V_{k} returns shape {out.shape[2:]}, expected ({d},)")


def _fd_step(x: np.ndarray) -> np.ndarray:
    return FD_STEP * np.maximum(1.0, np.abs(x))


def _fd_x(fun: Callable, x: np.ndarray, *args) -> np.ndarray:
    """Central differences of ``fun(x, *args)`` in x; derivative axis appended last."""
    d = x.shape[-1]
    cols = []
    for j in range(d):
        h = _fd_step(x[..., j])
        xp, xm = x.copy(), x.copy()
        xp[..., j] += h
        xm[..., j] -= h
        diff = fun(xp, *args) - fun(xm, *args)
        cols.append(diff / (2 * h).reshape(h.shape + (1,) * (diff.ndim - h.ndim)))
    return np.stack(cols, axis=-1)


def _corrected_outer(raw: MomentFormSpec) -> Outer:
    diff = raw.diffusion

    def corr(x, m):
        out = 0.0
        for o in diff:
            out = out + 0.5 * _apply(o.v_x(x, m), o.v(x, m))
        return out

    def v(x, m):
        return raw.drift.v(x, m) + corr(x, m)

    analytic_x = all(o.v_xx is not None for o in diff)
    analytic_m = all(o.v_xm is not None for o in diff)

    def corr_x(x, m):
        if not analytic_x:
            return _fd_x(lambda xx, mm: np.broadcast_to(corr(xx, mm), np.broadcast_shapes(xx.shape, (xx.shape[-1],))), x, m)
        out = 0.0
        for o in diff:
            val, vx, vxx = o.v(x, m), o.v_x(x, m), o.v_xx(x, m)
            out = out + 0.5 * (np.einsum("...ijl,...j->...il", vxx, val) + matmul(vx, vx))
        return out

    def corr_m(x, m):
        if not analytic_m:
            def swapped(mm, xx):
                return corr(xx, mm)
            return _fd_x(swapped, np.broadcast_to(m, np.broadcast_shapes(m.shape, x.shape[:-1] + (m.shape[-1],))).copy(), x)
        out = 0.0
        for o in diff:
            val, vx, vm, vxm = o.v(x, m), o.v_x(x, m), o.v_m(x, m), o.v_xm(x, m)
            out = out + 0.5 * (np.einsum("...ija,...j->...ia", vxm, val) + vx @ vm)
        return out

    return Outer(
        v=v,
        v_x=lambda x, m: raw.drift.v_x(x, m) + corr_x(x, m),
        v_m=lambda x, m: raw.drift.v_m(x, m) + corr_m(x, m),
    )


def _corrected_coefficient(raw0: Coefficient, diff: list[Coefficient]) -> Coefficient:
    def corr(x, atoms):
        out = np.zeros(x.shape)
        for c in diff:
            out += 0.5 * _apply(c.dx(x, atoms), c.value(x, atoms))
        return out

    def value(x, atoms):
        return raw0.value(x, atoms) + corr(x, atoms)

    def dx(x, atoms):
        out = raw0.dx(x, atoms).copy()
        for c in diff:
            val, vx = c.value(x, atoms), c.dx(x, atoms)
            vxx = c.dxx(x, atoms) if c.dxx is not None else _fd_x(c.dx, x, atoms)
            out += 0.5 * (np.einsum("...ijl,...j->...il", vxx, val) + matmul(vx, vx))
        return out

    def dmu(x, atoms, v):
        out = raw0.dmu(x, atoms, v).copy()
        for c in diff:
            if c.measure_free:
                continue
            val, vx = c.value(x, atoms), c.dx(x, atoms)
            dm = c.dmu(x, atoms, v)  # (B, P, Q, d, d)
            if c.dx_dmu is not None:
                dxdm = c.dx_dmu(x, atoms, v)
            else:
                dxdm = _fd_x(lambda xx: c.dmu(xx, atoms, v), x)  # (B, P, Q, d, d, d)
            out += 0.5 * (
                np.einsum("bpqilj,bpj->bpqil", dxdm, val)
                + np.einsum("bpij,bpqjl->bpqil", vx, dm)
            )
        return out

    return Coefficient(value, dx, dmu, measure_free=raw0.measure_free and all(c.measure_free for c in diff))


# ---------------------------------------------------------------------------
# probes


@dataclass(frozen=True)
class LionsProbe:
    quotient: np.ndarray
    pairing: np.ndarray
    discrepancy: float


def verify_lions_derivative(
    cset: CoefficientSet,
    mu: EmpiricalMeasure,
    x,
    direction: Callable[[np.ndarray], np.ndarray],
    eps: float,
    k: int = 0,
) -> LionsProbe:
    """Compare a lift difference quotient with the Lions-derivative pairing.

    Each atom z_i is shifted to z_i + eps * g(z_i); the quotient
    [V(x, mu_eps) - V(x, mu)] / eps is compared with
    sum_i w_i dmu V(x, mu, z_i) g(z_i). For smooth coefficients the
    discrepancy is O(eps).
    """
    if mu.size < 2:
        raise ConfigurationError("the lift probe needs at least two atoms")
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    coeff = cset.fields[k]
    g = np.asarray(direction(mu.atoms), dtype=float).reshape(mu.atoms.shape)
    shifted = EmpiricalMeasure(mu.atoms + eps * g, mu.weights)
    base = coeff.at(x, mu)
    moved = coeff.at(x, shifted)
    xb = np.atleast_1d(np.asarray(x, dtype=float))[None, None, :]
    dm = coeff.dmu(xb, mu.atoms[None], mu.atoms[None])[0, 0]  # (N, d, d)
    terms = np.einsum("nil,nl->ni", dm, g)
    bad = ~np.all(np.isfinite(terms), axis=1)
    if bad.any() or not (np.all(np.isfinite(base)) and np.all(np.isfinite(moved))):
        i = int(np.argmax(bad)) if bad.any() else -1
        where = f"atom {i} ({mu.atoms[i].tolist()})" if i >= 0 else "the base point"
        raise ProbeError(f"non-finite Lions probe value at {where}")
    pairing = mu.weights @ terms
    quotient = (moved - base) / eps
    return LionsProbe(quotient, pairing, float(np.linalg.norm(quotient - pairing)))


@dataclass
class AssumptionReport:
    """Estimated bounds per coefficient (k = 0 is the drift)."""

    declared_bound: float
    dx_bound: list[float]
    dmu_bound: list[float]
    dx_lipschitz: list[float]
    dmu_lipschitz: list[float]
    violations: list[str]

    @property
    def estimated_bound(self) -> float:
        return max(self.dx_bound + self.dmu_bound + self.dx_lipschitz + self.dmu_lipschitz, default=0.0)

    def rows(self) -> list[dict]:
        return [
            {
                "k": k,
                "sup_dx": self.dx_bound[k],
                "sup_dmu": self.dmu_bound[k],
                "lip_dx": self.dx_lipschitz[k],
                "lip_dmu": self.dmu_lipschitz[k],
            }
            for k in range(len(self.dx_bound))
        ]


def _w2(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    if mu.dim == 1:
        return w2_1d(mu, nu)
    return w2_exact_small(mu, nu)


def probe_assumption(
    cset: CoefficientSet,
    points: Sequence,
    measures: Sequence[EmpiricalMeasure],
    atoms: Sequence | None = None,
) -> AssumptionReport:
    """Probe boundedness and Lipschitz continuity of dx V_k and dmu V_k.

    ``atoms`` are the third arguments v of the Lions derivatives (defaults
    to ``points``). Difference quotients divide by
    |x - x'| + W2(mu, mu') (+ |v - v'| for dmu). Violations of the declared
    bound are reported and warned about, never raised.
    """
    pts = [np.atleast_1d(np.asarray(p, dtype=float)) for p in points]
    vs = [np.atleast_1d(np.asarray(v, dtype=float)) for v in (atoms if atoms is not None else points)]
    if not pts or not measures:
        raise ConfigurationError("probe sets must be nonempty")
    dist_mu = {}
    for a, b in itertools.combinations(range(len(measures)), 2):
        dist_mu[a, b] = dist_mu[b, a] = _w2(measures[a], measures[b])
    for a in range(len(measures)):
        dist_mu[a, a] = 0.0

    report = AssumptionReport(cset.lipschitz_bound, [], [], [], [], [])
    for k, coeff in enumerate(cset.fields):
        dxs, dms = {}, {}
        for i, p in enumerate(pts):
            for a, mu in enumerate(measures):
                dxs[i, a] = coeff.dx_at(p, mu)
                for j, v in enumerate(vs):
                    dms[i, a, j] = coeff.dmu_at(p, mu, v)
        for key, val in itertools.chain(dxs.items(), dms.items()):
            if not np.all(np.isfinite(val)):
                raise ProbeError(f"non-finite derivative of V_{k} at probe {key}")
        report.dx_bound.append(max(float(np.linalg.norm(v)) for v in dxs.values()))
        report.dmu_bound.append(max(float(np.linalg.norm(v)) for v in dms.values()))

        lip_x = 0.0
        for (i, a), (i2, a2) in itertools.combinations(dxs, 2):
            den = float(np.linalg.norm(pts[i] - pts[i2])) + dist_mu[a, a2]
            if den > 0:
                lip_x = max(lip_x, float(np.linalg.norm(dxs[i, a] - dxs[i2, a2])) / den)
        lip_m = 0.0
        for (i, a, j), (i2, a2, j2) in itertools.combinations(dms, 2):
            den = (
                float(np.linalg.norm(pts[i] - pts[i2]))
                + dist_mu[a, a2]
                + float(np.linalg.norm(vs[j] - vs[j2]))
            )
            if den > 0:
                lip_m = max(lip_m, float(np.linalg.norm(dms[i, a, j] - dms[i2, a2, j2])) / den)
        report.dx_lipschitz.append(lip_x)
        report.dmu_lipschitz.append(lip_m)

        for label, val in (
            ("sup|dx V|", report.dx_bound[-1]),
            ("sup|dmu V|", report.dmu_bound[-1]),
            ("Lip(dx V)", lip_x),
            ("Lip(dmu V)", lip_m),
        ):
            if val > cset.lipschitz_bound * (1 + 1e-9):
                report.violations.append(f"V_{k}: {label} = {val:.6g} exceeds K = {cset.lipschitz_bound:.6g}")
    for msg in report.violations:
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return report


# ---------------------------------------------------------------------------
# built-in families


def _identity_stats(d: int):
    eye = np.eye(d)

    def stats(z):
        return np.asarray(z, dtype=float)

    def grad(z):
        return np.broadcast_to(eye, np.shape(z)[:-1] + (d, d))

    return stats, grad


def zero(dim_state: int = 1, dim_noise: int = 1) -> CoefficientSet:
    d = dim_state
    stats, grad = _identity_stats(d)

    def zero_outer() -> Outer:
        return Outer(
            v=lambda x, m: np.zeros(np.broadcast_shapes(x.shape, m.shape[:-1] + (d,))),
            v_x=lambda x, m: np.zeros(np.broadcast_shapes(x.shape, m.shape[:-1] + (d,)) + (d,)),
            v_m=lambda x, m: np.zeros(np.broadcast_shapes(x.shape, m.shape[:-1] + (d,)) + (d,)),
            v_xx=lambda x, m: np.zeros(np.broadcast_shapes(x.shape, m.shape[:-1] + (d,)) + (d, d)),
            v_xm=lambda x, m: np.zeros(np.broadcast_shapes(x.shape, m.shape[:-1] + (d,)) + (d, d)),
        )

    spec = MomentFormSpec(d, d, stats, grad, zero_outer(), tuple(zero_outer() for _ in range(dim_noise)))
    return make_moment_coeffs(
        spec, lipschitz_bound=1.0, measure_free=[True] * (dim_noise + 1), name="zero",
        params={"dim_state": dim_state, "dim_noise": dim_noise},
    )


def _scalar_outer(v, v_x, v_m, v_xx=None, v_xm=None) -> Outer:
    """Outer map for d = 1, n = 1 from scalar functions of (x, m)."""

    def wrap(fun, extra):
        def inner(x, m):
            out = np.asarray(fun(x[..., 0], m[..., 0]), dtype=float)
            out = np.broadcast_to(out, np.broadcast_shapes(x.shape[:-1], m.shape[:-1]))
            return out.reshape(out.shape + (1,) * (1 + extra))
        return inner

    return Outer(
        v=wrap(v, 0),
        v_x=wrap(v_x, 1),
        v_m=wrap(v_m, 1),
        v_xx=wrap(v_xx, 2) if v_xx is not None else None,
        v_xm=wrap(v_xm, 2) if v_xm is not None else None,
    )


def example46(f: str = "identity", a: float = 1.0) -> CoefficientSet:
    """dX = E[f(X) - Z] dt + E[X - Z] dW in d = d' = 1 (Itô form).

    ``f`` is ``"identity"`` or ``"tanh_a"`` (f(x) = tanh(a x)).
    """
    if f == "identity":
        fv, f1, f2 = (lambda x: x), (lambda x: np.ones_like(x)), (lambda x: np.zeros_like(x))
        bound = 1.0
    elif f == "tanh_a":
        fv = lambda x: np.tanh(a * x)  # noqa: E731
        f1 = lambda x: a / np.cosh(a * x) ** 2  # noqa: E731
        f2 = lambda x: -2 * a * a * np.tanh(a * x) / np.cosh(a * x) ** 2  # noqa: E731
        # sup |f''| of tanh(a x) is 4 a^2 / (3 sqrt 3)
        bound = max(1.0, abs(a), 4 * a * a / (3 * math.sqrt(3)))
    else:
        raise ConfigurationError(f"unknown f {f!r}; expected 'identity' or 'tanh_a'", "family.params.f")
    stats, grad = _identity_stats(1)
    drift = _scalar_outer(
        lambda x, m: fv(x) - m,
        lambda x, m: f1(x) + 0 * m,
        lambda x, m: -np.ones_like(x + m),
        lambda x, m: f2(x) + 0 * m,
        lambda x, m: np.zeros_like(x + m),
    )
    diffusion = _scalar_outer(
        lambda x, m: x - m,
        lambda x, m: np.ones_like(x + m),
        lambda x, m: -np.ones_like(x + m),
        lambda x, m: np.zeros_like(x + m),
        lambda x, m: np.zeros_like(x + m),
    )
    spec = MomentFormSpec(1, 1, stats, grad, drift, (diffusion,))
    return make_moment_coeffs(spec, lipschitz_bound=bound, name="example46", params={"f": f, "a": a})


def moment_linear(A, B=None, C=(), D=None, E=None) -> CoefficientSet:
    """Linear mean-field family with statistic h(z) = z.

    drift = A x + B m, diffusion_k = C_k x + D_k m + E_k, m = E[Z].
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = A.shape[0]
    if A.shape != (d, d):
        raise ConfigurationError("A must be square", "family.params.A")
    B = np.zeros((d, d)) if B is None else np.atleast_2d(np.asarray(B, dtype=float))
    Cs = [np.atleast_2d(np.asarray(c, dtype=float)) for c in C]
    dn = len(Cs)
    Ds = [np.zeros((d, d))] * dn if D is None else [np.atleast_2d(np.asarray(m_, dtype=float)) for m_ in D]
    Es = [np.zeros(d)] * dn if E is None else [np.atleast_1d(np.asarray(e, dtype=float)) for e in E]
    if len(Ds) != dn or len(Es) != dn:
        raise ConfigurationError("C, D and E need one entry per noise driver", "family.params")
    for name_, mat in [("B", B), *[(f"C[{k}]", c) for k, c in enumerate(Cs)], *[(f"D[{k}]", c) for k, c in enumerate(Ds)]]:
        if mat.shape != (d, d):
            raise ConfigurationError(f"expected shape ({d}, {d}), got {mat.shape}", f"family.params.{name_}")
    for k, e in enumerate(Es):
        if e.shape != (d,):
            raise ConfigurationError(f"expected shape ({d},), got {e.shape}", f"family.params.E[{k}]")
    stats, grad = _identity_stats(d)

    def linear(P, Q, r):
        def v(x, m):
            return x @ P.T + m @ Q.T + r

        def v_x(x, m):
            return np.broadcast_to(P, np.broadcast_shapes(x.shape[:-1], m.shape[:-1]) + (d, d))

        def v_m(x, m):
            return np.broadcast_to(Q, np.broadcast_shapes(x.shape[:-1], m.shape[:-1]) + (d, d))

        def zeros3(x, m):
            return np.zeros(np.broadcast_shapes(x.shape[:-1], m.shape[:-1]) + (d, d, d))

        return Outer(v, v_x, v_m, zeros3, zeros3)

    outers = [linear(A, B, np.zeros(d))] + [linear(c, dm, e) for c, dm, e in zip(Cs, Ds, Es)]
    spec = MomentFormSpec(d, d, stats, grad, outers[0], tuple(outers[1:]))
    mats = [A, B, *Cs, *Ds]
    bound = max(1.0, *(float(np.linalg.norm(m_)) for m_ in mats))
    free = [not np.any(B)] + [not np.any(dm) for dm in Ds]
    return make_moment_coeffs(
        spec, lipschitz_bound=bound, measure_free=free, name="moment_linear",
        params={"A": A.tolist(), "B": B.tolist(), "C": [c.tolist() for c in Cs],
                "D": [c.tolist() for c in Ds], "E": [e.tolist() for e in Es]},
    )


def geometric(b: float = 0.5, mu: float = 0.0) -> CoefficientSet:
    """Measure-free geometric Brownian flow dX = mu X dt + b X dW (d = 1)."""
    cset = moment_linear([[mu]], None, [[[b]]])
    return _replace(cset, name="geometric", params={"b": b, "mu": mu}, lipschitz_bound=max(1.0, abs(b), abs(mu)))


def strat_sine(alpha: float = 1.0, beta: float = 0.5, gamma: float = 0.5) -> CoefficientSet:
    """Stratonovich family V_0 = -alpha (x - m), V_1 = beta sin x + gamma m, m = E[Z]."""
    stats, grad = _identity_stats(1)
    v0 = _scalar_outer(
        lambda x, m: -alpha * (x - m),
        lambda x, m: -alpha + 0 * (x + m),
        lambda x, m: alpha + 0 * (x + m),
        lambda x, m: 0 * (x + m),
        lambda x, m: 0 * (x + m),
    )
    v1 = _scalar_outer(
        lambda x, m: beta * np.sin(x) + gamma * m,
        lambda x, m: beta * np.cos(x) + 0 * m,
        lambda x, m: gamma + 0 * (x + m),
        lambda x, m: -beta * np.sin(x) + 0 * m,
        lambda x, m: 0 * (x + m),
    )
    base = MomentFormSpec(1, 1, stats, grad, v0, (v1,))
    # the Itô correction 1/2 beta cos x (beta sin x + gamma m) grows with m, so
    # this bound only holds for |m| <= 2
    bg = abs(beta * gamma)
    bound = max(1.0, abs(alpha) + 0.5 * beta * beta + bg, abs(alpha) + 0.5 * bg, beta * beta + bg, abs(beta), abs(gamma))
    return strat_to_ito(v0, [v1], dim_state=1, spec=base, lipschitz_bound=bound,
                        name="strat_sine", params={"alpha": alpha, "beta": beta, "gamma": gamma})


# compiled-in registry for the `custom` family
REGISTRY: dict[str, Callable[..., CoefficientSet]] = {}


def register(key: str):
    def deco(factory):
        REGISTRY[key] = factory
        return factory
    return deco


FAMILIES: dict[str, Callable[..., CoefficientSet]] = {
    "zero": zero,
    "example46": example46,
    "moment_linear": moment_linear,
    "geometric": geometric,
    "strat_sine": strat_sine,
}


def build_family(name: str, params: dict | None = None) -> CoefficientSet:
    params = dict(params or {})
    if name == "custom":
        key = params.pop("key", None)
        if key not in REGISTRY:
            raise ConfigurationError(f"unknown custom key {key!r}; registered: {sorted(REGISTRY)}", "family.params.key")
        return REGISTRY[key](**params)
    if name not in FAMILIES:
        raise ConfigurationError(f"unknown family {name!r}; expected one of {sorted(FAMILIES) + ['custom']}", "family.name")
    try:
        return FAMILIES[name](**params)
    except TypeError as exc:
        raise ConfigurationError(str(exc), "family.params") from exc
