"""Experiment runners behind the command-line subcommands.

Each runner takes a validated :class:`SimConfig` and returns a
:class:`RunOutput`: named text files plus per-module error counts. The
runners never write to disk; the CLI does.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import linalg, oracle
from .coefficients import CoefficientSet, build_family, probe_assumption
from .config import SimConfig
from .errors import CapabilityError, ConfigurationError
from .flow import SimulationResult, simulate
from .grid import SpatialGrid
from .inverse import REASONS, integrate_psi, verify_two_sided
from .measure import EmpiricalMeasure, paired_w2_bound, w2_1d
from .paths import BrownianPaths, refine_halve, sample_paths
from .stopping import (
    StoppingRecord,
    detect_rho,
    detect_tau_n,
    detect_theta,
    estimate_domain,
    mask_raster,
    rho_per_point,
    tau_monitor,
)


@dataclass
class RunOutput:
    files: dict[str, str] = field(default_factory=dict)
    errors: dict[str, dict[str, int]] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def tsv(rows: list[dict]) -> str:
    """Tab-separated table with a header line; floats printed round-trip exact."""
    if not rows:
        return ""
    header = list(rows[0])
    lines = ["\t".join(header)]
    lines += ["\t".join(_fmt(r.get(k)) for k in header) for r in rows]
    return "\n".join(lines) + "\n"


def _knot_or_none(v: int | None, K: int):
    return None if v is None or v >= K else int(v)


def _family(cfg: SimConfig) -> CoefficientSet:
    cset = build_family(cfg.family["name"], cfg.family.get("params", {}))
    if cset.dim_state != cfg.spatial_grid().dim:
        raise ConfigurationError(
            f"grid has dimension {cfg.spatial_grid().dim}, family {cset.name} has {cset.dim_state}", "grid"
        )
    return cset


def _paths(cfg: SimConfig, cset: CoefficientSet) -> BrownianPaths:
    return sample_paths(cfg.time_grid(), cfg.replicas, cset.dim_noise, cfg.seed, cfg.threads)


def _simulate(cfg, cset, paths, grid=None, **kw) -> SimulationResult:
    return simulate(cset, paths, grid if grid is not None else cfg.spatial_grid(),
                    m_freeze=cfg.m_freeze, threads=cfg.threads, scheme=cfg.scheme, **kw)


def _flow_errors(res: SimulationResult) -> dict[str, int]:
    return {"diverged": res.diverged_count, "frozen": res.frozen_count, "exploded": res.exploded_count}


def _output_knots(cfg: SimConfig, K: int) -> list[int]:
    knots = list(range(0, K, cfg.output_every))
    if knots[-1] != K - 1:
        knots.append(K - 1)
    return knots


# ---------------------------------------------------------------------------


def run_simulate(cfg: SimConfig) -> RunOutput:
    cset = _family(cfg)
    res = _simulate(cfg, cset, _paths(cfg, cset))
    fld = res.field
    d = fld.grid.dim
    nodes = fld.grid.nodes
    rows = []
    for i in _output_knots(cfg, fld.n_knots):
        for g, x in enumerate(nodes):
            row = {"knot": i, "t": fld.times[i], "point": g}
            row.update({f"x{j}": x[j] for j in range(d)})
            row.update({f"phi{j}": fld.X[i, g, j] for j in range(d)})
            for name, arr in (("J", fld.J), ("V", fld.V), ("meanJ", fld.mean_J), ("seJ", fld.se_J)):
                row.update({f"{name}{a}{b}": arr[i, g, a, b] for a in range(d) for b in range(d)})
            row["detJ"] = float(linalg.det(fld.J[i, g]))
            row["vj_residual"] = fld.vj_residual[i, g]
            row["v_alive"] = bool(fld.v_alive[i, g])
            rows.append(row)
    out = RunOutput(errors={"flow": _flow_errors(res)})
    out.files["state.tsv"] = tsv(rows)
    out.files["stopping.tsv"] = tsv(_global_hits(cfg, fld))
    return out


def _global_hits(cfg: SimConfig, fld) -> list[dict]:
    rows = [{"kind": "theta", "threshold": float(m), "knot": detect_theta(fld, m)} for m in cfg.m_ladder]
    try:
        mon = tau_monitor(fld)
    except CapabilityError:
        mon = None
    for n in cfg.n_ladder:
        hit = detect_tau_n(fld, n, mon) if mon is not None else "n/a"
        rows.append({"kind": "tau_n", "threshold": float(n), "knot": hit})
    for r in rows:
        r["t"] = float(fld.times[r["knot"]]) if isinstance(r["knot"], int) else None
    return rows


def _invert(cfg: SimConfig):
    cset = _family(cfg)
    res = _simulate(cfg, cset, _paths(cfg, cset))
    inv = integrate_psi(res.field, cset, m_ladder=cfg.m_ladder)
    report = verify_two_sided(res.field, inv)
    return cset, res, inv, report


def _inverse_errors(inv, report) -> dict[str, int]:
    K = inv.n_knots
    counts = {name: int(np.sum(inv.reason[inv.tau_bar() < K] == code)) for code, name in enumerate(REASONS) if code}
    counts["tau_bar_prime_hits"] = int(np.sum(report.tau_bar_prime < K))
    return counts


def run_invert(cfg: SimConfig) -> RunOutput:
    cset, res, inv, report = _invert(cfg)
    K = res.field.n_knots
    rows = []
    for g, x in enumerate(res.field.grid.nodes):
        row = {f"x{j}": x[j] for j in range(len(x))}
        for m in cfg.m_ladder:
            row[f"tau_bar_m{m:g}"] = _knot_or_none(inv.fail[float(m)][g], K)
        row["left_residual"] = report.left[g]
        row["right_residual"] = report.right[g]
        row["tau_bar_prime"] = _knot_or_none(report.tau_bar_prime[g], K)
        row["tau"] = _knot_or_none(report.tau[g], K)
        row["failure"] = REASONS[inv.reason[g]] if inv.tau_bar()[g] < K else "-"
        rows.append(row)
    out = RunOutput(errors={"flow": _flow_errors(res), "inverse": _inverse_errors(inv, report)})
    out.files["inverse.tsv"] = tsv(rows)
    out.summary = {"max_left_residual": float(report.left.max()), "max_right_residual": float(report.right.max())}
    return out


def stopping_record(cfg: SimConfig, res: SimulationResult, inv, report) -> StoppingRecord:
    fld = res.field
    try:
        mon = tau_monitor(fld)
        tau_n = {float(n): detect_tau_n(fld, n, mon) for n in cfg.n_ladder}
    except CapabilityError:
        tau_n = {}
    return StoppingRecord(
        n_knots=fld.n_knots,
        theta={float(m): detect_theta(fld, m) for m in cfg.m_ladder},
        tau_n=tau_n,
        rho=rho_per_point(fld),
        tau_bar_m={float(m): inv.fail[float(m)] for m in cfg.m_ladder},
        tau_bar=report.tau_bar,
        tau_bar_prime=report.tau_bar_prime,
        tau=report.tau,
    )


def run_domain(cfg: SimConfig) -> RunOutput:
    cset, res, inv, report = _invert(cfg)
    fld = res.field
    record = stopping_record(cfg, res, inv, report)
    out = RunOutput(errors={"flow": _flow_errors(res), "inverse": _inverse_errors(inv, report)})
    out.files["stopping.tsv"] = tsv(record.rows(fld.grid.nodes))
    rows = []
    for t in cfg.domain_times:
        knot = cfg.time_grid().knot_of(t)
        mask, images = estimate_domain(record, fld, knot)
        out.files[f"mask_t{t:g}.txt"] = mask_raster(mask, fld.grid.points)
        row = {"t": float(t), "knot": knot, "size": int(mask.sum())}
        for j in range(fld.grid.dim):
            row[f"image_min{j}"] = float(images[:, j].min()) if len(images) else None
            row[f"image_max{j}"] = float(images[:, j].max()) if len(images) else None
        rows.append(row)
    out.files["domain.tsv"] = tsv(rows)
    out.summary = {"sizes": [r["size"] for r in rows]}
    return out


# ---------------------------------------------------------------------------
# refinement studies


def _ladder(cfg: SimConfig, cset: CoefficientSet) -> list[BrownianPaths]:
    paths = [_paths(cfg, cset)]
    for _ in range(cfg.levels - 1):
        paths.append(refine_halve(paths[-1], cfg.threads))
    return paths


def _order_row(name, steps, errors) -> dict:
    errors = np.asarray(errors, dtype=float)
    if np.all(errors == 0):
        return {"quantity": name, "order": "exact", "stderr": None}
    order, se = oracle.fit_order(steps, errors)
    return {"quantity": name, "order": order, "stderr": se}


def geometric_closed_form(cset: CoefficientSet, x: np.ndarray, W: np.ndarray, t: float):
    """X_t and J_t of dX = mu X dt + b X dW started from each x (per replica W_t)."""
    b, mu = cset.params["b"], cset.params["mu"]
    J = np.exp((mu - 0.5 * b * b) * t + b * W)  # (M,)
    return x[:, None, :] * J[None, :, None], J


def run_converge(cfg: SimConfig) -> RunOutput:
    cset = _family(cfg)
    ladder = _ladder(cfg, cset)
    results = [_simulate(cfg, cset, p) for p in ladder]
    closed = cset.name == "geometric"
    nodes = cfg.spatial_grid().nodes
    if closed:
        W_T = ladder[-1].knots[:, -1, 0] if ladder[-1].n_drivers else 0.0
        ref_X, ref_J = geometric_closed_form(cset, nodes, W_T, cfg.T - cfg.s)
        ref_J = np.broadcast_to(ref_J[None, :, None, None], results[-1].final.J.shape)
    else:
        ref_X, ref_J = results[-1].final.X, results[-1].final.J
    rows, steps, err_x, err_j = [], [], [], []
    used = range(cfg.levels) if closed else range(cfg.levels - 1)
    for lvl, (p, r) in enumerate(zip(ladder, results)):
        ex = float(np.mean(np.linalg.norm(r.final.X - ref_X, axis=-1)))
        ej = float(np.mean(np.sqrt(np.sum((r.final.J - ref_J) ** 2, axis=(-2, -1)))))
        rows.append({"level": lvl, "n_steps": p.grid.n_steps, "dt": p.grid.dt, "error_X": ex, "error_J": ej})
        if lvl in used:
            steps.append(p.grid.dt)
            err_x.append(ex)
            err_j.append(ej)
    out = RunOutput(errors={"flow": _flow_errors(results[-1])})
    out.files["converge.tsv"] = tsv(rows)
    orders = [_order_row("X", steps, err_x), _order_row("J", steps, err_j)]
    for o in orders:
        o["reference"] = "closed_form" if closed else "finest_level"
    out.files["order.tsv"] = tsv(orders)
    out.summary = {"order_X": orders[0]["order"], "order_J": orders[1]["order"]}
    return out


def _fprime(cset: CoefficientSet, X: np.ndarray) -> np.ndarray:
    if cset.params.get("f") == "tanh_a":
        a = cset.params["a"]
        return a / np.cosh(a * X) ** 2
    return np.ones_like(X)


def run_oracle_check(cfg: SimConfig) -> RunOutput:
    cset = _family(cfg)
    if cset.name != "example46":
        raise ConfigurationError("oracle-check needs the example46 family", "family.name")
    identity = cset.params["f"] == "identity"
    x0 = cfg.spatial_grid().nodes[:1]
    point = SpatialGrid.single(x0[0])
    ladder = _ladder(cfg, cset)
    M = cfg.replicas
    rows, steps, medians = [], [], []
    out = RunOutput()
    for lvl, paths in enumerate(ladder):
        res = _simulate(cfg, cset, paths, grid=point, trace=M)
        times = paths.grid.knots
        J_eng = res.traces["J"][:, 0, :, 0, 0].T  # (M, K)
        X_eng = res.traces["X"][:, 0, :, 0].T
        W = paths.knots[:, :, 0]
        mean_J = 1.0 if identity else res.field.mean_J[:, 0, 0, 0]
        J_star = oracle.closed_form_jacobian(W, _fprime(cset, X_eng), mean_J, times)
        err = np.abs(J_eng[:, -1] - J_star[:, -1])
        rows.append({
            "level": lvl, "n_steps": paths.grid.n_steps, "dt": paths.grid.dt,
            "median_error": float(np.median(err)), "q90_error": float(np.quantile(err, 0.9)),
            "max_error": float(err.max()),
            "mean_J_source": "exact" if identity else "engine",
        })
        steps.append(paths.grid.dt)
        medians.append(float(np.median(err)))
        out.errors = {"flow": _flow_errors(res)}
    order, se = oracle.fit_order(steps, medians)
    for r in rows:
        r["order"] = order
        r["order_stderr"] = se
    out.files["oracle.tsv"] = tsv(rows)

    K = len(times)
    picks = sorted({K // 4, K // 2, (3 * K) // 4, K - 1})
    comp, cross = [], []
    for r in range(M):
        row = {"replica": r}
        row.update({f"abs_diff_k{k}": abs(J_eng[r, k] - J_star[r, k]) for k in picks})
        comp.append(row)
        rho_e = detect_rho(J_eng[r, :, None, None], res.traces["exploded"][:, 0, r])
        f_id = None if identity else _fprime(cset, X_eng[r])
        rho_o = oracle.crossing_time(W[r], times, fprime=f_id, mean_J=None if identity else mean_J)
        cross.append({"replica": r, "rho_engine": rho_e, "rho_oracle": rho_o})
    out.files["oracle_paths.tsv"] = tsv(comp)
    out.files["crossing.tsv"] = tsv(cross)
    out.summary = {"order": order, "order_stderr": se, "medians": medians}
    return out


def run_w2_check(cfg: SimConfig) -> RunOutput:
    """Time regularity of the law and the mean-square spatial modulus."""
    cset = _family(cfg)
    opts = cfg.w2
    x0 = np.asarray(opts["x"] if opts.get("x") is not None else cfg.spatial_grid().nodes[0], dtype=float)
    x0 = np.atleast_1d(x0)
    paths = _paths(cfg, cset)
    dt = paths.grid.dt
    lags = sorted({int(k) for k in opts["lags"] if 0 < int(k) <= paths.grid.n_steps})
    if not lags:
        raise ConfigurationError("no usable lags", "w2.lags")
    res = _simulate(cfg, cset, paths, grid=SpatialGrid.single(x0), snapshot_knots=[0] + lags)
    base = res.snapshots[0][0]
    rows = []
    for k in lags:
        later = res.snapshots[k][0]
        if len(x0) == 1:
            w2 = w2_1d(EmpiricalMeasure(base), EmpiricalMeasure(later))
            kind = "exact"
        else:
            w2 = paired_w2_bound(base, later)
            kind = "paired_upper_bound"
        rows.append({"lag_knots": k, "lag": k * dt, "w2": w2, "kind": kind})
    t_order = oracle.fit_order([r["lag"] for r in rows], [r["w2"] for r in rows])

    space = []
    final = res.final.X[0]
    for delta in opts["offsets"]:
        x1 = x0.copy()
        x1[0] += float(delta)
        other = _simulate(cfg, cset, paths, grid=SpatialGrid.single(x1)).final.X[0]
        msq = float(np.mean(np.sum((final - other) ** 2, axis=-1)))
        space.append({"offset": float(delta), "mean_sq_diff": msq})
    s_order = oracle.fit_order([r["offset"] for r in space], [r["mean_sq_diff"] for r in space])
    out = RunOutput(errors={"flow": _flow_errors(res)})
    out.files["w2_time.tsv"] = tsv(rows)
    out.files["moment_space.tsv"] = tsv(space)
    out.files["slopes.tsv"] = tsv([
        {"study": "w2_vs_lag", "slope": t_order[0], "stderr": t_order[1]},
        {"study": "mean_sq_vs_offset", "slope": s_order[0], "stderr": s_order[1]},
    ])
    out.summary = {"time_slope": t_order[0], "space_slope": s_order[0]}
    return out


def run_probe(cfg: SimConfig) -> RunOutput:
    cset = _family(cfg)
    nodes = cfg.spatial_grid().nodes
    pick = np.unique(np.linspace(0, len(nodes) - 1, min(len(nodes), 5)).round().astype(int))
    points = nodes[pick]
    centre = nodes.mean(axis=0)
    measures = [
        EmpiricalMeasure.dirac(centre),
        EmpiricalMeasure(points),
        EmpiricalMeasure(points * 0.5 + 0.5 * centre),
    ]
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        report = probe_assumption(cset, points, measures)
    out = RunOutput(errors={"coefficients": {"violations": len(report.violations)}})
    rows = report.rows()
    for r in rows:
        r["declared_K"] = cset.lipschitz_bound
    out.files["probe.tsv"] = tsv(rows)
    out.files["violations.txt"] = "".join(v + "\n" for v in report.violations)
    out.summary = {"estimated_bound": report.estimated_bound}
    return out


RUNNERS = {
    "simulate": run_simulate,
    "invert": run_invert,
    "domain": run_domain,
    "converge": run_converge,
    "oracle-check": run_oracle_check,
    "w2-check": run_w2_check,
    "probe-assumption": run_probe,
}
