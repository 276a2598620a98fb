"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line with the measured
numbers; the lines are repeated in the terminal summary.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, brute_force_w2
from mvflow import coefficients as C
from mvflow.cli import main
from mvflow.config import load_config
from mvflow.experiments import _invert, run_oracle_check, run_w2_check, stopping_record
from mvflow.flow import simulate
from mvflow.grid import SpatialGrid
from mvflow.inverse import integrate_psi, verify_two_sided
from mvflow.measure import EmpiricalMeasure, w2_1d, w2_exact_small
from mvflow.oracle import crossing_time, fit_order
from mvflow.paths import TimeGrid, refine_halve, sample_paths
from mvflow.stopping import detect_rho, detect_theta, estimate_domain

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
LEVELS = 3  # dt = 4e-3, 2e-3, 1e-3


def report(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def fine_ladder(M, seed, n_drivers=1):
    paths = sample_paths(TimeGrid(0, 1, 250), M, n_drivers, seed)
    out = [paths]
    for _ in range(LEVELS - 1):
        out.append(refine_halve(out[-1]))
    return out


def test_identity_flow():
    start = time.perf_counter()
    cset = C.zero()
    grid = SpatialGrid((-1.0,), (1.0,), (11,))
    field = simulate(cset, sample_paths(TimeGrid(0, 1, 100), 10, 1, 0), grid).field
    inv = integrate_psi(field, cset)
    rep = verify_two_sided(field, inv)
    elapsed = time.perf_counter() - start
    nodes = grid.nodes
    exact = (
        np.array_equal(field.X, np.broadcast_to(nodes, field.X.shape))
        and np.all(field.J == 1.0)
        and np.all(field.V == 1.0)
        and np.array_equal(inv.psi, np.broadcast_to(nodes, inv.psi.shape))
        and np.all(rep.left == 0)
        and np.all(rep.right == 0)
    )
    report("identity flow", bool(exact) and elapsed < 1.0,
           f"Phi, J, V, Psi exact at all {field.n_knots} knots: {bool(exact)}; runtime {elapsed:.2f}s (< 1s)")


def test_oracle_match():
    start = time.perf_counter()
    cfg = load_config(CONFIGS / "example46_oracle.json")
    assert cfg.replicas == 200 and cfg.n_steps == 250 and cfg.levels == LEVELS
    out = run_oracle_check(cfg)
    elapsed = time.perf_counter() - start
    order, medians = out.summary["order"], out.summary["medians"]
    report("oracle match", order >= 0.4 and elapsed < 60,
           f"median |J - J*| at T = {', '.join(f'{m:.4f}' for m in medians)}; "
           f"order {order:.3f} (>= 0.4); runtime {elapsed:.1f}s (< 60s)")


def test_mean_jacobian_identity():
    start = time.perf_counter()
    M = 2000
    paths = sample_paths(TimeGrid(0, 1, 1000), M, 1, 46)
    field = simulate(C.example46("identity"), paths, SpatialGrid.single([0.5])).field
    elapsed = time.perf_counter() - start
    mean, se = field.mean_J[:, 0, 0, 0], field.se_J[:, 0, 0, 0]
    gap = np.abs(mean - 1.0)
    ok = bool(np.all(gap <= 3 * se)) and elapsed < 60
    report("mean-Jacobian identity", ok,
           f"max |mean J - 1| = {gap.max():.3g}, max 3 SE = {3 * se.max():.3g} over {len(mean)} knots, "
           f"M = {M}; runtime {elapsed:.1f}s (< 60s)")


def _vj_sup(cset, grid, paths, m=10.0):
    field = simulate(cset, paths, grid).field
    theta = detect_theta(field, m)
    stop = field.n_knots if theta is None else theta
    return float(field.vj_residual[:stop].max())


def test_inverse_jacobian_identity():
    geo_grid = SpatialGrid((0.5,), (2.0,), (38,))
    seeds = range(8)
    geo = np.array([[_vj_sup(C.geometric(0.5), geo_grid, p) for p in fine_ladder(1, s)] for s in seeds])
    ex_grid = SpatialGrid((-2.0,), (2.0,), (41,))
    tanh = [_vj_sup(C.example46("tanh_a", a=1.5), ex_grid, p) for p in fine_ladder(50, 0)]
    ident = [_vj_sup(C.example46("identity"), ex_grid, p) for p in fine_ladder(50, 0)]
    geo_mean = geo.mean(axis=0)
    ok = (
        geo[:, -1].max() <= 0.05
        and np.all(np.diff(geo_mean) < 0)
        and tanh[-1] <= 0.05
        and np.all(np.diff(tanh) < 0)
        and max(ident) <= 0.05
    )
    report("inverse-Jacobian identity", bool(ok),
           f"geometric sup|VJ-I| at dt=1e-3 max over {len(seeds)} paths {geo[:, -1].max():.4f}, "
           f"path-mean by level {np.round(geo_mean, 4).tolist()}; example46 tanh {np.round(tanh, 5).tolist()}, "
           f"identity {max(ident):.1g} (<= 0.05, decreasing)")


def _composition(cset, lower, upper, points_by_level, paths_by_level):
    left, right = [], []
    for n, paths in zip(points_by_level, paths_by_level):
        field = simulate(cset, paths, SpatialGrid((lower,), (upper,), (n,))).field
        rep = verify_two_sided(field, integrate_psi(field, cset))
        left.append(float(rep.left.max()))
        right.append(float(rep.right.max()))
    return np.array(left), np.array(right)


def test_two_sided_composition():
    # geometric flow: spacing 0.04 at the finest level, refined jointly with the step
    seeds = range(16)
    geo = [_composition(C.geometric(0.5), 0.5, 2.0, (10, 19, 38), fine_ladder(1, s)) for s in seeds]
    L = np.array([g[0] for g in geo])
    R = np.array([g[1] for g in geo])
    geo_ok = (
        L[:, -1].max() <= 5e-2 and R[:, -1].max() <= 5e-2
        and np.all(np.diff(L.mean(0)) < 0) and np.all(np.diff(R.mean(0)) < 0)
    )
    ladder = fine_ladder(20, 0)
    tl, tr = _composition(C.example46("tanh_a", a=1.5), -2.0, 2.0, (11, 21, 41), ladder)
    steps = [p.grid.dt for p in ladder]
    ol, orr = fit_order(steps, tl)[0], fit_order(steps, tr)[0]
    ok = bool(geo_ok) and ol >= 0.4 and orr >= 0.4
    report("two-sided composition", ok,
           f"geometric sup residuals at dt=1e-3, h=0.04: left {L[:, -1].max():.4f}, right {R[:, -1].max():.4f} "
           f"(<= 5e-2 on all {len(seeds)} paths); path-mean by level left {np.round(L.mean(0), 4).tolist()} "
           f"right {np.round(R.mean(0), 4).tolist()}; example46 orders left {ol:.2f}, right {orr:.2f} (>= 0.4)")


@pytest.mark.parametrize("name", ["example46_domain", "geometric_invert"])
def test_domain_monotonicity(name, tmp_path):
    cfg = load_config(CONFIGS / f"{name}.json", out=str(tmp_path))
    cset, res, inv, rep = _invert(cfg)
    record = stopping_record(cfg, res, inv, rep)
    previous = np.ones(len(res.field.grid.nodes), dtype=bool)
    violations, sizes = 0, []
    for knot in range(res.field.n_knots):
        mask, _ = estimate_domain(record, res.field, knot)
        violations += int(np.sum(mask & ~previous))
        sizes.append(int(mask.sum()))
        previous = mask
    code = main(["domain", "--config", str(CONFIGS / f"{name}.json"), "--out", str(tmp_path / "cli")])
    files = [tmp_path / "cli" / f"mask_t{t:g}.txt" for t in cfg.domain_times]
    masks = [np.array(list(f.read_text().replace("\n", "")), dtype=int) for f in files]
    file_violations = sum(int(np.sum(b > a)) for a, b in zip(masks, masks[1:]))
    ok = violations == 0 and file_violations == 0 and code == 0
    report(f"domain monotonicity ({name})", ok,
           f"{violations} inclusion violations over {len(sizes)} knots, {file_violations} across emitted masks; "
           f"|D| from {sizes[0]} to {sizes[-1]}")


def test_stopping_time_agreement():
    # one run with 100 replicas gives 100 exchangeable seeded paths from the same start
    n_paths = 100
    paths = sample_paths(TimeGrid(0, 1, 1000), n_paths, 1, 4646)
    res = simulate(C.example46("identity"), paths, SpatialGrid.single([0.5]), trace=n_paths)
    J = res.traces["J"][:, 0, :, 0, 0]
    exploded = res.traces["exploded"][:, 0]
    times = paths.grid.knots
    engine = [detect_rho(J[:, r, None, None], exploded[:, r]) for r in range(n_paths)]
    closed = [crossing_time(paths.knots[r, :, 0], times) for r in range(n_paths)]
    both = [(a, b) for a, b in zip(engine, closed) if a is not None and b is not None]
    close = sum(abs(a - b) <= 2 for a, b in both)
    concordant = sum(
        (a is None and b is None) or (a is not None and b is not None and abs(a - b) <= 2)
        for a, b in zip(engine, closed)
    )
    both_rate = close / len(both) if both else float("nan")
    ok = (not both or both_rate >= 0.95) and concordant >= 0.95 * n_paths
    note = "criterion vacuous: neither detector fires" if not both else f"{both_rate:.1%} within 2 knots"
    report("stopping-time agreement", ok,
           f"{len(both)} of {n_paths} paths where both fire ({note}); engine fired on "
           f"{sum(a is not None for a in engine)}, closed form on {sum(b is not None for b in closed)}; "
           f"concordance over all paths {concordant}/{n_paths} (>= 95%)")


def test_flow_regularity_moments(tmp_path):
    start = time.perf_counter()
    cfg = load_config(CONFIGS / "linear_w2.json", out=str(tmp_path))
    out = run_w2_check(cfg)
    elapsed = time.perf_counter() - start
    space, tslope = out.summary["space_slope"], out.summary["time_slope"]
    ok = abs(space - 2.0) <= 0.2 and tslope >= 0.45 and elapsed < 120
    report("flow-regularity moments", ok,
           f"mean-square vs offset slope {space:.3f} (2 +- 0.2); W2 vs lag slope {tslope:.3f} (>= 0.45) "
           f"over lags {cfg.w2['lags'][0]}..{cfg.w2['lags'][-1]} knots; runtime {elapsed:.1f}s (< 120s)")


def test_wasserstein_correctness():
    rng = np.random.default_rng(2)
    worst_1d = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 13))
        x, y = rng.normal(size=(n, 1)), rng.normal(size=(n, 1)) * 2 + 0.5
        a, b = EmpiricalMeasure(x), EmpiricalMeasure(y)
        worst_1d = max(worst_1d, abs(w2_1d(a, b) - w2_exact_small(a, b)))
    worst_brute = 0.0
    for n in range(1, 7):
        for d in (1, 2, 3):
            x, y = rng.normal(size=(n, d)), rng.normal(size=(n, d))
            worst_brute = max(worst_brute, abs(w2_exact_small(EmpiricalMeasure(x), EmpiricalMeasure(y)) - brute_force_w2(x, y)))
    ok = worst_1d <= 1e-12 and worst_brute <= 1e-12
    report("Wasserstein correctness", ok,
           f"max |w2_1d - w2_exact_small| = {worst_1d:.2g} on 100 instances (N <= 12); "
           f"max gap to exhaustive couplings = {worst_brute:.2g} (N <= 6, d <= 3)")


def test_determinism(tmp_path):
    mismatched, compared = [], 0
    for path in sorted(CONFIGS.glob("*.json")):
        experiment = json.loads(path.read_text())["experiment"]
        runs = []
        for threads in ("1", "4"):
            out = tmp_path / f"{path.stem}-{threads}"
            assert main([experiment, "--config", str(path), "--out", str(out), "--threads", threads]) == 0
            runs.append(out)
        names = sorted(p.name for p in runs[0].iterdir() if p.name != "manifest.json")
        for name in names:
            compared += 1
            if (runs[0] / name).read_bytes() != (runs[1] / name).read_bytes():
                mismatched.append(f"{path.stem}/{name}")
        digests = [json.loads((r / "manifest.json").read_text())["files"] for r in runs]
        if digests[0] != digests[1]:
            mismatched.append(f"{path.stem}/manifest digests")
    report("determinism", not mismatched,
           f"{compared} output files from every subcommand compared across --threads 1 and 4; "
           f"mismatches: {mismatched or 'none'}")
