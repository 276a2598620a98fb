"""Forward simulation of the McKean-Vlasov flow and its Jacobians.

For every initial grid point an ensemble of M replicas is driven by the
same M Brownian paths (common across grid points); the law of the state
at that grid point is the empirical measure of its replicas, and the
independent-copy expectation in the variational equations is the replica
average, self included. Replica 0 is the "physical" path whose map
x -> Phi_t(x) is stored for the stopping and inverse-flow modules.

All updates in a step read the frozen step-start ensemble, and replica
averages use a fixed summation order, so results do not depend on how
grid points are split across workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .coefficients import CoefficientSet, matmul, replica_mean
from .errors import ConfigurationError, NumericalFailure
from .grid import SpatialGrid
from .measure import EmpiricalMeasure
from .paths import BrownianPaths

DIVERGENCE_LIMIT = 0.01
PHYSICAL = 0


@dataclass
class Ensemble:
    """Replica states for a batch of initial points.

    Arrays are indexed ``[grid point, replica, ...]``. ``v_alive`` is
    False once a replica's inverse-Jacobian propagation has been frozen;
    ``v_exploded`` marks freezes caused by a non-finite update.
    """

    initial: np.ndarray
    X: np.ndarray
    J: np.ndarray
    V: np.ndarray
    v_alive: np.ndarray
    v_exploded: np.ndarray
    diverged: np.ndarray

    @classmethod
    def start(cls, initial, n_replicas: int) -> Ensemble:
        initial = np.atleast_2d(np.asarray(initial, dtype=float))
        G, d = initial.shape
        X = np.repeat(initial[:, None, :], n_replicas, axis=1)
        eye = np.broadcast_to(np.eye(d), (G, n_replicas, d, d))
        flags = np.zeros((G, n_replicas), dtype=bool)
        return cls(initial, X, eye.copy(), eye.copy(), ~flags, flags.copy(), flags.copy())

    @property
    def n_replicas(self) -> int:
        return self.X.shape[1]

    @property
    def dim(self) -> int:
        return self.X.shape[2]

    def law(self, g: int = 0) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.X[g])

    def slice(self, sl: slice) -> Ensemble:
        return Ensemble(*(getattr(self, f)[sl] for f in
                          ("initial", "X", "J", "V", "v_alive", "v_exploded", "diverged")))


@dataclass
class StepCoefficients:
    """Coefficient values and Jacobian brackets at the start of a step.

    ``brackets[k] = dx V_k(X_i) J_i + (1/M) sum_j dmu V_k(X_i, law, X_j) J_j``.
    ``mean_field[k]`` is the second term alone; ``law_stats`` and
    ``jac_stats`` are the moment fields for moment-form sets.
    """

    values: list[np.ndarray]
    brackets: list[np.ndarray]
    mean_field: list[np.ndarray]
    law_stats: np.ndarray | None = None
    jac_stats: np.ndarray | None = None


def evaluate(ens: Ensemble, cset: CoefficientSet) -> StepCoefficients:
    X, J = ens.X, ens.J
    if cset.moment is not None:
        spec = cset.moment
        m = spec.law_stats(X)
        n_jac = spec.jacobian_stats(X, J)
        mb = m[:, None, :]
        values, brackets, mfs = [], [], []
        for outer, coeff in zip(spec.outers, cset.fields):
            values.append(np.broadcast_to(outer.v(X, mb), X.shape))
            dx = np.broadcast_to(outer.v_x(X, mb), J.shape)
            if coeff.measure_free:
                mf = np.zeros(J.shape)
            else:
                vm = outer.v_m(X, mb)
                mf = np.einsum("gpia,gal->gpil", np.broadcast_to(vm, X.shape + (spec.n_stats,)), n_jac)
            mfs.append(mf)
            brackets.append(matmul(dx, J) + mf)
        return StepCoefficients(values, brackets, mfs, m, n_jac)
    values, brackets, mfs = [], [], []
    for coeff in cset.fields:
        values.append(coeff.value(X, X))
        mf = coeff.mean_field(X, X, J)
        mfs.append(mf)
        brackets.append(matmul(coeff.dx(X, X), J) + mf)
    return StepCoefficients(values, brackets, mfs)


def _noise(dW: np.ndarray, k: int) -> np.ndarray:
    # dW has shape (M, d'); broadcast over grid points and vector axes
    return dW[None, :, k, None]


def step_state(
    ens: Ensemble,
    cset: CoefficientSet,
    dW: np.ndarray,
    dt: float,
    coeffs: StepCoefficients | None = None,
    scheme: str = "euler",
) -> np.ndarray:
    """Return next states; ``dW`` holds this step's increments, shape (M, d').

    ``scheme="euler"`` is Euler-Maruyama on the Itô form.
    ``scheme="heun"`` is the Stratonovich predictor-corrector on the raw
    (Stratonovich) coefficients.
    """
    c = coeffs if coeffs is not None else evaluate(ens, cset)
    if scheme == "euler":
        X = ens.X + c.values[0] * dt
        for k in range(cset.dim_noise):
            X = X + c.values[k + 1] * _noise(dW, k)
        return X
    if scheme != "heun":
        raise ConfigurationError(f"unknown scheme {scheme!r}")
    a0 = cset.strat_drift(ens.X, ens.X)
    pred = ens.X + a0 * dt
    for k in range(cset.dim_noise):
        pred = pred + c.values[k + 1] * _noise(dW, k)
    X = ens.X + 0.5 * (a0 + cset.strat_drift(pred, pred)) * dt
    for k, coeff in enumerate(cset.diffusion):
        X = X + 0.5 * (c.values[k + 1] + coeff.value(pred, pred)) * _noise(dW, k)
    return X


def step_jacobian(
    ens: Ensemble, cset: CoefficientSet, dW: np.ndarray, dt: float, coeffs: StepCoefficients | None = None
) -> np.ndarray:
    """Euler-Maruyama step of the variational equation for J = dx Phi."""
    c = coeffs if coeffs is not None else evaluate(ens, cset)
    J = ens.J + c.brackets[0] * dt
    for k in range(cset.dim_noise):
        J = J + c.brackets[k + 1] * _noise(dW, k)[..., None]
    return J


def step_inverse_jacobian(
    ens: Ensemble, cset: CoefficientSet, dW: np.ndarray, dt: float, coeffs: StepCoefficients | None = None
) -> np.ndarray:
    """Euler-Maruyama step of the inverse-Jacobian equation.

    In Itô form, with B_k the Jacobian brackets,
    dV = -V B_0 V dt - sum_k V B_k V dW^k + sum_k V B_k V B_k V dt.
    The last term is the Stratonovich correction; it follows from Itô's
    formula for the matrix inverse and needs no second derivatives.
    Frozen replicas (``v_alive`` False) keep their value.
    """
    c = coeffs if coeffs is not None else evaluate(ens, cset)
    V = ens.V
    gen = -matmul(V, c.brackets[0]) * dt
    for k in range(cset.dim_noise):
        Ck = matmul(V, c.brackets[k + 1])
        gen = gen - Ck * _noise(dW, k)[..., None] + matmul(Ck, Ck) * dt
    new = V + matmul(gen, V)
    return np.where(ens.v_alive[..., None, None], new, V)


@dataclass
class FlowField:
    """Stored physical-path map and law fields on the spatial grid.

    Time-series arrays are indexed ``[knot, grid point, ...]``.
    """

    grid: SpatialGrid
    times: np.ndarray
    dW: np.ndarray  # physical increments (n_steps, d')
    X: np.ndarray
    J: np.ndarray
    V: np.ndarray
    v_alive: np.ndarray
    v_exploded: np.ndarray
    vj_residual: np.ndarray  # |V J - I|_F on the physical path
    mean_J: np.ndarray
    se_J: np.ndarray
    law_stats: np.ndarray | None
    jac_stats: np.ndarray | None
    mean_field: np.ndarray | None  # (K, G, d'+1, d, d) physical-path mean-field terms
    cset_name: str = ""

    @property
    def n_knots(self) -> int:
        return len(self.times)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


@dataclass
class SimulationResult:
    field: FlowField
    final: Ensemble
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    traces: dict[str, np.ndarray] = field(default_factory=dict)
    vj_sup: np.ndarray | None = None  # per (grid point, replica) sup |VJ - I| while alive
    diverged_count: int = 0
    frozen_count: int = 0
    exploded_count: int = 0


def _run_chunk(cset, paths, ens, store, sl, m_freeze, snapshot_knots, trace, scheme):
    dt = paths.grid.dt
    inc = paths.increments
    n = paths.grid.n_steps
    G, M, d = ens.X.shape
    vj_sup = np.zeros((G, M))
    limit = int(np.floor(DIVERGENCE_LIMIT * M))
    eye = np.eye(d)

    def record(i, c):
        store["X"][i, sl] = ens.X[:, PHYSICAL]
        store["J"][i, sl] = ens.J[:, PHYSICAL]
        store["V"][i, sl] = ens.V[:, PHYSICAL]
        store["v_alive"][i, sl] = ens.v_alive[:, PHYSICAL]
        store["v_exploded"][i, sl] = ens.v_exploded[:, PHYSICAL]
        with np.errstate(over="ignore", invalid="ignore"):
            res = linalg.frobenius(matmul(ens.V, ens.J) - eye)
        store["vj"][i, sl] = res[:, PHYSICAL]
        np.maximum(vj_sup, np.where(ens.v_alive, res, 0.0), out=vj_sup)
        store["mean_J"][i, sl] = replica_mean(ens.J, axis=1)
        if M > 1:
            centred = ens.J - store["mean_J"][i, sl][:, None]
            with np.errstate(over="ignore", invalid="ignore"):
                var = replica_mean(centred * centred, axis=1) * M / (M - 1)
            store["se_J"][i, sl] = np.sqrt(var / M)
        if c.law_stats is not None:
            store["law_stats"][i, sl] = c.law_stats
            store["jac_stats"][i, sl] = c.jac_stats
        for k, mf in enumerate(c.mean_field):
            store["mean_field"][i, sl, k] = mf[:, PHYSICAL]
        if i in snapshot_knots:
            store["snapshots"][i][sl] = ens.X
        if trace:
            store["trace_J"][i, sl] = ens.J[:, :trace]
            store["trace_X"][i, sl] = ens.X[:, :trace]
            store["trace_exploded"][i, sl] = ens.v_exploded[:, :trace]

    c = evaluate(ens, cset)
    for i in range(n):
        record(i, c)
        dW = inc[:, i, :]
        # explosions are detected below, so silence the float warnings
        with np.errstate(over="ignore", invalid="ignore"):
            X = step_state(ens, cset, dW, dt, c, scheme)
            J = step_jacobian(ens, cset, dW, dt, c)
            V = step_inverse_jacobian(ens, cset, dW, dt, c)

        bad = ~(np.all(np.isfinite(X), axis=-1) & np.all(np.isfinite(J), axis=(-2, -1))) | ens.diverged
        if bad.any():
            counts = bad.sum(axis=1)
            if np.any(counts > limit):
                g = int(np.argmax(counts))
                raise NumericalFailure(
                    f"{int(counts[g])} of {M} replicas diverged at grid point {sl.start + g} by step {i + 1}"
                )
            X = np.where(bad[..., None], ens.X, X)
            J = np.where(bad[..., None, None], ens.J, J)
            V = np.where(bad[..., None, None], ens.V, V)
        exploded = ens.v_alive & ~np.all(np.isfinite(V), axis=(-2, -1))
        V = np.where(exploded[..., None, None], ens.V, V)
        alive = ens.v_alive & ~exploded & ~bad & (linalg.inverse_norm(J) <= m_freeze)
        ens = Ensemble(ens.initial, X, J, V, alive, ens.v_exploded | exploded, bad)
        with np.errstate(over="ignore", invalid="ignore"):
            c = evaluate(ens, cset)
    record(n, c)
    return ens, vj_sup


def simulate(
    cset: CoefficientSet,
    paths: BrownianPaths,
    grid: SpatialGrid,
    *,
    m_freeze: float = 50.0,
    snapshot_knots=(),
    trace: int = 0,
    threads: int = 1,
    scheme: str = "euler",
) -> SimulationResult:
    """Simulate the flow for every grid point against the same replica paths.

    ``m_freeze`` is the inverse-Jacobian threshold after which a replica's
    V is frozen. ``snapshot_knots`` selects knots at which all replica
    states are kept; ``trace`` keeps the full J and X series of the first
    ``trace`` replicas.
    """
    if grid.dim != cset.dim_state:
        raise ConfigurationError(f"grid dimension {grid.dim} does not match state dimension {cset.dim_state}")
    if paths.n_drivers != cset.dim_noise:
        raise ConfigurationError(f"paths carry {paths.n_drivers} drivers, coefficients need {cset.dim_noise}")
    M = paths.n_replicas
    trace = min(trace, M)
    nodes = grid.nodes
    G, d = nodes.shape
    K = paths.grid.n_steps + 1
    snapshot_knots = sorted({int(k) for k in snapshot_knots if 0 <= int(k) < K})
    n_stats = cset.moment.n_stats if cset.moment is not None else 0
    store = {
        "X": np.empty((K, G, d)),
        "J": np.empty((K, G, d, d)),
        "V": np.empty((K, G, d, d)),
        "v_alive": np.empty((K, G), dtype=bool),
        "v_exploded": np.empty((K, G), dtype=bool),
        "vj": np.empty((K, G)),
        "mean_J": np.empty((K, G, d, d)),
        "se_J": np.zeros((K, G, d, d)),
        "law_stats": np.empty((K, G, n_stats)),
        "jac_stats": np.empty((K, G, n_stats, d)),
        "mean_field": np.empty((K, G, cset.dim_noise + 1, d, d)),
        "snapshots": {k: np.empty((G, M, d)) for k in snapshot_knots},
    }
    if trace:
        store["trace_J"] = np.empty((K, G, trace, d, d))
        store["trace_X"] = np.empty((K, G, trace, d))
        store["trace_exploded"] = np.empty((K, G, trace), dtype=bool)

    full = Ensemble.start(nodes, M)
    bounds = np.linspace(0, G, max(1, min(threads, G)) + 1).astype(int)
    slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]

    def work(sl):
        return _run_chunk(cset, paths, full.slice(sl), store, sl, m_freeze, snapshot_knots, trace, scheme)

    if len(slices) == 1:
        results = [work(slices[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(slices)) as pool:
            results = list(pool.map(work, slices))

    final = Ensemble(*(np.concatenate([getattr(r[0], f) for r in results]) for f in
                       ("initial", "X", "J", "V", "v_alive", "v_exploded", "diverged")))
    vj_sup = np.concatenate([r[1] for r in results])
    flow_field = FlowField(
        grid=grid,
        times=paths.grid.knots,
        dW=paths.increments[PHYSICAL].copy(),
        X=store["X"],
        J=store["J"],
        V=store["V"],
        v_alive=store["v_alive"],
        v_exploded=store["v_exploded"],
        vj_residual=store["vj"],
        mean_J=store["mean_J"],
        se_J=store["se_J"],
        law_stats=store["law_stats"] if cset.moment is not None else None,
        jac_stats=store["jac_stats"] if cset.moment is not None else None,
        mean_field=store["mean_field"],
        cset_name=cset.name,
    )
    traces = {k[6:]: store[k] for k in ("trace_J", "trace_X", "trace_exploded") if k in store}
    return SimulationResult(
        field=flow_field,
        final=final,
        snapshots=store["snapshots"],
        traces=traces,
        vj_sup=vj_sup,
        diverged_count=int(final.diverged.sum()),
        frozen_count=int((~final.v_alive).sum()),
        exploded_count=int(final.v_exploded.sum()),
    )
