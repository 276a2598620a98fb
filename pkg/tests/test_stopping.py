import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvflow.errors import CapabilityError
from mvflow.flow import FlowField
from mvflow.grid import SpatialGrid
from mvflow.stopping import (
    StoppingRecord,
    detect_rho,
    detect_tau_n,
    detect_theta,
    estimate_domain,
    mask_raster,
    rho_per_point,
    tau_monitor,
)


def make_field(grid, X, J):
    """A flow field with only the map and Jacobian filled in."""
    K, G, d = X.shape
    return FlowField(
        grid=grid,
        times=np.linspace(0, 1, K),
        dW=np.zeros((K - 1, 1)),
        X=X,
        J=J,
        V=np.zeros_like(J),
        v_alive=np.ones((K, G), dtype=bool),
        v_exploded=np.zeros((K, G), dtype=bool),
        vj_residual=np.zeros((K, G)),
        mean_J=J.copy(),
        se_J=np.zeros_like(J),
        law_stats=None,
        jac_stats=None,
        mean_field=None,
    )


def scalar_field(j_series, n_points=9):
    grid = SpatialGrid((-1.0,), (1.0,), (n_points,))
    K = len(j_series)
    X = np.broadcast_to(grid.nodes, (K, n_points, 1)).copy()
    J = np.broadcast_to(np.asarray(j_series, float)[:, None, None, None], (K, n_points, 1, 1)).copy()
    return make_field(grid, X, J)


# --- theta ---------------------------------------------------------------------


@pytest.mark.parametrize("m", [2.0, 4.9, 5.1, 10.0])
def test_theta_on_decaying_jacobian(m):
    t = np.linspace(0, 1, 101)
    j = np.exp(np.log(0.2) * t)  # |J^{-1}| rises from 1 to 5
    hit = detect_theta(scalar_field(j), m)
    if m < 5:
        assert hit == int(np.argmax(1 / j > m))
    else:
        assert hit is None


@given(st.lists(st.floats(0.01, 3.0), min_size=2, max_size=30), st.floats(1.0, 50.0), st.floats(0.0, 50.0))
@settings(max_examples=50, deadline=None)
def test_theta_monotone_in_threshold(j, m, extra):
    field = scalar_field(np.array(j), n_points=2)
    lo, hi = detect_theta(field, m), detect_theta(field, m + extra)
    K = len(j)
    assert (K if lo is None else lo) <= (K if hi is None else hi)


# --- tau_n -----------------------------------------------------------------------


def test_tau_monitor_for_identity_and_affine_maps():
    grid = SpatialGrid((-2.0,), (2.0,), (11,))
    K = 5
    X = np.broadcast_to(grid.nodes, (K, 11, 1)).copy()
    J = np.ones((K, 11, 1, 1))
    np.testing.assert_allclose(tau_monitor(make_field(grid, X, J)), 2.0, atol=1e-12)
    slope = np.linspace(1, 3, K)[:, None, None]
    X2 = slope * X + 0.5
    J2 = np.broadcast_to(slope[..., None], (K, 11, 1, 1)).copy()
    mon = tau_monitor(make_field(grid, X2, J2))
    np.testing.assert_allclose(mon, np.maximum(2 * slope[:, 0, 0] + 0.5, slope[:, 0, 0]), atol=1e-10)
    assert detect_tau_n(make_field(grid, X2, J2), 4.0) == 2
    assert detect_tau_n(make_field(grid, X2, J2), 100.0) is None


def test_tau_monitor_sees_curvature():
    grid = SpatialGrid((-1.0,), (1.0,), (41,))
    x = grid.nodes
    X = np.stack([x, x + 5 * x**3])
    J = np.stack([np.ones_like(x), 1 + 15 * x**2])[..., None]
    mon = tau_monitor(make_field(grid, X, J))
    # the third derivative of 5 x^3 is 30, second derivative peaks near 30 on the interior
    assert mon[0] == pytest.approx(1.0)
    assert 29 < mon[1] < 31.5


def test_tau_monitor_needs_enough_points():
    with pytest.raises(CapabilityError):
        tau_monitor(scalar_field(np.ones(3), n_points=5))
    with pytest.raises(CapabilityError):
        tau_monitor(scalar_field(np.ones(3), n_points=1))


def test_tau_n_monotone_in_level():
    grid = SpatialGrid((-1.0,), (1.0,), (9,))
    K = 30
    growth = np.exp(np.linspace(0, 4, K))[:, None, None]
    X = growth * grid.nodes[None]
    J = np.broadcast_to(growth[..., None], (K, 9, 1, 1)).copy()
    field = make_field(grid, X, J)
    mon = tau_monitor(field)
    hits = [detect_tau_n(field, n, mon) for n in (2.0, 10.0, 40.0, 1e3)]
    as_int = [K if h is None else h for h in hits]
    assert as_int == sorted(as_int) and hits[-1] is None


# --- rho ---------------------------------------------------------------------------


def test_rho_reports_first_knot_after_sign_change():
    k = np.arange(101)
    J = (1 - k / 41.5)[:, None, None]
    assert J[41, 0, 0] > 0 > J[42, 0, 0]
    assert detect_rho(J) == 42


def test_rho_reports_only_first_failure():
    J = np.ones((20, 1, 1))
    J[5] = -1.0
    J[12] = 0.0
    assert detect_rho(J) == 5


def test_rho_identity_never_hits_and_ignores_start():
    J = np.broadcast_to(np.eye(2), (50, 2, 2))
    assert detect_rho(J) is None
    flags = np.zeros(50, dtype=bool)
    flags[0] = True
    assert detect_rho(J, flags) is None
    flags[7] = True
    assert detect_rho(J, flags) == 7


def test_rho_signed_criterion_in_two_dimensions():
    good = np.array([[2.0, 0.0], [0.0, 0.5]])
    flipped = np.array([[0.0, 1.0], [1.0, 0.0]])  # det = -1, orientation lost
    tiny = np.array([[1.0, 0.0], [0.0, 1e-14]])
    assert detect_rho(np.stack([np.eye(2), good, flipped])) == 2
    assert detect_rho(np.stack([np.eye(2), good, tiny])) == 2


def test_rho_per_point():
    field = scalar_field(np.linspace(1, -1, 11), n_points=3)
    field.J[:, 1] = 1.0
    out = rho_per_point(field)
    assert out.tolist() == [5, 11, 5]


# --- domains -------------------------------------------------------------------------


@given(st.lists(st.integers(0, 12), min_size=1, max_size=40))
@settings(max_examples=60, deadline=None)
def test_domain_masks_shrink(taus):
    K = 12
    tau = np.array(taus)
    rec = StoppingRecord(K, {}, {}, tau, {}, tau, tau, tau)
    grid = SpatialGrid((0.0,), (1.0,), (len(tau),))
    X = np.broadcast_to(grid.nodes, (K, len(tau), 1)).copy()
    field = make_field(grid, X, np.ones((K, len(tau), 1, 1)))
    previous = np.ones(len(tau), dtype=bool)
    for knot in range(K):
        mask, images = estimate_domain(rec, field, knot)
        assert not np.any(mask & ~previous)
        assert len(images) == mask.sum()
        previous = mask


def test_mask_raster_layout():
    mask = np.array([True, False, True, True, False, False])
    assert mask_raster(mask, (2, 3)) == "101\n100\n"
    assert mask_raster(mask, (6,)) == "101100\n"


def test_record_rows_use_dash_for_not_hit():
    K = 10
    rec = StoppingRecord(
        K, {2.0: None}, {}, np.array([3, K]), {2.0: np.array([K, 4])},
        np.array([K, 4]), np.array([2, K]), np.array([2, 4]),
    )
    rows = rec.rows(np.array([[0.0], [1.0]]))
    assert rows[0]["rho"] == 3 and rows[1]["rho"] == "-"
    assert rows[0]["tau_bar_m2"] == "-" and rows[1]["tau"] == 4
