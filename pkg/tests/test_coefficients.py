import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvflow import coefficients as C
from mvflow.coefficients import Coefficient, MomentFormSpec, Outer
from mvflow.errors import ConfigurationError, ProbeError
from mvflow.measure import EmpiricalMeasure


def scalar_coefficient(v, v_x, v_mu=None, measure_free=False):
    """Generic 1-D coefficient V(x, mu) = v(x, mean(mu)) with Lions derivative v_mu(x, m, y)."""

    def mean(atoms):
        return atoms.mean(axis=1)[:, None, :]

    def value(x, atoms):
        return np.asarray(v(x, mean(atoms)), dtype=float) + 0 * x

    def dx(x, atoms):
        return (np.asarray(v_x(x, mean(atoms)), dtype=float) + 0 * x)[..., None]

    def dmu(x, atoms, y):
        B, P, _ = x.shape
        if v_mu is None:
            return np.zeros((B, P, y.shape[1], 1, 1))
        m = mean(atoms)[:, :, None, :]
        return np.asarray(v_mu(x[:, :, None, :], m, y[:, None, :, :]), dtype=float)[..., None] + np.zeros((B, P, y.shape[1], 1, 1))

    return Coefficient(value, dx, dmu, measure_free=measure_free)


def mean_squared_set():
    """V_0(x, mu) = (int z dmu)^2 in moment form, no noise."""
    stats, grad = C._identity_stats(1)
    outer = Outer(
        v=lambda x, m: m**2 + 0 * x,
        v_x=lambda x, m: np.zeros(np.broadcast_shapes(x.shape, m.shape) + (1,)),
        v_m=lambda x, m: (2 * m + 0 * x)[..., None],
    )
    return C.make_moment_coeffs(MomentFormSpec(1, 1, stats, grad, outer, ()))


# --- Stratonovich to Itô ----------------------------------------------------


def test_constant_diffusion_gives_no_correction():
    zero = scalar_coefficient(lambda x, m: 0 * x, lambda x, m: 0 * x, measure_free=True)
    const = scalar_coefficient(lambda x, m: 0 * x + 0.7, lambda x, m: 0 * x, measure_free=True)
    cset = C.strat_to_ito(zero, [const, const], dim_state=1)
    x = np.linspace(-2, 2, 9).reshape(1, -1, 1)
    assert np.all(cset.drift.value(x, np.zeros((1, 3, 1))) == 0.0)
    assert cset.convention == "stratonovich_converted"


def test_linear_diffusion_gives_half_x():
    zero = scalar_coefficient(lambda x, m: 0 * x, lambda x, m: 0 * x, measure_free=True)
    ident = scalar_coefficient(lambda x, m: x, lambda x, m: 1 + 0 * x, measure_free=True)
    cset = C.strat_to_ito(zero, [ident], dim_state=1)
    x = np.linspace(-2, 2, 9).reshape(1, -1, 1)
    np.testing.assert_allclose(cset.drift.value(x, np.zeros((1, 1, 1))), x / 2, rtol=0, atol=1e-15)


def test_sine_example_spot_value_and_finite_difference():
    raw0 = scalar_coefficient(lambda x, m: m + 0 * x, lambda x, m: 0 * x, lambda x, m, y: 1 + 0 * (x + y))
    sine = scalar_coefficient(lambda x, m: np.sin(x), lambda x, m: np.cos(x), measure_free=True)
    cset = C.strat_to_ito(raw0, [sine], dim_state=1)
    dirac_one = EmpiricalMeasure.dirac(1.0)
    assert cset.drift.at(0.0, dirac_one)[0] == pytest.approx(1.0, abs=1e-15)
    # independent check: correction from a central difference of V_1
    for x in (-1.3, 0.4, 2.2):
        h = 1e-6
        dv = (np.sin(x + h) - np.sin(x - h)) / (2 * h)
        expected = 1.0 + 0.5 * dv * np.sin(x)
        assert cset.drift.at(x, dirac_one)[0] == pytest.approx(expected, abs=1e-9)


def test_dimension_mismatch_rejected():
    bad = Coefficient(
        value=lambda x, atoms: np.zeros(x.shape[:-1] + (2,)),
        dx=lambda x, atoms: np.zeros(x.shape + (1,)),
        dmu=lambda x, atoms, v: np.zeros(x.shape[:2] + (v.shape[1], 1, 1)),
    )
    ok = scalar_coefficient(lambda x, m: x, lambda x, m: 1 + 0 * x)
    with pytest.raises(ConfigurationError, match="V_1"):
        C.strat_to_ito(ok, [bad], dim_state=1)


@settings(max_examples=50, deadline=None)
@given(
    st.floats(-3, 3), st.floats(-3, 3),
    st.floats(0.1, 2), st.floats(-1, 1), st.floats(-1, 1),
)
def test_strat_sine_correction_holds_pointwise(x, m, alpha, beta, gamma):
    cset = C.strat_sine(alpha, beta, gamma)
    atoms = np.array([[[m]]])
    xb = np.array([[[x]]])
    diff = cset.drift.value(xb, atoms) - cset.raw_drift.value(xb, atoms)
    expected = 0.5 * beta * np.cos(x) * (beta * np.sin(x) + gamma * m)
    assert diff[0, 0, 0] == pytest.approx(expected, abs=1e-14)


def test_converted_derivatives_match_finite_differences():
    cset = C.strat_sine(1.0, 0.8, 0.6)
    mu = EmpiricalMeasure([[0.2], [0.9], [-0.4]])
    for x in (-1.0, 0.3, 1.7):
        h = 1e-6
        fd = (cset.drift.at(x + h, mu) - cset.drift.at(x - h, mu)) / (2 * h)
        assert cset.drift.dx_at(x, mu)[0, 0] == pytest.approx(fd[0], abs=1e-8)
        probe = C.verify_lions_derivative(cset, mu, x, lambda z: np.ones_like(z), 1e-6)
        assert probe.discrepancy < 1e-7


# --- moment form ------------------------------------------------------------


@pytest.mark.parametrize("f", ["identity", "tanh_a"])
def test_example46_derivatives(f):
    cset = C.example46(f, a=1.3)
    mu = EmpiricalMeasure([[-0.5], [0.1], [1.2]])
    for x in (-1.0, 0.0, 0.8):
        fprime = 1.0 if f == "identity" else 1.3 / np.cosh(1.3 * x) ** 2
        assert cset.drift.dx_at(x, mu)[0, 0] == pytest.approx(fprime, abs=1e-15)
        assert cset.diffusion[0].dx_at(x, mu)[0, 0] == 1.0
        for y in (-2.0, 0.5, 3.0):
            assert cset.drift.dmu_at(x, mu, y)[0, 0] == -1.0
            assert cset.diffusion[0].dmu_at(x, mu, y)[0, 0] == -1.0


def test_measure_free_dmu_is_exact_zero():
    cset = C.geometric(0.5)
    atoms = np.random.default_rng(0).normal(size=(2, 5, 1))
    x = np.ones((2, 3, 1))
    for c in cset.fields:
        out = c.dmu(x, atoms, atoms)
        assert out.shape == (2, 3, 5, 1, 1)
        assert np.all(out == 0.0)


def test_mean_field_fast_path_matches_generic_route():
    cset = C.moment_linear([[0.3, -0.1], [0.2, -0.4]], [[0.5, 0.1], [-0.2, 0.3]],
                           C=[[[0.1, 0.0], [0.0, 0.2]]], D=[[[0.3, -0.1], [0.0, 0.4]]])
    rng = np.random.default_rng(1)
    atoms = rng.normal(size=(3, 6, 2))
    jac = rng.normal(size=(3, 6, 2, 2))
    for coeff in cset.fields:
        generic = Coefficient.mean_field(coeff, atoms, atoms, jac, chunk=4)
        np.testing.assert_allclose(coeff.mean_field(atoms, atoms, jac), generic, atol=1e-14)


# --- Lions derivative probe ---------------------------------------------------


def test_lions_probe_exact_for_linear_functional():
    cset = C.example46("identity")
    mu = EmpiricalMeasure([[0.0], [1.0], [5.0]])
    for g in (lambda z: np.ones_like(z), lambda z: z**2):
        probe = C.verify_lions_derivative(cset, mu, 0.3, g, 1e-3, k=1)
        assert probe.discrepancy <= 10 * np.finfo(float).eps * 100


def test_lions_probe_mean_squared_decays_linearly():
    cset = mean_squared_set()
    mu = EmpiricalMeasure([[0.0], [2.0]])
    eps = np.array([1e-2, 1e-3, 1e-4])
    errs = []
    for e in eps:
        probe = C.verify_lions_derivative(cset, mu, 0.0, lambda z: np.ones_like(z), e)
        assert probe.pairing[0] == pytest.approx(2.0, abs=1e-15)
        errs.append(probe.discrepancy)
    assert errs[-1] <= 1e-3
    slope = np.polyfit(np.log10(eps), np.log10(errs), 1)[0]
    assert abs(slope - 1.0) <= 0.2


def test_lions_probe_measure_free_is_zero():
    probe = C.verify_lions_derivative(C.geometric(0.5), EmpiricalMeasure([[0.1], [0.2]]), 0.4,
                                      lambda z: z, 1e-3, k=1)
    assert probe.discrepancy == 0.0


def test_lions_probe_reports_offending_atom():
    raw = scalar_coefficient(lambda x, m: 0 * x, lambda x, m: 0 * x, lambda x, m, y: np.log(y))
    cset = C.CoefficientSet(1, 0, raw, ())
    with np.errstate(all="ignore"), pytest.raises(ProbeError, match="atom 1"):
        C.verify_lions_derivative(cset, EmpiricalMeasure([[1.0], [-1.0]]), 0.0, lambda z: z, 1e-3)


def test_lions_probe_needs_two_atoms():
    with pytest.raises(ConfigurationError):
        C.verify_lions_derivative(C.example46(), EmpiricalMeasure.dirac(0.0), 0.0, lambda z: z, 1e-3)


# --- assumption probe ---------------------------------------------------------


def _measures():
    return [EmpiricalMeasure.dirac(0.0), EmpiricalMeasure([[-1.0], [1.0]]), EmpiricalMeasure([[0.5], [2.0]])]


def test_probe_example46_identity_bound_is_one():
    report = C.probe_assumption(C.example46("identity"), [-1.0, 0.0, 1.5], _measures())
    assert report.dx_bound == [1.0, 1.0]
    assert report.dmu_bound == [1.0, 1.0]
    assert report.dx_lipschitz == [0.0, 0.0] and report.dmu_lipschitz == [0.0, 0.0]
    assert report.estimated_bound == 1.0 and not report.violations


def test_probe_constant_coefficients_all_zero():
    const = scalar_coefficient(lambda x, m: 0 * x + 2.0, lambda x, m: 0 * x, measure_free=True)
    report = C.probe_assumption(C.CoefficientSet(1, 1, const, (const,)), [-1.0, 1.0], _measures())
    assert report.estimated_bound == 0.0


def test_probe_sine_derivative_bound():
    sine = scalar_coefficient(lambda x, m: np.sin(x), lambda x, m: np.cos(x), measure_free=True)
    zero = scalar_coefficient(lambda x, m: 0 * x, lambda x, m: 0 * x, measure_free=True)
    points = [-0.8, -0.2, 0.5, 0.9]
    report = C.probe_assumption(C.CoefficientSet(1, 1, zero, (sine,)), points, _measures())
    assert np.cos(max(np.abs(points))) <= report.dx_bound[1] <= 1.0


def test_probe_warns_but_does_not_raise():
    cset = C._replace(C.moment_linear([[3.0]]), lipschitz_bound=1.0)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = C.probe_assumption(cset, [0.0, 1.0], _measures())
    assert report.violations and any("exceeds" in str(w.message) for w in caught)
    assert report.rows()[0]["sup_dx"] == 3.0


# --- registry -----------------------------------------------------------------


def test_build_family_unknown_name_has_field_path():
    with pytest.raises(ConfigurationError, match="family.name"):
        C.build_family("nope")


def test_build_family_bad_params_has_field_path():
    with pytest.raises(ConfigurationError, match="family.params"):
        C.build_family("geometric", {"sigma": 1.0})


def test_custom_registry_round_trip():
    @C.register("test-ou")
    def ou(theta: float = 1.0):
        return C.moment_linear([[-theta]], None, [[[0.0]]], E=[[1.0]])

    cset = C.build_family("custom", {"key": "test-ou", "theta": 2.0})
    assert cset.drift.at(1.0, EmpiricalMeasure.dirac(0.0))[0] == -2.0
    with pytest.raises(ConfigurationError, match="family.params.key"):
        C.build_family("custom", {"key": "missing"})
