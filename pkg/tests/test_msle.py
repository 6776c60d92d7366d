import numpy as np
import pytest
from scipy import integrate

from npinteq.core_types import GridFunction, distance
from npinteq.icens import IcSample, ObservationModel, fit_mle_case2
from npinteq.msle import (K_SQUARED, MU2, KernelSpec, SmoothedDensities, _constrained_maximum,
                          _equation, asymptotic_bias_variance, bias_variance_record,
                          boundary_coefficients, fit_msle, msle_grid, population_densities,
                          sigma1, smooth_densities, toy_linearized, triweight)
from npinteq.simulate import gen_interval_censored, replication_rng

from conftest import quadratic, uniform

TRI = ObservationModel.uniform_triangle(0.1)


def test_triweight_moments():
    assert integrate.quad(triweight, -1, 1)[0] == pytest.approx(1.0, abs=1e-14)
    assert integrate.quad(lambda u: u * u * triweight(u), -1, 1)[0] == pytest.approx(1 / 9, abs=1e-14)
    assert integrate.quad(lambda u: triweight(u) ** 2, -1, 1)[0] == pytest.approx(350 / 429, abs=1e-14)
    assert MU2 == pytest.approx(1 / 9) and K_SQUARED == pytest.approx(350 / 429)
    assert triweight(0.0) == 35 / 32 and triweight(1.2) == 0.0


def test_boundary_coefficients():
    a, b = boundary_coefficients(1.0)
    assert a == pytest.approx(1.0, abs=1e-14) and b == pytest.approx(0.0, abs=1e-14)
    for alpha in (-0.5, 0.0, 0.4):
        a, b = boundary_coefficients(alpha)
        k = lambda u: (a + b * u) * triweight(u)
        assert integrate.quad(k, -1, alpha)[0] == pytest.approx(1.0, abs=1e-10)
        assert integrate.quad(lambda u: u * k(u), -1, alpha)[0] == pytest.approx(0.0, abs=1e-10)


def test_kernel_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec(0.0)
    assert KernelSpec.default(1000).bandwidth == pytest.approx(1000 ** -0.2)
    one = IcSample([0.5], [0.9], [1], [0])
    with pytest.raises(ValueError):
        smooth_densities(one, KernelSpec(0.6), TRI)


def test_single_observation_peak():
    sm = smooth_densities(IcSample([0.5], [0.9], [1], [0]), KernelSpec(0.2), TRI, 200)
    i = int(np.argmin(np.abs(sm.grid - 0.5)))
    assert sm.grid[i] == pytest.approx(0.5, abs=1e-14)
    assert sm.h1.values[i] == pytest.approx(5.46875, rel=1e-12)
    far = int(np.argmin(np.abs(sm.grid - 0.1)))
    assert sm.h1.values[far] == 0.0


def test_smoothed_mass_matches_proportions(rng):
    s = gen_interval_censored(400, uniform, TRI, rng)
    sm = smooth_densities(s, KernelSpec.default(400), TRI, 200)
    assert np.trapezoid(sm.h1.values, sm.grid) == pytest.approx(s.d1.mean(), abs=2e-2)
    assert sm.mass == pytest.approx(1.0, abs=2e-2)
    assert sm.h1.values.min() >= 0 and sm.h2d.min() >= 0


def test_interior_data_integrate_exactly():
    kernel = KernelSpec(0.1)
    t = np.array([0.3, 0.45, 0.6])
    d1 = np.array([1.0, 0.0, 1.0])
    h1 = lambda x: float(kernel.weights([x], t)[0] @ d1) / 3
    mass = integrate.quad(h1, 0, 1, points=[0.2, 0.35, 0.4, 0.5, 0.55, 0.7], epsabs=1e-13)[0]
    assert mass == pytest.approx(2 / 3, abs=1e-10)


def test_grid_spacing_divides_epsilon():
    g = msle_grid(ObservationModel.uniform_triangle(0.15), 200)
    k = 0.15 / (g[1] - g[0])
    assert abs(k - round(k)) < 1e-9
    with pytest.raises(ValueError):
        msle_grid(ObservationModel.uniform_triangle(0.0), 100)


@pytest.mark.parametrize("F0", [uniform, quadratic])
def test_population_fixed_point(F0):
    pop = population_densities(TRI, F0, 200)
    F, info = fit_msle(pop, tol=1e-12, full_output=True)
    assert np.max(np.abs(F.values - F0(pop.grid))) < 1e-6
    assert info.residual < 1e-12 and info.method == "fixed_point"


def test_zero_bivariate_part_reduces_to_ratio():
    pop = population_densities(TRI, quadratic, 200)
    sm = SmoothedDensities(pop.grid, pop.h1, pop.h2, np.zeros_like(pop.h2d), pop.epsilon,
                           pop.g1, pop.g2)
    F = fit_msle(sm, tol=1e-12)
    inner = slice(1, -1)
    ratio = pop.h1.values[inner] / (pop.h1.values[inner] + pop.h2.values[inner])
    assert np.max(np.abs(F.values[inner] - ratio)) < 1e-9


def test_fit_residual_below_tol(rng):
    s = gen_interval_censored(1000, quadratic, TRI, rng)
    sm = smooth_densities(s, KernelSpec.default(1000), TRI, 200)
    F, info = fit_msle(sm, tol=1e-10, full_output=True)
    assert info.residual < 1e-10
    assert np.max(np.abs(_equation(sm).residual(F.values))) < 1e-10


def test_constrained_maximum_agrees_with_fixed_point(rng):
    s = gen_interval_censored(500, quadratic, TRI, rng)
    sm = smooth_densities(s, KernelSpec.default(500), TRI, 100)
    F, info = fit_msle(sm, tol=1e-10, full_output=True)
    assert info.monotone_violations == 0
    G, _ = _constrained_maximum(_equation(sm), F.values, 1e-12, 2000)
    assert np.max(np.abs(G - F.values)) < 1e-8


def test_msle_beats_mle_in_sup_distance():
    x = np.linspace(0, 1, 4001)
    wins = 0
    for r in range(100):
        s = gen_interval_censored(1000, quadratic, TRI, replication_rng(5, r))
        mle = fit_mle_case2(s, tol=1e-10)
        msle = fit_msle(smooth_densities(s, KernelSpec.default(1000), TRI, 200))
        wins += np.max(np.abs(msle(x) - quadratic(x))) < distance(mle, quadratic)
    assert wins >= 80


# --- toy estimator and asymptotics -------------------------------------------

def test_toy_equals_truth_on_population():
    pop = population_densities(TRI, quadratic, 200)
    for t in (0.3, 0.5, 0.7):
        assert toy_linearized(pop, TRI, quadratic, t) == pytest.approx(quadratic(t), abs=1e-10)
    with pytest.raises(ValueError):
        toy_linearized(pop, TRI, quadratic, 0.5003)


def test_toy_is_linear_in_h1():
    pop = population_densities(TRI, uniform, 200)
    delta = 0.05
    bumped = SmoothedDensities(pop.grid, GridFunction(pop.grid, pop.h1.values + delta * pop.g1),
                               pop.h2, pop.h2d, pop.epsilon, pop.g1, pop.g2)
    t = 0.5
    shift = toy_linearized(bumped, TRI, uniform, t) - toy_linearized(pop, TRI, uniform, t)
    den = TRI.g1(t) * 0.5 + TRI.g2(t) * 0.5
    assert shift == pytest.approx(delta * TRI.g1(t) * 0.5 / den / sigma1(t, TRI), rel=1e-10)


def test_sigma1_two_ways():
    closed = sigma1(0.5, TRI)
    quad = sigma1(0.5, TRI, uniform)
    d = 0.25 / (TRI.g1(0.5) * 0.5 + TRI.g2(0.5) * 0.5)
    assert closed == pytest.approx(1 + d * 2 * 2 * np.log(5.0) / 0.81, abs=1e-12)
    assert quad == pytest.approx(closed, abs=1e-8)


def test_bias_variance_values():
    beta, s1, var = asymptotic_bias_variance(0.5, TRI)
    assert np.isfinite(beta)
    near, _, _ = asymptotic_bias_variance(0.501, TRI)
    assert abs(near - beta) < 1e-2
    assert var == pytest.approx(TRI.d(uniform, 0.5) * 350 / 429 / s1, rel=1e-12)
    with pytest.raises(ValueError):
        asymptotic_bias_variance(1.0, TRI)
    assert bias_variance_record(0.5, 1.0, 2.0, 3.0) == "0.5,1.0,2.0,3.0"
