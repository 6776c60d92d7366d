import numpy as np
import pytest

from npinteq.core_types import StepDistribution, constant_functional, first_moment
from npinteq.deconv import (ConvolutionKernel, DeconvSample, MixtureFit, bar_phi_matrix,
                            current_status_variance, deconv_loglik, exponential_closed_forms,
                            fit_mle_deconv, integrate_theta_h0, local_scaling_constant_deconv,
                            observation_density, prop21_integrals, solve_phi_deconv,
                            solve_phi_local, theta_and_variance_deconv, theta_at_mle,
                            uniform_to_current_status)
from npinteq.icens import fit_current_status
from npinteq.simulate import gen_deconv, replication_rng

ELBOW = ConvolutionKernel.elbow()
EXPO = ConvolutionKernel.exponential()
UNIF = ConvolutionKernel.uniform()


@pytest.fixture(scope="module")
def elbow_phi():
    return solve_phi_deconv(None, ELBOW, first_moment(), 2000)


@pytest.fixture(scope="module")
def elbow_fits():
    out = []
    for r in range(4):
        s = gen_deconv(1000, None, ELBOW, replication_rng(3, r))
        out.append((s, fit_mle_deconv(s, ELBOW)))
    return out


# --- kernels and densities --------------------------------------------------

def test_elbow_kernel_values():
    assert ELBOW.g0 == 2.0 and ELBOW.g(0.25) == pytest.approx(1.5)
    assert ELBOW.g(1.2) == 0.0 and ELBOW.dg(0.5) == -2.0
    with pytest.raises(ValueError):
        UNIF.dg(0.5)


def test_elbow_h0_values():
    h0 = observation_density(None, ELBOW)
    assert h0(0.5) == pytest.approx(0.75, abs=1e-12)
    assert h0(1.5) == pytest.approx(0.25, abs=1e-12)


# --- data -------------------------------------------------------------------

def test_sample_csv(tmp_path):
    p = tmp_path / "z.csv"
    DeconvSample([0.2, 1.1]).to_csv(p)
    assert p.read_text().splitlines()[0] == "z"
    assert np.array_equal(DeconvSample.from_csv(p).z, [0.2, 1.1])
    p.write_text("z\n0.4\n-0.1\n")
    with pytest.raises(ValueError, match="line 3, column z"):
        DeconvSample.from_csv(p)


def test_uniform_to_current_status():
    pairs = uniform_to_current_status(DeconvSample([0.3, 1.7, 1.0]))
    assert pairs[0] == pytest.approx((0.3, 1)) and pairs[1] == pytest.approx((0.7, 0))
    assert pairs[2] == pytest.approx((1.0, 1))
    with pytest.raises(ValueError):
        uniform_to_current_status(DeconvSample([2.5]))


# --- the MLE ----------------------------------------------------------------

def test_single_elbow_observation():
    fit = fit_mle_deconv(DeconvSample([0.5]), ELBOW)
    assert fit.F.jump_points == pytest.approx([0.5], abs=1e-9)
    assert fit.F.masses == pytest.approx([1.0])


def test_single_observation_matches_brute_force():
    # g decreasing: the best single point sits as close to z as allowed
    z = 0.5
    grid = np.arange(0, 1001) / 1000
    best = grid[np.argmax(ELBOW.g(z - grid))]
    assert best == pytest.approx(0.5)


def test_all_equal_sample_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        fit_mle_deconv(DeconvSample([0.4, 0.4, 0.4]), ELBOW)
    with pytest.raises(ValueError):
        fit_mle_deconv(DeconvSample([0.4, 0.5]), ELBOW, tol=0)


@pytest.mark.parametrize("r", range(5))
def test_uniform_kernel_equals_current_status(r):
    s = gen_deconv(int(50 + 40 * r), None, UNIF, replication_rng(8, r))
    a = fit_mle_deconv(s, UNIF).F
    b = fit_current_status(uniform_to_current_status(s))
    assert np.allclose(a.jump_points, b.jump_points, atol=1e-10)
    assert np.allclose(a.masses, b.masses, atol=1e-10)


def test_elbow_fit_certificates(elbow_fits):
    for s, fit in elbow_fits:
        d = prop21_integrals(fit.F, s, ELBOW, fit.F.jump_points)
        assert np.max(np.abs(d - 1)) <= 1e-10
        assert fit.prop21_residual <= 1e-10 and fit.max_violation <= 1e-10
        assert np.all(np.diff(np.array(fit.trace)) >= -1e-12)
        assert fit.loglik == pytest.approx(deconv_loglik(fit.F, s, ELBOW), abs=1e-12)
        assert np.all(fit.hhat(np.linspace(fit.tau1, fit.taum + 1, 200, endpoint=False)) > 0)
        assert fit.hhat(fit.taum + 1.0 + 1e-9) == 0.0


# --- variance examples ------------------------------------------------------

def test_current_status_variance():
    assert current_status_variance(None) == pytest.approx(1 / 6)
    assert current_status_variance(StepDistribution([0.0], [1.0])) == 0.0
    assert current_status_variance(lambda x: x * x) == pytest.approx(2 / 15, abs=1e-10)


def test_exponential_closed_forms():
    K, theta, phi, s2 = exponential_closed_forms(0.5)
    assert K == pytest.approx(-0.106531, abs=1e-6)
    assert theta(0.2) == pytest.approx(-0.893469, abs=1e-6)
    assert theta(0.7) == pytest.approx(0.106531, abs=1e-6)
    assert s2 == pytest.approx(0.09518, abs=1e-5)
    H = -K
    assert theta.below * H + theta.above * (1 - H) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        exponential_closed_forms(1.5)


def test_exponential_phi_on_step_has_one_extra_jump():
    F = StepDistribution([0.2, 0.6, 0.9], [0.3, 0.3, 0.4])
    _, _, phi, _ = exponential_closed_forms(0.5, F)
    locs = [loc for loc, _ in phi.discrete_jumps]
    assert set(locs) - set(F.jump_points.tolist()) == {0.5}


# --- the Fredholm side ------------------------------------------------------

def test_constant_functional_gives_zero_phi():
    phi = solve_phi_deconv(None, ELBOW, constant_functional(1.0), 400)
    assert np.max(np.abs(phi.values)) == 0.0
    theta, var = theta_and_variance_deconv(phi, None, ELBOW, 400)
    assert var == 0.0 and np.max(np.abs(theta.values)) == 0.0


def test_elbow_phi_self_refinement(elbow_phi):
    half = solve_phi_deconv(None, ELBOW, first_moment(), 1000)
    x = np.linspace(0, 1, 501)
    assert np.max(np.abs(half(x) - elbow_phi(x))) < 1e-3


def test_elbow_general_kernel_matches_specialised():
    spec = first_moment()
    a = solve_phi_deconv(None, ELBOW, spec, 400)
    b = solve_phi_deconv(lambda x: np.clip(np.asarray(x, float), 0, 1), ELBOW, spec, 400)
    x = np.linspace(0.02, 0.98, 49)
    assert np.max(np.abs(a(x) - b(x))) < 1e-3


def test_elbow_variance_and_centering(elbow_phi):
    theta, var = theta_and_variance_deconv(elbow_phi, None, ELBOW)
    assert var == pytest.approx(0.137, abs=3e-3)
    assert integrate_theta_h0(theta, None, ELBOW) == pytest.approx(0.0, abs=1e-3)


def test_local_phi_exponential_matches_closed_form():
    t = 0.5
    phi = solve_phi_local(t, None, EXPO, 2000)
    _, _, exact, _ = exponential_closed_forms(t)
    x = np.concatenate([np.linspace(0.0, 0.49, 50), np.linspace(0.51, 1.0, 50)])
    assert np.max(np.abs(phi(x) - exact(x))) < 1e-6
    assert phi.value_left == pytest.approx(exact(t, left=True), abs=1e-6)
    assert phi.value_right == pytest.approx(exact(t), abs=1e-6)


def test_local_phi_elbow_jumps_at_t():
    phi = solve_phi_local(0.5, None, ELBOW, 1000)
    assert phi.jump_point == 0.5
    assert abs(phi.value_right - phi.value_left) > 1e-3
    with pytest.raises(ValueError):
        solve_phi_local(1.0, None, ELBOW)


def test_local_phi_vanishes_with_rhs():
    # the right-hand side is supported on [0, t): it shrinks to nothing as t -> 0
    sups = [np.max(np.abs(solve_phi_local(t, None, ELBOW, 400).values)) for t in (1e-2, 1e-3, 1e-4)]
    assert all(s <= 2 * t for s, t in zip(sups, (1e-2, 1e-3, 1e-4)))
    assert sups[2] < sups[1] < sups[0]


# --- scaling constants ------------------------------------------------------

def test_scaling_constant_elbow():
    c = local_scaling_constant_deconv(0.5, None, ELBOW)
    assert c == pytest.approx((8 / 0.75) ** (1 / 3), rel=1e-12)
    assert c == pytest.approx(2.202, abs=1e-3)


@pytest.mark.parametrize("t0", [0.3, 0.5, 0.8])
def test_scaling_constant_uniform_reduction(t0):
    c = local_scaling_constant_deconv(t0, None, UNIF, case="discontinuity_set")
    assert 1 / c == pytest.approx((0.5 * t0 * (1 - t0)) ** (1 / 3), rel=1e-10)


def test_scaling_constant_exponential_reduction():
    t0 = 0.4
    h = float(observation_density(None, EXPO)(t0))
    for case in ("smooth_decreasing", "discontinuity_set"):
        c = local_scaling_constant_deconv(t0, None, EXPO, case=case)
        assert 1 / c == pytest.approx((0.5 * h) ** (1 / 3), rel=1e-10)
    with pytest.raises(ValueError):
        local_scaling_constant_deconv(0.5, None, ELBOW, f0=0.0)


# --- the MLE side of the efficiency argument --------------------------------

def test_bar_phi_single_jump():
    s = DeconvSample([0.5])
    fit = fit_mle_deconv(s, ELBOW)
    bar, bar_theta = bar_phi_matrix(fit, s, first_moment())
    assert [loc for loc, _ in bar.discrete_jumps] == [pytest.approx(0.5)]
    # kappa(tau) - int kappa dF = 0 for one point
    assert bar.discrete_jumps[0][1] == pytest.approx(0.0, abs=1e-15)
    assert bar.residual_sup == 0.0


def test_bar_theta_orthogonal_to_empirical(elbow_fits):
    for s, fit in elbow_fits:
        bar, bar_theta = bar_phi_matrix(fit, s, first_moment())
        assert bar.residual_sup <= 1e-8
        locs = np.array([loc for loc, _ in bar.discrete_jumps])
        assert np.array_equal(locs, fit.F.jump_points)


def test_theta_at_mle_extension_property(elbow_fits):
    x = np.linspace(0.005, 0.995, 60)
    for _, fit in elbow_fits:
        th = theta_at_mle(fit, first_moment())
        mu = float(fit.F.jump_points @ fit.F.masses)
        assert np.max(np.abs(th.transform(x) - (x - mu))) < 1e-4


def test_mean_identity_at_elbow_fits(elbow_fits):
    h0 = observation_density(None, ELBOW)
    taus = []
    for _, fit in elbow_fits:
        th = theta_at_mle(fit, first_moment())
        lhs = float(fit.F.jump_points @ fit.F.masses) - 0.5
        assert lhs == pytest.approx(-th.integrate(h0), abs=1e-3)
        taus.append(fit.taum)
    # both shapes of the extension are exercised
    assert min(taus) < 1 < max(taus)


def test_theta_at_mle_rejects_other_kernels():
    fit = fit_mle_deconv(DeconvSample([0.3, 0.9, 1.4]), EXPO)
    with pytest.raises(ValueError, match="elbow"):
        theta_at_mle(fit, first_moment())


def test_bar_phi_approaches_grid_phi():
    spec = first_moment()

    def gap(n, r):
        s = gen_deconv(n, None, ELBOW, replication_rng(21, r))
        fit = fit_mle_deconv(s, ELBOW)
        bar, _ = bar_phi_matrix(fit, s, spec)
        phi = theta_at_mle(fit, spec).phi
        return np.max(np.abs(bar(phi.grid) - phi.values))

    ratios = [gap(5000, r) / gap(500, r) for r in range(5)]
    assert np.median(ratios) < 0.7
