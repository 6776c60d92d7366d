import itertools

import numpy as np
import pytest
from scipy import integrate, optimize

from npinteq.core_types import NumericalError, StepDistribution
from npinteq.icens import (IcObservation, IcSample, ObservationModel, fenchel_residuals,
                           fit_current_status, fit_mle_case2, loglik_case2, maximal_intersections,
                           read_current_status_csv)

from conftest import uniform

THREE = IcSample([0.4, 0.3, 0.2], [0.8, 0.7, 0.6], [1, 0, 0], [0, 1, 0])


# --- data model -------------------------------------------------------------

def test_observation_invariants():
    assert IcObservation(0.1, 0.5, 0, 0).delta3 == 1
    with pytest.raises(ValueError):
        IcObservation(0.5, 0.5, 1, 0)
    with pytest.raises(ValueError):
        IcObservation(0.1, 0.5, 1, 1)


def test_sample_rejects_bad_rows():
    with pytest.raises(ValueError, match="observation 1"):
        IcSample([0.1, 0.6], [0.5, 0.4], [0, 0], [0, 0])
    with pytest.raises(ValueError):
        IcSample([], [], [], [])


def test_sample_csv_roundtrip(tmp_path):
    p = tmp_path / "s.csv"
    THREE.to_csv(p)
    back = IcSample.from_csv(p)
    assert np.array_equal(back.t, THREE.t) and np.array_equal(back.d2, THREE.d2)


def test_sample_csv_reports_line_and_column(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("t,u,d1,d2\n0.1,0.5,1,0\n0.2,0.6,1,1\n")
    with pytest.raises(ValueError, match="line 3, column d2"):
        IcSample.from_csv(p)
    p.write_text("t,u,d1,d2\n0.1,abc,1,0\n")
    with pytest.raises(ValueError, match="line 2, column u"):
        IcSample.from_csv(p)


def test_current_status_csv_negative_z(tmp_path):
    p = tmp_path / "cs.csv"
    p.write_text("z,delta\n0.3,1\n-0.2,0\n")
    with pytest.raises(ValueError, match="line 3, column z"):
        read_current_status_csv(p)


def test_triangle_density_and_marginals():
    m = ObservationModel.uniform_triangle(0.1)
    assert m.height == pytest.approx(2 / 0.81)
    mass, _ = integrate.dblquad(lambda u, t: m.g(t, u), 0, 0.9, lambda t: t + 0.1, 1.0)
    assert mass == pytest.approx(1.0, abs=1e-9)
    assert m.g1(0.5) == pytest.approx(2 * 0.4 / 0.81, abs=1e-12)
    for x in (0.05, 0.3, 0.5, 0.85):
        g1, _ = integrate.quad(lambda u: m.g(x, u), x, 1.0, points=[x + 0.1], epsabs=1e-13)
        g2, _ = integrate.quad(lambda t: m.g(t, x), 0.0, x, points=[max(x - 0.1, 0.0)], epsabs=1e-13)
        assert m.g1(x) == pytest.approx(g1, abs=1e-10)
        assert m.g2(x) == pytest.approx(g2, abs=1e-10)


def test_tabulated_model_tracks_triangle():
    s = np.linspace(0, 1, 201)
    T, U = np.meshgrid(s, s, indexing="ij")
    tab = ObservationModel.tabulated(s, np.where(U - T > 0, 2.0, 0.0))
    assert tab.g1(0.5) == pytest.approx(1.0, abs=2e-2)
    assert tab.g(0.6, 0.2) == 0.0


# --- likelihood -------------------------------------------------------------

def test_loglik_examples():
    one = IcSample([0.2], [0.8], [1], [0])
    assert loglik_case2(uniform, one) == pytest.approx(np.log(0.2))
    assert loglik_case2(StepDistribution([0.9], [1.0]), one) == -np.inf
    half = StepDistribution([0.4, 0.7], [0.5, 0.5])
    assert THREE.n * loglik_case2(half, THREE) == pytest.approx(2 * np.log(0.5), abs=1e-12)


# --- current status ---------------------------------------------------------

def test_current_status_examples():
    F = fit_current_status([(1, 0), (2, 1)], support_end=3)
    assert F(1) == 0 and F(2) == 1
    F = fit_current_status([(1, 1), (2, 0), (3, 1)], support_end=3)
    assert F(1) == pytest.approx(0.5) and F(2) == pytest.approx(0.5) and F(3) == pytest.approx(1)
    F = fit_current_status([(0.2, 0), (0.5, 0)])
    assert F.total_mass == 0


def test_current_status_pools_ties():
    for pairs in ([(0.5, 1), (0.5, 0)], [(0.5, 0), (0.5, 1)]):
        assert fit_current_status(pairs)(0.5) == pytest.approx(0.5)


def _isotonic_exhaustive(y):
    """Least-squares nondecreasing fit by enumerating all block partitions."""
    n = len(y)
    best, best_fit = np.inf, None
    for cuts in itertools.product((0, 1), repeat=n - 1):
        edges = [0] + [i + 1 for i, c in enumerate(cuts) if c] + [n]
        means = [np.mean(y[a:b]) for a, b in zip(edges[:-1], edges[1:])]
        if np.any(np.diff(means) < 0):
            continue
        fit = np.concatenate([np.full(b - a, mu) for a, b, mu in zip(edges[:-1], edges[1:], means)])
        sse = float(np.sum((y - fit) ** 2))
        if sse < best - 1e-15:
            best, best_fit = sse, fit
    return best_fit


def test_current_status_matches_exhaustive_isotonic(rng):
    for _ in range(200):
        n = int(rng.integers(1, 9))
        z = np.sort(rng.uniform(size=n))
        d = rng.integers(0, 2, size=n)
        F = fit_current_status(list(zip(z, d)))
        assert np.allclose(F(z), _isotonic_exhaustive(d.astype(float)), atol=1e-12)


# --- case 2 MLE -------------------------------------------------------------

def test_single_observation():
    s = IcSample([0.4], [0.8], [1], [0])
    fit = fit_mle_case2(s, full_output=True)
    assert np.array_equal(fit.F.jump_points, [0.4]) and fit.F.masses[0] == pytest.approx(1.0)
    assert fit.loglik == 0.0
    assert fenchel_residuals(fit.F, s)[1] <= 1e-12


def test_three_observation_instance():
    F = fit_mle_case2(THREE)
    assert np.allclose(F.jump_points, [0.4, 0.7])
    assert np.allclose(F.masses, [0.5, 0.5], atol=1e-9)


def test_all_right_censored():
    s = IcSample([0.1, 0.3], [0.6, 0.6], [0, 0], [0, 0])
    fit = fit_mle_case2(s, full_output=True)
    assert fit.F(0.6) == 0.0 and fit.F.total_mass == pytest.approx(1.0)
    assert fit.loglik == 0.0


def test_fenchel_detects_wrong_mass():
    F = StepDistribution([0.4, 0.7], [0.9, 0.1])
    viol, _ = fenchel_residuals(F, THREE)
    assert viol == pytest.approx((1.0 + 10.0) / 3.0 - 1.0, rel=1e-12)


def _random_sample(rng, n):
    t = rng.uniform(0, 0.7, n)
    u = t + rng.uniform(0.1, 0.3, n)
    x = rng.uniform(size=n)
    return IcSample(t, u, (x <= t).astype(int), ((t < x) & (x <= u)).astype(int))


def _exhaustive_loglik(sample, cand):
    L = np.where(sample.d1 == 1, -np.inf, np.where(sample.d2 == 1, sample.t, sample.u))
    R = np.where(sample.d1 == 1, sample.t, np.where(sample.d2 == 1, sample.u, np.inf))
    A = ((cand.location[None, :] > L[:, None]) & (cand.location[None, :] <= R[:, None])).astype(float)

    def ll(p):
        q = A @ p
        return np.mean(np.log(q)) if np.all(q > 0) else -np.inf

    m = cand.m
    best, arg = -np.inf, None
    steps = np.arange(65) / 64
    for head in itertools.product(steps, repeat=m - 1):
        if sum(head) <= 1:
            p = np.array(list(head) + [1 - sum(head)])
            v = ll(p)
            if v > best:
                best, arg = v, p
    # polish the best grid point on the simplex
    res = optimize.minimize(lambda p: -ll(np.abs(p) / np.abs(p).sum()), arg + 1e-9,
                            method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-14,
                                                           "maxiter": 20000})
    return max(best, -res.fun)


def test_case2_matches_exhaustive_small_instances(rng):
    checked = 0
    while checked < 25:
        s = _random_sample(rng, int(rng.integers(2, 7)))
        cand = maximal_intersections(s)
        if cand.m > 3:
            continue
        fit = fit_mle_case2(s, full_output=True)
        assert fit.loglik == pytest.approx(_exhaustive_loglik(s, cand), abs=1e-6)
        checked += 1


def test_case2_certificates_and_monotone_trace(rng):
    s = _random_sample(rng, 300)
    fit = fit_mle_case2(s, tol=1e-8, full_output=True)
    assert max(fit.max_violation, fit.support_slack) <= 1e-8
    assert np.all(np.diff(np.array(fit.trace)) >= -1e-12)
    cand = maximal_intersections(s)
    assert np.all(np.isin(fit.F.jump_points, cand.location))


def test_case2_iteration_cap():
    s = _random_sample(np.random.default_rng(3), 200)
    with pytest.raises(NumericalError, match="residual"):
        fit_mle_case2(s, tol=1e-14, max_iter=1, hybrid_iter=1)


def test_case2_rejects_bad_tol():
    with pytest.raises(ValueError):
        fit_mle_case2(THREE, tol=0)
