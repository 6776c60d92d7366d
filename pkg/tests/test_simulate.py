import csv

import numpy as np
import pytest
from scipy import stats

from npinteq.core_types import NumericalError, StepDistribution, constant_functional, first_moment
from npinteq.deconv import ConvolutionKernel
from npinteq.icens import ObservationModel
from npinteq import simulate
from npinteq.simulate import (LEDGER_HEADER, DeconvModel, IcModel, McConfig, append_ledger,
                              gen_deconv, gen_interval_censored, mc_functional_variance,
                              replication_rng, sample_cdf)

from conftest import quadratic

TRI = ObservationModel.uniform_triangle(0.1)


def test_pairs_respect_separation():
    s = gen_interval_censored(20000, None, TRI, 1)
    assert np.all(s.u - s.t > 0.1)
    assert s.t.min() >= 0 and s.u.max() <= 1


def test_mean_of_t_matches_marginal():
    s = gen_interval_censored(100_000, None, TRI, 2)
    # g1(t) is proportional to 1 - eps - t on [0, 1 - eps]
    se = s.t.std(ddof=1) / np.sqrt(s.n)
    assert abs(s.t.mean() - 0.9 / 3) < 3 * se


def test_delta1_frequency():
    s = gen_interval_censored(50_000, quadratic, TRI, 3)
    x = np.linspace(0, 0.9, 20001)
    p = np.trapezoid(quadratic(x) * TRI.g1(x), x)
    se = np.sqrt(p * (1 - p) / s.n)
    assert abs(s.d1.mean() - p) < 3 * se


def test_generators_are_deterministic():
    a = gen_interval_censored(500, quadratic, TRI, 9)
    b = gen_interval_censored(500, quadratic, TRI, 9)
    assert np.array_equal(a.t, b.t) and np.array_equal(a.d2, b.d2)
    g = ConvolutionKernel.elbow()
    assert np.array_equal(gen_deconv(300, None, g, 9).z, gen_deconv(300, None, g, 9).z)
    assert not np.array_equal(gen_deconv(300, None, g, 9).z, gen_deconv(300, None, g, 10).z)


def test_replication_streams_differ_and_repeat():
    a = replication_rng(4, 0).uniform(size=4)
    assert np.array_equal(a, replication_rng(4, 0).uniform(size=4))
    assert not np.array_equal(a, replication_rng(4, 1).uniform(size=4))


def test_point_mass_plus_uniform_noise_is_uniform():
    s = gen_deconv(10_000, StepDistribution([0.0], [1.0]), ConvolutionKernel.uniform(), 5)
    assert stats.kstest(s.z, "uniform").pvalue > 0.01


def test_elbow_density_at_half():
    s = gen_deconv(100_000, None, ConvolutionKernel.elbow(), 6)
    w = 0.02
    frac = np.mean(np.abs(s.z - 0.5) < w / 2)
    se = np.sqrt(frac * (1 - frac) / s.n) / w
    assert abs(frac / w - 0.75) < 3 * se + 1e-4


def test_sample_cdf_inverse():
    v = np.array([0.1, 0.5, 0.9])
    assert np.allclose(sample_cdf(quadratic, v), 1 - np.sqrt(1 - v), atol=1e-12)
    F = StepDistribution([0.2, 0.7], [0.25, 0.75])
    assert np.array_equal(sample_cdf(F, np.array([0.2, 0.25, 0.3])), [0.2, 0.2, 0.7])


def test_config_validation():
    m = IcModel(None, TRI)
    with pytest.raises(ValueError):
        McConfig(m, n=0, reps=10, seed=1, functional=first_moment())
    with pytest.raises(ValueError):
        McConfig(DeconvModel(None, ConvolutionKernel.elbow()), 10, 10, 1, first_moment(),
                 estimator="msle")
    with pytest.raises(ValueError):
        McConfig(m, 10, 10, -1, first_moment())


def test_constant_functional_has_zero_variance():
    cfg = McConfig(IcModel(None, TRI), n=50, reps=20, seed=1, functional=constant_functional(3.0))
    var, _ = mc_functional_variance(cfg)
    assert var == 0.0


def test_mc_is_deterministic_and_order_free():
    cfg = McConfig(IcModel(None, TRI), n=100, reps=24, seed=77, functional=first_moment())
    a = mc_functional_variance(cfg, full_output=True)
    b = mc_functional_variance(cfg, full_output=True)
    c = mc_functional_variance(cfg, threads=3, full_output=True)
    assert np.array_equal(a.errors, b.errors) and np.array_equal(a.errors, c.errors)
    assert a.truth == pytest.approx(0.5) and a.max_certificate <= 1e-10 and a.monotone


def test_failure_names_seed(monkeypatch):
    def boom(*args, **kwargs):
        raise NumericalError("iteration cap")
    monkeypatch.setattr(simulate, "fit_mle_case2", boom)
    cfg = McConfig(IcModel(None, TRI), n=20, reps=5, seed=4242, functional=first_moment())
    with pytest.raises(NumericalError, match="4242"):
        mc_functional_variance(cfg)


def test_ledger_rows(tmp_path):
    p = tmp_path / "ledger.csv"
    cfg = McConfig(IcModel(None, TRI), n=100, reps=10, seed=3, functional=first_moment())
    append_ledger(p, cfg, 0.11, 0.002)
    append_ledger(p, cfg, 0.12, 0.003)
    rows = list(csv.reader(open(p)))
    assert rows[0] == LEDGER_HEADER == ["config_hash", "estimate", "se", "reps", "n", "seed"]
    assert len(rows) == 3 and rows[1][0] == cfg.config_hash and rows[2][5] == "3"
    other = McConfig(IcModel(None, TRI), n=101, reps=10, seed=3, functional=first_moment())
    assert other.config_hash != cfg.config_hash
