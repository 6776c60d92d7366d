"""Seeded data generation and a Monte Carlo harness for plug-in functionals.

Replication ``r`` of a run with master seed ``s`` draws from
``numpy.random.default_rng(SeedSequence(s, spawn_key=(r,)))``.  SeedSequence
hashes the pair into the generator state, so replications are independent,
may run in any order, and are reduced in index order.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .core_types import FunctionalSpec, NumericalError, StepDistribution
from .deconv import ConvolutionKernel, DeconvSample, bar_phi_matrix, fit_mle_deconv
from .icens import IcSample, ObservationModel, fenchel_residuals, fit_mle_case2
from .msle import KernelSpec, fit_msle, smooth_densities

log = logging.getLogger(__name__)

BISECTION_STEPS = 60
LEDGER_HEADER = ["config_hash", "estimate", "se", "reps", "n", "seed"]


def replication_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_cdf(F0, v, support_end: float = 1.0) -> np.ndarray:
    """Inverse-cdf transform of uniforms ``v``: inf{x : F0(x) >= v}.

    ``F0`` is None (uniform on [0, support_end]), a StepDistribution, or a
    vectorised cdf on [0, support_end] (inverted by bisection).
    """
    v = np.asarray(v, dtype=float)
    if F0 is None:
        return support_end * v
    if isinstance(F0, StepDistribution):
        if F0.jump_points.size == 0:
            raise ValueError("cannot sample from an empty distribution")
        cum = F0.cumulative / F0.total_mass
        idx = np.minimum(np.searchsorted(cum, v, side="left"), cum.size - 1)
        return F0.jump_points[idx]
    lo = np.zeros_like(v)
    hi = np.full_like(v, float(support_end))
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        below = np.asarray(F0(mid), dtype=float) < v
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return hi


def _sample_pairs(n, model: ObservationModel, rng):
    M, eps = model.support_end, model.epsilon
    if model.family == "triangle":
        bound = model.height
    else:
        bound = float(np.max(model.table))
    t = np.empty(0)
    u = np.empty(0)
    drawn = 0
    while t.size < n:
        batch = max(2 * (n - t.size), 64)
        a, b = rng.uniform(0.0, M, batch), rng.uniform(0.0, M, batch)
        keep = (b - a > eps) & (rng.uniform(0.0, bound, batch) < model.g(a, b))
        drawn += batch
        t, u = np.concatenate([t, a[keep]]), np.concatenate([u, b[keep]])
    log.debug("triangle rejection sampler accepted %d of %d draws", t.size, drawn)
    return t[:n], u[:n]


def gen_interval_censored(n: int, F0, model: ObservationModel, seed) -> IcSample:
    """Case 2 interval-censored sample with X ~ F0 independent of (T, U) ~ g.

    (T, U) is drawn by rejection from the square [0, M]^2; for the uniform
    triangle the acceptance rate is (1 - eps/M)^2 / 2.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = _rng(seed)
    x = sample_cdf(F0, rng.uniform(size=n), model.support_end)
    t, u = _sample_pairs(n, model, rng)
    d1 = (x <= t).astype(int)
    d2 = ((t < x) & (x <= u)).astype(int)
    return IcSample(t, u, d1, d2)


def gen_deconv(n: int, F0, g: ConvolutionKernel, seed) -> DeconvSample:
    """Z = X + Y with X ~ F0 on [0, 1] and Y ~ g independent."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = _rng(seed)
    x = sample_cdf(F0, rng.uniform(size=n))
    y = g.quantile(rng.uniform(size=n))
    return DeconvSample(x + y)


@dataclass(frozen=True)
class IcModel:
    F0: Optional[Callable]
    observation: ObservationModel
    label: str = "uniform"


@dataclass(frozen=True)
class DeconvModel:
    F0: Optional[Callable]
    kernel: ConvolutionKernel
    label: str = "uniform"


@dataclass(frozen=True)
class McConfig:
    model: Union[IcModel, DeconvModel]
    n: int
    reps: int
    seed: int
    functional: FunctionalSpec
    estimator: str = "mle"
    tol: float = 1e-10
    bandwidth: Optional[float] = None
    grid_size: int = 200

    def __post_init__(self):
        if self.n < 1 or self.reps < 1:
            raise ValueError("n and reps must be at least 1")
        if self.estimator not in ("mle", "msle"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.estimator == "msle" and not isinstance(self.model, IcModel):
            raise ValueError("the smoothed estimator is only available for interval censoring")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def describe(self) -> str:
        m = self.model
        if isinstance(m, IcModel):
            model = f"ic:{m.observation.family}:eps={m.observation.epsilon!r}:M={m.observation.support_end!r}"
        else:
            model = f"deconv:{m.kernel.family}"
        return (f"{model}:F0={m.label}|n={self.n}|reps={self.reps}|seed={self.seed}|"
                f"functional={self.functional.label}|estimator={self.estimator}|tol={self.tol!r}|"
                f"bandwidth={self.bandwidth!r}|grid={self.grid_size}")

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.describe().encode()).hexdigest()[:16]


@dataclass
class McResult:
    variance: float
    se: float
    truth: float
    errors: np.ndarray = field(repr=False)
    max_certificate: float = 0.0
    monotone: bool = True


def _truth(config: McConfig) -> float:
    F0 = config.model.F0
    if F0 is None:
        M = config.model.observation.support_end if isinstance(config.model, IcModel) else 1.0
        F0 = lambda x: np.clip(np.asarray(x, dtype=float) / M, 0.0, 1.0)
    return float(config.functional.value(F0))


def _monotone(trace) -> bool:
    return bool(np.all(np.diff(np.asarray(trace, dtype=float)) >= -1e-12))


def _one(config: McConfig, index: int):
    """Plug-in value of one replication, its optimality certificate and
    whether the solver's log-likelihood trace never decreased.

    For deconvolution with a differentiable kernel the certificate also
    covers |int bar theta dH_n| of the adjoint system."""
    rng = replication_rng(config.seed, index)
    m = config.model
    if isinstance(m, IcModel):
        sample = gen_interval_censored(config.n, m.F0, m.observation, rng)
        mono = True
        if config.estimator == "mle":
            fit = fit_mle_case2(sample, tol=config.tol, support_end=m.observation.support_end,
                                full_output=True)
            F = fit.F
            cert = max(fenchel_residuals(F, sample))
            mono = _monotone(fit.trace)
        else:
            kernel = (KernelSpec.default(config.n, m.observation.support_end)
                      if config.bandwidth is None
                      else KernelSpec(config.bandwidth, True, m.observation.support_end))
            sm = smooth_densities(sample, kernel, m.observation, config.grid_size)
            F, info = fit_msle(sm, tol=config.tol, full_output=True)
            cert = info.residual
    else:
        sample = gen_deconv(config.n, m.F0, m.kernel, rng)
        fit = fit_mle_deconv(sample, m.kernel, tol=config.tol)
        F = fit.F
        cert = max(fit.prop21_residual, fit.max_violation)
        if m.kernel.differentiable:
            cert = max(cert, bar_phi_matrix(fit, sample, config.functional)[0].residual_sup)
        mono = _monotone(fit.trace)
    return config.functional.value(F), cert, mono


def mc_functional_variance(config: McConfig, threads: int = 1, full_output: bool = False):
    """Variance of sqrt(n) (K(F_hat) - K(F0)) over ``config.reps`` replications.

    Returns ``(variance, standard_error)``; the standard error uses the
    fourth central moment of the errors.  A failing replication raises
    NumericalError naming its index and the master seed.
    """
    truth = _truth(config)

    def run(i):
        try:
            return _one(config, i)
        except (NumericalError, ValueError) as exc:
            raise NumericalError(f"replication {i} (master seed {config.seed}) failed: {exc}") from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(config.reps)))
    else:
        results = [run(i) for i in range(config.reps)]
    est = np.array([r[0] for r in results])
    err = np.sqrt(config.n) * (est - truth)
    R = err.size
    var = float(np.var(err, ddof=1)) if R > 1 else 0.0
    if R > 3:
        m4 = float(np.mean((err - err.mean()) ** 4))
        se = float(np.sqrt(max(m4 - (R - 3) / (R - 1) * var ** 2, 0.0) / R))
    else:
        se = float("nan")
    if not full_output:
        return var, se
    return McResult(var, se, truth, err, float(max(r[1] for r in results)),
                    all(r[2] for r in results))


def append_ledger(path, config: McConfig, estimate: float, se: float) -> None:
    """Append one result row; the header is written when the file is new."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(LEDGER_HEADER)
        w.writerow([config.config_hash, repr(estimate), repr(se), config.reps, config.n, config.seed])
