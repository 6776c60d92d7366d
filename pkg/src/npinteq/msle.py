"""Maximum smoothed likelihood for interval censoring case 2.

The observation measure is smoothed first (triweight kernel with a linear
boundary correction), then F solves

    h1 (1-F) - h2 F + F (1-F) { int_0^t h(v,t)/(F(t)-F(v)) dv
                                 - int_t^M h(t,u)/(F(u)-F(t)) du } = 0

on a grid whose spacing divides the separation epsilon, so the integrals
over {u - t >= epsilon} are trapezoid sums over whole cells.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import Polynomial
from scipy import integrate
from scipy.optimize import isotonic_regression

from . import _mixture
from .core_types import GridFunction, NumericalError
from .functionals import k1_k2
from .icens import IcSample, ObservationModel

log = logging.getLogger(__name__)

TRIWEIGHT = Polynomial([1.0, 0.0, -3.0, 0.0, 3.0, 0.0, -1.0]) * (35.0 / 32.0)
MU2 = 1.0 / 9.0               # int u^2 K
K_SQUARED = 350.0 / 429.0     # int K^2
DAMPING = 0.5
MAX_ITER = 5000
EDGE_TOL = 1e-12
MAX_HALVINGS = 40
STALL_LIMIT = 200


def triweight(x):
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) <= 1.0, TRIWEIGHT(x), 0.0)


def _moment(j: int, lo, hi):
    P = (TRIWEIGHT * Polynomial.basis(j)).integ()
    return P(hi) - P(lo)


def boundary_coefficients(alpha):
    """(a, b) with (a + b u) K(u) of unit mass and zero mean on [-1, alpha]."""
    alpha = np.clip(np.asarray(alpha, dtype=float), -1.0, 1.0)
    m0, m1, m2 = (_moment(j, -1.0, alpha) for j in range(3))
    det = m0 * m2 - m1 ** 2
    return m2 / det, -m1 / det


@dataclass(frozen=True)
class KernelSpec:
    """Triweight kernel with bandwidth ``bandwidth`` on ``[0, support_end]``."""

    bandwidth: float
    boundary: bool = True
    support_end: float = 1.0

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth!r}")

    @classmethod
    def default(cls, n: int, support_end: float = 1.0, boundary: bool = True) -> "KernelSpec":
        return cls(float(n) ** (-0.2), boundary, support_end)

    def weights(self, points, data):
        """K_b(t - X) with the boundary correction, shape (len(points), len(data))."""
        b, M = self.bandwidth, self.support_end
        t = np.asarray(points, dtype=float).reshape(-1, 1)
        u = (t - np.asarray(data, dtype=float).reshape(1, -1)) / b
        K = triweight(u)
        if not self.boundary:
            return K / b
        left = t[:, 0] < b
        right = t[:, 0] > M - b
        coef_a = np.ones(t.shape[0])
        coef_b = np.zeros(t.shape[0])
        if np.any(left):
            coef_a[left], coef_b[left] = boundary_coefficients(t[left, 0] / b)
        sign = np.ones(t.shape[0])
        if np.any(right & ~left):
            sel = right & ~left
            coef_a[sel], coef_b[sel] = boundary_coefficients((M - t[sel, 0]) / b)
            sign[sel] = -1.0
        # on the right the kernel is mirrored: (a - b u) K(u) on [-alpha, 1]
        return (coef_a[:, None] + (coef_b * sign)[:, None] * u) * K / b


@dataclass(frozen=True)
class SmoothedDensities:
    """h1, h2 on ``grid`` and the bivariate h tabulated on grid x grid.

    ``h2d[i, j]`` is h(grid[i], grid[j]); it is zero off the closed triangle
    u - t >= epsilon.  ``bandwidth`` is None for exact population inputs.
    """

    grid: np.ndarray
    h1: GridFunction
    h2: GridFunction
    h2d: np.ndarray = field(repr=False)
    epsilon: float
    g1: np.ndarray = field(repr=False)
    g2: np.ndarray = field(repr=False)
    bandwidth: Optional[float] = None
    clamped: int = 0
    mass: float = 1.0


def msle_grid(model: ObservationModel, grid_size: int) -> np.ndarray:
    """Uniform grid on [0, M] whose spacing divides epsilon."""
    M, eps = model.support_end, model.epsilon
    if not eps > 0:
        raise ValueError("the smoothed likelihood equations need a separated model (epsilon > 0)")
    for N in range(max(grid_size, 4), 4 * max(grid_size, 4)):
        k = eps * N / M
        if abs(k - round(k)) < 1e-9 and round(k) >= 1:
            return np.linspace(0.0, M, N + 1)
    raise ValueError(f"no grid near {grid_size} cells has a spacing dividing epsilon={eps}")


def _triangle_mask(grid, eps):
    T, U = np.meshgrid(grid, grid, indexing="ij")
    return (U - T) >= eps - EDGE_TOL


def smooth_densities(sample: IcSample, kernel: KernelSpec, model: ObservationModel,
                     grid_size: int = 200) -> SmoothedDensities:
    """Kernel estimates of F0 g1, (1-F0) g2 and (F0(u)-F0(t)) g(t,u)."""
    b, M = kernel.bandwidth, kernel.support_end
    if not 0 < b < M / 2:
        raise ValueError(f"bandwidth must lie in (0, M/2), got {b!r}")
    grid = msle_grid(model, grid_size)
    n = sample.n
    Kt = kernel.weights(grid, sample.t)
    Ku = kernel.weights(grid, sample.u)
    h1 = Kt @ sample.d1 / n
    h2 = Ku @ sample.d3 / n
    h2d = (Kt * sample.d2[None, :]) @ Ku.T / n
    h2d = np.where(_triangle_mask(grid, model.epsilon), h2d, 0.0)
    neg = int(np.sum(h1 < 0) + np.sum(h2 < 0) + np.sum(h2d < 0))
    if neg:
        log.info("clamped %d negative smoothed density values to 0", neg)
    h1, h2, h2d = np.maximum(h1, 0.0), np.maximum(h2, 0.0), np.maximum(h2d, 0.0)
    mass = float(np.trapezoid(h1, grid) + np.trapezoid(h2, grid)
                 + np.trapezoid(np.trapezoid(h2d, grid, axis=1), grid))
    if abs(mass - 1.0) > 2e-2:
        log.info("smoothed densities carry total mass %.4f", mass)
    return SmoothedDensities(grid, GridFunction(grid, h1), GridFunction(grid, h2), h2d,
                             model.epsilon, model.g1(grid), model.g2(grid), b, neg, mass)


def _closed_g(model: ObservationModel, t, u):
    """g on the closed triangle u - t >= epsilon (edge values by continuity)."""
    if model.family == "triangle":
        inside = (u - t >= model.epsilon - EDGE_TOL) & (t >= 0) & (u <= model.support_end)
        return np.where(inside, model.height, 0.0)
    tt, uu = np.broadcast_arrays(t, u)
    vals = model._interp(np.stack([tt.ravel(), uu.ravel()], axis=-1)).reshape(tt.shape)
    return np.where(uu - tt >= model.epsilon - EDGE_TOL, vals, 0.0)


def population_densities(model: ObservationModel, F0: Callable, grid_size: int = 200) -> SmoothedDensities:
    """The exact (h01, h02, h0) tabulated on the MSLE grid."""
    grid = msle_grid(model, grid_size)
    F = np.asarray(F0(grid), dtype=float)
    h1 = F * model.g1(grid)
    h2 = (1 - F) * model.g2(grid)
    T, U = np.meshgrid(grid, grid, indexing="ij")
    h2d = (F[None, :] - F[:, None]) * _closed_g(model, T, U)
    return SmoothedDensities(grid, GridFunction(grid, h1), GridFunction(grid, h2), h2d,
                             model.epsilon, model.g1(grid), model.g2(grid), None, 0, 1.0)


def _trapezoid_weights(grid, eps):
    """Trapezoid weights over whole cells of the two gap integrals.

    ``right[i, j]`` weights node j in int_{u >= grid[i] + eps} du and
    ``left[i, j]`` weights node i in int_{v <= grid[j] - eps} dv.
    """
    N = grid.size
    step = grid[1] - grid[0]
    k = int(round(eps / step))
    right = np.zeros((N, N))
    left = np.zeros((N, N))
    for i in range(N - k - 1):
        right[i, i + k:] = step
        right[i, i + k] = right[i, -1] = 0.5 * step
    for j in range(k + 1, N):
        left[: j - k + 1, j] = step
        left[0, j] = left[j - k, j] = 0.5 * step
    # The corners (0, eps) and (M - eps, M) sit at a zero-length end of one
    # of the two ranges.  Dropping them makes w_t right[t, u] = w_u left[t, u],
    # so the discrete equation is the gradient of a discrete likelihood.
    right[0, k] = 0.0
    left[N - 1 - k, N - 1] = 0.0
    return right, left


def _node_weights(grid):
    w = np.full(grid.size, grid[1] - grid[0])
    w[[0, -1]] *= 0.5
    return w


@dataclass
class _Equation:
    grid: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    h2d: np.ndarray
    right: np.ndarray      # int_{u >= t + eps}: rows t, columns u
    left: np.ndarray       # int_{v <= t - eps}: rows v, columns t
    active: np.ndarray

    def parts(self, F):
        gap = F[None, :] - F[:, None]                 # F(u) - F(t) at [t, u]
        bad = self.active & (gap <= 0)
        if np.any(bad):
            i, j = np.argwhere(bad)[0]
            raise NumericalError(f"F is not increasing across the gap "
                                 f"({self.grid[i]:.4g}, {self.grid[j]:.4g})")
        inv = np.where(self.active, 1.0 / np.where(self.active, gap, 1.0), 0.0)
        B = self.h2d * inv
        B2 = B * inv
        J = (self.left * B).sum(axis=0) - (self.right * B).sum(axis=1)
        J2 = (self.left * B2).sum(axis=0) + (self.right * B2).sum(axis=1)
        return J, J2

    def integrals(self, F):
        """(int^t h(v,t)/(F(t)-F(v)) dv, int_t h(t,u)/(F(u)-F(t)) du) on the grid."""
        gap = F[None, :] - F[:, None]
        B = np.where(self.active, self.h2d / np.where(self.active, gap, 1.0), 0.0)
        return (self.left * B).sum(axis=0), (self.right * B).sum(axis=1)

    def residual(self, F):
        J, _ = self.parts(F)
        return self.h1 * (1 - F) - self.h2 * F + F * (1 - F) * J


def _equation(sm: SmoothedDensities) -> _Equation:
    right, left = _trapezoid_weights(sm.grid, sm.epsilon)
    active = ((right > 0) | (left > 0)) & (sm.h2d > 0)
    return _Equation(sm.grid, sm.h1.values, sm.h2.values, sm.h2d, right, left, active)


def _initial(sm: SmoothedDensities) -> np.ndarray:
    """(h1 + g2 - h2) / (g1 + g2), made increasing.

    This combines the two marginal estimates h1/g1 and 1 - h2/g2 of F0
    with weights g1 and g2; it equals F0 for exact inputs.  A small
    linear tilt keeps the start strictly increasing.
    """
    grid = sm.grid
    den = sm.g1 + sm.g2
    raw = np.where(den > 0, (sm.h1.values + sm.g2 - sm.h2.values) / np.where(den > 0, den, 1.0),
                   grid / grid[-1])
    F = np.clip(isotonic_regression(raw).x, 0.0, 1.0)
    return 0.99 * F + 0.01 * grid / grid[-1]


@dataclass(frozen=True)
class MsleInfo:
    residual: float
    iterations: int
    monotone_violations: int
    max_decrease: float
    projected: bool
    method: str = "fixed_point"


def _admissible_step(eq: _Equation, F, step):
    """F + s * step clipped to [0, 1], halving s until every active gap stays positive."""
    s = 1.0
    for _ in range(MAX_HALVINGS):
        cand = np.clip(F + s * step, 0.0, 1.0)
        gap = cand[None, :] - cand[:, None]
        if not np.any(eq.active & (gap <= 0)):
            return cand
        s *= 0.5
    raise NumericalError("no admissible step keeps F increasing across the observation gaps")


def _fixed_point(eq: _Equation, F, tol, max_iter):
    h1, h2 = eq.h1, eq.h2
    tot = h1 + h2
    best, stall = np.inf, 0
    for it in range(max_iter + 1):
        J, J2 = eq.parts(F)
        R = h1 * (1 - F) - h2 * F + F * (1 - F) * J
        res = float(np.max(np.abs(R)))
        if res < tol:
            return F, res, it
        if it == max_iter:
            break
        S = tot - (1 - 2 * F) * J + F * (1 - F) * J2
        S = np.where(S > 0, S, np.maximum(tot, 1e-12))
        F = _admissible_step(eq, F, DAMPING * R / S)
        if res < 0.999 * best:
            best, stall = res, 0
        else:
            stall += 1
            if stall > STALL_LIMIT:
                raise NumericalError(f"smoothed likelihood iteration stagnated at residual {res:.3e}")
    raise NumericalError(f"smoothed likelihood iteration hit the cap {max_iter} "
                         f"with residual {res:.3e}")


def _constrained_maximum(eq: _Equation, F_start, tol, max_iter):
    """Maximise the discrete smoothed likelihood over nondecreasing F.

    sum_t w_t {h1 log F + h2 log(1 - F)} + sum_{t,u} w_t right[t,u] h(t,u) log(F(u) - F(t))
    is a mixture likelihood in the increments of F (one extra atom beyond
    the grid carries 1 - F(M)); its stationary points with F strictly
    increasing solve the equation.
    """
    N = eq.grid.size
    w = _node_weights(eq.grid)
    nodes = np.arange(N)
    ti, ui = np.nonzero(eq.right * eq.h2d > 0)
    lo = np.concatenate([np.zeros(N, int), nodes + 1, ti + 1])
    hi = np.concatenate([nodes, np.full(N, N), ui])
    c = np.concatenate([w * eq.h1, w * eq.h2, (w[:, None] * eq.right * eq.h2d)[ti, ui]])
    keep = c > 0
    lo, hi, c = lo[keep], hi[keep], c[keep] / c[keep].sum()
    cols = np.arange(N + 1)
    A = ((cols[None, :] >= lo[:, None]) & (cols[None, :] <= hi[:, None])).astype(float)
    p0 = np.maximum(np.diff(np.concatenate([[0.0], F_start, [1.0]])), 1e-6)
    state = _mixture.support_reduction(A, c, p0 / p0.sum(), tol=tol, max_iter=max_iter)
    return np.clip(np.cumsum(state.p)[:N], 0.0, 1.0), state.iterations


def fit_msle(smoothed: SmoothedDensities, tol: float = 1e-10, max_iter: int = MAX_ITER,
             project: bool = False, full_output: bool = False):
    """Solve the smoothed likelihood equation for F on the grid.

    Damped iteration F <- F + (1/2) R(F) / S(F), where R is the left-hand
    side of the equation and S its derivative in F(t) with the other grid
    values held fixed.  Steps are halved when they would close a gap
    F(u) - F(t) over which the smoothed data put mass.  If the iteration
    stalls (the unconstrained solution is not admissible), the smoothed
    likelihood is maximised over nondecreasing F instead; ``info.method``
    then reads ``"constrained"`` and the residual may exceed ``tol`` on
    flat stretches.

    Parameters
    ----------
    project : bool
        Replace the solution by its isotonic projection (off by default;
        violations are always counted).
    """
    eq = _equation(smoothed)
    start = _initial(smoothed)
    method = "fixed_point"
    try:
        F, res, iters = _fixed_point(eq, start, tol, max_iter)
    except NumericalError as exc:
        log.warning("%s; maximising over nondecreasing F instead", exc)
        method = "constrained"
        F, iters = _constrained_maximum(eq, start, tol, max_iter)
        res = float(np.max(np.abs(eq.residual(F))))
    drops = np.diff(F)
    viol = int(np.sum(drops < -1e-12))
    if viol:
        log.info("MSLE has %d monotonicity violations (largest %.3e)", viol, -drops.min())
    if project:
        F = np.clip(isotonic_regression(F).x, 0.0, 1.0)
    gf = GridFunction(eq.grid, F)
    info = MsleInfo(res, iters, viol, float(max(0.0, -drops.min())), project, method)
    return (gf, info) if full_output else gf


# --------------------------------------------------------------------------- asymptotics

def _derivatives(f, t, h=1e-4):
    f0, fp, fm = float(f(t)), float(f(t + h)), float(f(t - h))
    return (fp - fm) / (2 * h), (fp - 2 * f0 + fm) / h ** 2


def sigma1(t: float, model: ObservationModel, F0=None) -> float:
    """1 + d(t) {int g(u,t)/(F0(t)-F0(u)) du + int g(t,w)/(F0(w)-F0(t)) dw}."""
    k1, k2 = k1_k2(t, model, F0)
    cdf = _cdf(F0, model)
    return float(1.0 + model.d(cdf, t) * (k1[0] + k2[0]))


def _cdf(F0, model):
    if F0 is None:
        M = model.support_end
        return lambda x: np.clip(np.asarray(x, dtype=float) / M, 0.0, 1.0)
    return F0


def toy_linearized(smoothed: SmoothedDensities, model: ObservationModel, F0, t: float) -> float:
    """F0(t) + RHS(t) / sigma1(t), with RHS the right side of the linear equation.

    ``t`` must be a grid node of ``smoothed``.
    """
    grid = smoothed.grid
    i = int(np.argmin(np.abs(grid - t)))
    if abs(grid[i] - t) > 1e-12:
        raise ValueError("t must be a node of the smoothing grid")
    cdf = _cdf(F0, model)
    F = np.asarray(cdf(grid), dtype=float)
    s1 = sigma1(t, model, F0)
    if not s1 > 0:
        raise NumericalError(f"sigma1({t}) = {s1} is not positive")
    Ft = F[i]
    den = model.g1(t) * (1 - Ft) + model.g2(t) * Ft
    left, right = (v[i] for v in _equation(smoothed).integrals(F))
    rhs = ((smoothed.h1.values[i] * (1 - Ft) - smoothed.h2.values[i] * Ft) / den
           + model.d(cdf, t) * (left - right))
    return float(Ft + rhs / s1)


def asymptotic_bias_variance(t: float, model: ObservationModel, F0=None, kernel=None):
    """(beta, sigma1, var) of the normal limit of the MSLE at t.

    Second derivatives of h01 = F0 g1, h02 = (1-F0) g2 and of
    h0(s, t) = (F0(t) - F0(s)) g(s, t) in t use central differences with
    step 1e-4 (exact for the piecewise-linear triangle marginals).
    """
    del kernel  # the triweight moments are fixed
    M, eps = model.support_end, model.epsilon
    if not 0 < t < M:
        raise ValueError(f"t must lie in (0, {M})")
    cdf = _cdf(F0, model)
    Ft = float(cdf(t))
    d1, d2 = _derivatives(cdf, t)
    g1p, g1pp = _derivatives(model.g1, t)
    g2p, g2pp = _derivatives(model.g2, t)
    g1, g2 = float(model.g1(t)), float(model.g2(t))
    h01pp = d2 * g1 + 2 * d1 * g1p + Ft * g1pp
    h02pp = -d2 * g2 - 2 * d1 * g2p + (1 - Ft) * g2pp
    den = g1 * (1 - Ft) + g2 * Ft
    d = Ft * (1 - Ft) / den

    def h0(s, u):
        return (float(cdf(u)) - float(cdf(s))) * float(model.g(s, u))

    def left_integrand(s):
        second = (h0(s, t + 1e-4) - 2 * h0(s, t) + h0(s, t - 1e-4)) / 1e-8
        return second / (Ft - float(cdf(s)))

    def right_integrand(u):
        second = (h0(t + 1e-4, u) - 2 * h0(t, u) + h0(t - 1e-4, u)) / 1e-8
        return second / (float(cdf(u)) - Ft)

    left = integrate.quad(left_integrand, 0.0, t - eps - 2e-4, limit=200)[0] if t - eps > 2e-4 else 0.0
    right = integrate.quad(right_integrand, t + eps + 2e-4, M, limit=200)[0] if M - t - eps > 2e-4 else 0.0
    beta = ((1 - Ft) * h01pp - Ft * h02pp) / den * MU2 + d * (left - right) * MU2
    s1 = sigma1(t, model, F0)
    return float(beta), s1, float(d * K_SQUARED / s1)


def bias_variance_record(t, beta, s1, var) -> str:
    return f"{t!r},{beta!r},{s1!r},{var!r}"
