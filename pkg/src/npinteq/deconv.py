"""Deconvolution with a known decreasing noise density g.

Observations are Z = X + Y with X ~ F on [0, 1] and Y ~ g independent.
The density of Z is h_F(z) = int g(z - x) dF(x).

Canonical gradients solve

    phi(x) + int_0^1 A(x,u) phi(u) du = -h0(x) kappa'(x) / g(0)^2

with

    A(x,u) = g'(x-u)/g(0) 1{u<x} + h0(x) g'(u-x) / {g(0) h0(u)} 1{u>=x}
             + h0(x)/g(0)^2 int_{z >= x v u} g'(z-u) g'(z-x) / h0(z) dz,

and the observation-space score is
theta(z) = {g(0) phi(z) + int phi(u) g'(z-u) du} / h0(z).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .core_types import FunctionalSpec, GridFunction, NumericalError, StepDistribution
from .fredholm import (MAX_CONDITION, FredholmProblem, FredholmSolution, JumpSpec, Quadrature,
                       _assemble_and_solve, _interpolate, _quadrature_for, _rhs_values,
                       build_quadrature, row_weights, solve_second_kind)
from .functionals import PhiFunction
from .icens import _read_rows, fit_current_status
from ._mixture import MixtureState, directional, support_reduction

log = logging.getLogger(__name__)

HHAT_FLOOR = 1e-14
EXP_CUTOFF = 30.0          # h0 ~ 1e-13 there: the exponential tail is dropped
UNIFORM_CANDIDATES = 256
VAR_LEVELS = 12
VAR_RTOL = 1e-4


# --------------------------------------------------------------------------- kernels

@dataclass(frozen=True)
class ConvolutionKernel:
    """A decreasing density g on [0, length].

    ``family`` is one of ``uniform``, ``exponential``, ``elbow`` or
    ``tabulated``.  The tabulated family interpolates ``values`` (g) and
    ``derivative`` (g') linearly on ``nodes``, which must start at 0.
    """

    family: str
    nodes: Optional[np.ndarray] = field(default=None, repr=False)
    values: Optional[np.ndarray] = field(default=None, repr=False)
    derivative: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.family not in ("uniform", "exponential", "elbow", "tabulated"):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.family != "tabulated":
            return
        if self.nodes is None or self.values is None or self.derivative is None:
            raise ValueError("a tabulated kernel needs nodes, values and derivative")
        x = np.asarray(self.nodes, dtype=float)
        v = np.asarray(self.values, dtype=float)
        d = np.asarray(self.derivative, dtype=float)
        if not (x.shape == v.shape == d.shape) or x.size < 2:
            raise ValueError("nodes, values and derivative must have equal length >= 2")
        if x[0] != 0.0 or np.any(np.diff(x) <= 0):
            raise ValueError("nodes must start at 0 and increase strictly")
        if np.any(v < 0) or not np.all(np.isfinite(v)) or not np.all(np.isfinite(d)):
            raise ValueError("g must be finite and nonnegative")
        if np.any(np.diff(v) > 1e-12 * max(1.0, v[0])):
            raise ValueError("tabulated g must be nonincreasing")
        mass = float(np.trapezoid(v, x))
        if abs(mass - 1.0) > 1e-3:
            raise ValueError(f"tabulated g integrates to {mass:.6g}, not 1")
        for name, arr in (("nodes", x), ("values", v), ("derivative", d)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def uniform(cls):
        return cls("uniform")

    @classmethod
    def exponential(cls):
        return cls("exponential")

    @classmethod
    def elbow(cls):
        return cls("elbow")

    @classmethod
    def tabulated(cls, nodes, values, derivative=None):
        nodes = np.asarray(nodes, dtype=float)
        values = np.asarray(values, dtype=float)
        if derivative is None:
            derivative = np.gradient(values, nodes)
        return cls("tabulated", nodes, values, np.asarray(derivative, dtype=float))

    @property
    def length(self) -> float:
        """Right end of the support of g (inf for the exponential)."""
        if self.family == "exponential":
            return np.inf
        if self.family == "tabulated":
            return float(self.nodes[-1])
        return 1.0

    @property
    def effective_length(self) -> float:
        return EXP_CUTOFF if self.family == "exponential" else self.length

    @property
    def g0(self) -> float:
        return float(self.g(0.0))

    @property
    def differentiable(self) -> bool:
        return self.family != "uniform"

    def g(self, y):
        y = np.asarray(y, dtype=float)
        inside = (y >= 0) & (y <= self.length)
        if self.family == "uniform":
            out = np.where(inside, 1.0, 0.0)
        elif self.family == "elbow":
            out = np.where(inside, 2.0 * (1.0 - y), 0.0)
        elif self.family == "exponential":
            out = np.where(y >= 0, np.exp(-np.maximum(y, 0.0)), 0.0)
        else:
            out = np.where(inside, np.interp(y, self.nodes, self.values), 0.0)
        return out if out.ndim else float(out)

    def dg(self, y):
        """g' on the open support; 0 elsewhere."""
        if not self.differentiable:
            raise ValueError("the uniform kernel has no derivative on which to build equations")
        y = np.asarray(y, dtype=float)
        inside = (y >= 0) & (y < self.length)
        if self.family == "elbow":
            out = np.where(inside, -2.0, 0.0)
        elif self.family == "exponential":
            out = np.where(y >= 0, -np.exp(-np.maximum(y, 0.0)), 0.0)
        else:
            out = np.where(inside, np.interp(y, self.nodes, self.derivative), 0.0)
        return out if out.ndim else float(out)

    def discontinuities(self):
        """``(a, g(a) - g(a-))`` for every jump of g on the real line."""
        out = [(0.0, self.g0)]
        if np.isfinite(self.length):
            end = float(self.g(self.length))
            if end > 0:
                out.append((self.length, -end))
        return out

    def quantile(self, v):
        """Inverse cdf of Y ~ g."""
        v = np.asarray(v, dtype=float)
        if self.family == "uniform":
            return v
        if self.family == "elbow":
            return 1.0 - np.sqrt(1.0 - v)
        if self.family == "exponential":
            return -np.log1p(-v)
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (self.values[1:] + self.values[:-1])
                                               * np.diff(self.nodes))])
        cum /= cum[-1]
        return np.interp(v, cum, self.nodes)


# --------------------------------------------------------------------------- samples

@dataclass(frozen=True)
class DeconvSample:
    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).reshape(-1)
        if z.size < 1:
            raise ValueError("a deconvolution sample needs at least one observation")
        if not np.all(np.isfinite(z)):
            raise ValueError("observations must be finite")
        if np.any(z < 0):
            raise ValueError(f"observations must be >= 0 (found {z.min()!r})")
        z.setflags(write=False)
        object.__setattr__(self, "z", z)

    @property
    def n(self) -> int:
        return int(self.z.size)

    def empirical_cdf(self, x):
        x = np.asarray(x, dtype=float)
        out = np.searchsorted(np.sort(self.z), x, side="right") / self.n
        return out if out.ndim else float(out)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["z"])
            for v in self.z:
                w.writerow([repr(float(v))])

    @classmethod
    def from_csv(cls, path) -> "DeconvSample":
        rows = _read_rows(path, ["z"])
        for line, (z,) in enumerate(rows, start=2):
            if z < 0:
                raise ValueError(f"{path}: line {line}, column z: negative value {z!r}")
        return cls(np.array([r[0] for r in rows]))


# --------------------------------------------------------------------------- densities

def _uniform_h0(g: ConvolutionKernel):
    if g.family == "uniform":
        return lambda z: np.clip(np.minimum(z, 2.0 - z), 0.0, None) * ((z >= 0) & (z <= 2))
    if g.family == "elbow":
        def h(z):
            z = np.asarray(z, dtype=float)
            return np.where((z >= 0) & (z <= 1), z * (2 - z),
                            np.where((z > 1) & (z <= 2), (2 - z) ** 2, 0.0))
        return h
    if g.family == "exponential":
        def h(z):
            z = np.asarray(z, dtype=float)
            return np.where(z < 0, 0.0, np.where(z <= 1, -np.expm1(-np.maximum(z, 0.0)),
                                                 (np.e - 1) * np.exp(-z)))
        return h
    return None


def _stieltjes_density(F0, g: ConvolutionKernel, z, panels: int = 400):
    """int g(z - x) dF0(x) over x in [0, 1] by a midpoint Stieltjes sum.

    The x-range is cut at z - length and z, so g is smooth on every panel.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    lo = np.clip(z - g.length, 0.0, 1.0)
    hi = np.clip(z, 0.0, 1.0)
    s = np.linspace(0.0, 1.0, panels + 1)
    e = lo[:, None] + (hi - lo)[:, None] * s[None, :]
    Fe = np.asarray(F0(e), dtype=float)
    mid = 0.5 * (e[:, 1:] + e[:, :-1])
    out = np.sum(g.g(z[:, None] - mid) * np.diff(Fe, axis=1), axis=1)
    atom = float(np.asarray(F0(0.0)))
    if atom > 0:
        out = out + atom * np.where(lo <= 0.0, g.g(z), 0.0)
    return out


def observation_density(F, g: ConvolutionKernel) -> Callable:
    """h_F(z) = int g(z - x) dF(x).

    ``F`` may be None (uniform on [0, 1]), a :class:`StepDistribution`, or a
    cdf supported on [0, 1].
    """
    if F is None:
        h = _uniform_h0(g)
        if h is not None:
            return h
        F = lambda x: np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    if isinstance(F, StepDistribution):
        xs, ps = F.jump_points, F.masses

        def h(z):
            z = np.asarray(z, dtype=float)
            out = g.g(z[..., None] - xs) @ ps
            return out if out.ndim else float(out)
        return h

    def h(z):
        z = np.asarray(z, dtype=float)
        out = _stieltjes_density(F, g, z.reshape(-1)).reshape(z.shape)
        return out if out.ndim else float(out)
    return h


def _cdf_of(F0):
    if F0 is None:
        return lambda x: np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    return F0


def _density_of(F0, x, step: float = 1e-6):
    if F0 is None:
        return 1.0
    return float((np.asarray(F0(x + step)) - np.asarray(F0(x - step))) / (2 * step))


# --------------------------------------------------------------------------- MLE

@dataclass(frozen=True)
class MixtureFit:
    """Deconvolution MLE with its certificates.

    ``prop21_residual`` is the largest |int g(z - tau)/h(z) dH_n(z) - 1|
    over support points; ``max_violation`` the largest excess of that
    integral above 1 over all candidates.
    """

    F: StepDistribution
    kernel: ConvolutionKernel
    loglik: float
    iterations: int
    prop21_residual: float
    max_violation: float
    trace: list = field(default_factory=list, repr=False)

    @property
    def tau1(self) -> float:
        return float(self.F.jump_points[0])

    @property
    def taum(self) -> float:
        return float(self.F.jump_points[-1])

    def hhat(self, z):
        return observation_density(self.F, self.kernel)(z)


def uniform_to_current_status(sample) -> list:
    """Map uniform-noise observations to current status pairs (z', delta)."""
    z = sample.z if isinstance(sample, DeconvSample) else np.asarray(sample, dtype=float).reshape(-1)
    if np.any(z < 0) or np.any(z > 2):
        bad = z[(z < 0) | (z > 2)][0]
        raise ValueError(f"uniform deconvolution needs z in [0, 2], got {bad!r}")
    delta = (z <= 1.0).astype(int)
    zp = np.where(delta == 1, z, z - 1.0)
    return [(float(a), int(d)) for a, d in zip(zp, delta)]


def deconv_loglik(F: StepDistribution, sample: DeconvSample, g: ConvolutionKernel) -> float:
    """(1/n) sum log h_F(z_i); -inf if some h_F(z_i) is zero."""
    h = observation_density(F, g)(sample.z)
    if np.any(h <= 0):
        return -np.inf
    return float(np.mean(np.log(h)))


def prop21_integrals(F: StepDistribution, sample: DeconvSample, g: ConvolutionKernel, x):
    """int g(z - x) / h_F(z) dH_n(z) at the points x."""
    h = np.maximum(observation_density(F, g)(sample.z), HHAT_FLOOR)
    x = np.asarray(x, dtype=float)
    return g.g(sample.z[:, None] - x.reshape(-1)[None, :]).T @ (1.0 / h) / sample.n


def _candidates(z: np.ndarray, g: ConvolutionKernel) -> np.ndarray:
    top = float(z.max())
    pts = [np.array([0.0]), z, np.linspace(0.0, top, UNIFORM_CANDIDATES)]
    if np.isfinite(g.length):
        pts.append(np.clip(z - g.length, 0.0, top))
    c = np.unique(np.concatenate(pts))
    keep = np.concatenate([[True], np.diff(c) > 1e-12])
    return c[keep]


def _initial_weights(A: np.ndarray, cand: np.ndarray, zu: np.ndarray) -> np.ndarray:
    k = min(16, cand.size)
    pick = np.unique(np.round(np.linspace(0, cand.size - 1, k)).astype(int))
    p = np.zeros(cand.size)
    p[pick] = 1.0
    uncovered = A @ p <= 0
    if np.any(uncovered):
        p[np.searchsorted(cand, zu[uncovered])] = 1.0
    return p / p.sum()


def _golden_max(f, a, b, iters: int = 60):
    r = 0.5 * (np.sqrt(5.0) - 1.0)
    c, d = b - r * (b - a), a + r * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - r * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + r * (b - a)
            fd = f(d)
    return (c, fc) if fc >= fd else (d, fd)


def fit_mle_deconv(sample: DeconvSample, g: ConvolutionKernel, tol: float = 1e-10,
                   max_iter: int = 10000) -> MixtureFit:
    """Nonparametric MLE of F from Z = X + Y.

    Support reduction on a candidate grid built from the observations.
    For the uniform kernel the problem is the current status problem on
    transformed data and is solved by isotonic regression.

    Raises
    ------
    ValueError
        ``tol <= 0`` or a sample of two or more identical observations.
    NumericalError
        Iteration cap or a stalled line search.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if sample.n > 1 and np.all(sample.z == sample.z[0]):
        raise ValueError("degenerate sample: all observations are equal")
    if g.family == "uniform":
        F = fit_current_status(uniform_to_current_status(sample))
        ll = deconv_loglik(F, sample, g)
        d = prop21_integrals(F, sample, g, F.jump_points) - 1.0
        return MixtureFit(F, g, ll, 0, float(np.max(np.abs(d))) if d.size else 0.0,
                          float(np.max(d)) if d.size else 0.0, [])
    zu, counts = np.unique(sample.z, return_counts=True)
    c = counts / sample.n
    cand = _candidates(zu, g)
    A = g.g(zu[:, None] - cand[None, :])
    p0 = _initial_weights(A, cand, zu)
    trace: list = []
    state = support_reduction(A, c, p0, tol=tol, max_iter=max_iter, trace=trace)
    iterations = state.iterations
    if g.family == "tabulated":
        cand, A, state, extra = _polish(zu, c, g, cand, A, state, tol, max_iter, trace)
        iterations += extra
    return _finish(state, cand, zu, c, A, g, iterations, trace)


def _polish(zu, c, g, cand, A, state: MixtureState, tol, max_iter, trace):
    """One golden-section refinement between the neighbours of each support point."""
    q = A @ state.p
    dfun = lambda x: float(g.g(zu - x) @ (c / q)) - 1.0
    active = np.nonzero(state.p > 0)[0]
    new = []
    for j in active:
        lo = cand[max(j - 1, 0)]
        hi = cand[min(j + 1, cand.size - 1)]
        x, val = _golden_max(dfun, lo, hi)
        if val > tol and np.min(np.abs(cand - x)) > 1e-12:
            new.append(x)
    if not new:
        return cand, A, state, 0
    old_points, old_p = cand[active], state.p[active]
    cand = np.unique(np.concatenate([cand, new]))
    A = g.g(zu[:, None] - cand[None, :])
    p0 = np.zeros(cand.size)
    p0[np.searchsorted(cand, old_points)] = old_p
    state = support_reduction(A, c, p0, tol=tol, max_iter=max_iter, trace=trace)
    return cand, A, state, state.iterations


def _finish(state, cand, zu, c, A, g, iterations, trace) -> MixtureFit:
    p = state.p
    keep = p > 0
    F = StepDistribution.from_points(cand[keep], p[keep] / p[keep].sum(),
                                     support_end=max(1.0, float(cand[-1])))
    d = directional(A, c, p)
    prop = float(np.max(np.abs(d[keep])))
    viol = float(np.max(d))
    return MixtureFit(F, g, state.loglik, iterations, prop, viol, trace)


# --------------------------------------------------------------------------- efficiency equations

def _elbow_uniform_kernel(x, u):
    mx, mn = np.maximum(x, u), np.minimum(x, u)
    hx = x * (2 - x)
    return (-1.0 * (u < x) - hx * (u >= x) / (u * (2 - u))
            + hx * (0.5 * np.log((2 - mx) / mx) + mn / (1 - mn)))


def _exp_phi_tail(m):
    """int_m^inf e^{-2z} / h0(z) dz for uniform F0 and exponential g."""
    e1 = np.exp(-1.0)
    return (e1 - np.exp(-m)) + np.log((1 - e1) / -np.expm1(-m)) + e1 / (np.e - 1)


def _exp_uniform_kernel(x, u):
    h = _uniform_h0(ConvolutionKernel.exponential())
    below = -np.exp(-(x - u)) * (u < x)
    above = -h(x) * np.exp(-np.abs(u - x)) / h(u) * (u >= x)
    return below + above + h(x) * np.exp(x + u) * _exp_phi_tail(np.maximum(x, u))


class _GenericKernel:
    """The kernel A assembled with a z-quadrature for the third term."""

    def __init__(self, g: ConvolutionKernel, h0: Callable, grid_size: int):
        self.g, self.h0 = g, h0
        top = 1.0 + g.effective_length
        hints = (0.0, top) if np.isfinite(g.length) else (0.0,)
        brk = tuple(b for b in (1.0, g.effective_length) if 0 < b < top)
        q = build_quadrature((0.0, top), max(4 * grid_size, 4000), "gauss", brk, hints, VAR_LEVELS)
        hz = np.asarray(h0(q.nodes), dtype=float)
        ok = hz > HHAT_FLOOR
        self.z, self.wz = q.nodes[ok], q.weights[ok] / hz[ok]

    def __call__(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        xs, us = x.reshape(-1), u.reshape(-1)
        g, g0 = self.g, self.g.g0
        hx = np.asarray(self.h0(xs), dtype=float)[:, None]
        hu = np.asarray(self.h0(us), dtype=float)[None, :]
        X, U = xs[:, None], us[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            second = np.where(U >= X, hx * g.dg(U - X) / (g0 * hu), 0.0)
        Gx = g.dg(self.z[:, None] - xs[None, :])
        Gu = g.dg(self.z[:, None] - us[None, :])
        third = hx / g0 ** 2 * ((Gx * self.wz[:, None]).T @ Gu)
        out = np.where(U < X, g.dg(X - U) / g0, 0.0) + second + third
        return out.reshape(np.broadcast_shapes(x.shape, u.shape))


def _kernel_A(F0, g: ConvolutionKernel, grid_size: int):
    if F0 is None and g.family == "elbow":
        return _elbow_uniform_kernel
    if F0 is None and g.family == "exponential":
        return _exp_uniform_kernel
    return _GenericKernel(g, observation_density(F0, g), grid_size)


def _require_differentiable(g: ConvolutionKernel):
    if not g.differentiable:
        raise ValueError("the uniform kernel has no g'; use the current status reduction")


def _pinned(sol: FredholmSolution) -> GridFunction:
    """Add phi(0) = phi(1) = 0 to a solution tabulated at interior nodes."""
    gf = sol.solution
    grid = np.concatenate([[0.0], gf.grid, [1.0]])
    vals = np.concatenate([[0.0], gf.values, [0.0]])
    keep = np.concatenate([[gf.grid[0] > 0], np.ones(gf.grid.size, bool), [gf.grid[-1] < 1]])
    return GridFunction(grid[keep], vals[keep], gf.jump_point, gf.value_left)


def solve_phi_deconv(F0, g: ConvolutionKernel, spec: FunctionalSpec, grid_size: int = 2000,
                     rule: str = "gauss", dump_system: Optional[str] = None,
                     full_output: bool = False):
    """phi for a smooth functional under deconvolution.

    ``F0`` is None for the uniform distribution on [0, 1] (closed-form
    kernels for the elbow and exponential g) or a cdf on [0, 1].  The
    solution is pinned to 0 at both endpoints.
    """
    _require_differentiable(g)
    h0 = observation_density(F0, g)
    g0 = g.g0
    k = spec.gradient_derivative
    if F0 is None and g.family == "elbow" and spec.label == "mean":
        rhs = lambda x: -0.25 * x * (2 - x)
    else:
        rhs = lambda x: -np.asarray(h0(x)) * np.asarray(k(x)) / g0 ** 2
    problem = FredholmProblem(_kernel_A(F0, g, grid_size), rhs, (0.0, 1.0),
                              singularity_hints=(0.0, 1.0))
    sol = solve_second_kind(problem, grid_size, rule, dump_system)
    phi = _pinned(sol)
    return (phi, sol) if full_output else phi


def solve_phi_local(t: float, F0, g: ConvolutionKernel, grid_size: int = 2000,
                    rule: str = "gauss", dump_system: Optional[str] = None,
                    full_output: bool = False):
    """phi for the local functional at t; the solution jumps at t."""
    _require_differentiable(g)
    if not 0.0 < t < 1.0:
        raise ValueError(f"t must lie inside (0, 1), got {t!r}")
    h0 = observation_density(F0, g)
    g0 = g.g0

    def rhs(x):
        x = np.asarray(x, dtype=float)
        return np.where(x < t, np.asarray(h0(x)) * g.dg(np.maximum(t - x, 0.0)), 0.0) / g0 ** 2

    left = float(h0(t)) * float(g.dg(0.0)) / g0 ** 2
    problem = FredholmProblem(_kernel_A(F0, g, grid_size), rhs, (0.0, 1.0),
                              rhs_jump=JumpSpec(t, left, 0.0), singularity_hints=(0.0, 1.0),
                              breakpoints=(t,))
    sol = solve_second_kind(problem, grid_size, rule, dump_system)
    phi = _pinned(sol)
    return (phi, sol) if full_output else phi


def _theta_numerator(phi: GridFunction, g: ConvolutionKernel, z, panels: int = 64):
    """g(0) phi(z) + int_0^1 phi(u) g'(z - u) du with phi = 0 off [0, 1]."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    gx, gw = np.polynomial.legendre.leggauss(8)
    lo = np.clip(z - g.length, 0.0, 1.0)
    hi = np.clip(z, 0.0, 1.0)
    cuts = [lo, hi]
    if phi.jump_point is not None:
        cuts.insert(1, np.clip(phi.jump_point, lo, hi))
    total = np.zeros_like(z)
    for a, b in zip(cuts[:-1], cuts[1:]):
        e = a[:, None] + (b - a)[:, None] * np.linspace(0.0, 1.0, panels + 1)[None, :]
        mid = 0.5 * (e[:, 1:] + e[:, :-1])
        half = 0.5 * (e[:, 1:] - e[:, :-1])
        u = mid[:, :, None] + half[:, :, None] * gx
        w = half[:, :, None] * gw
        vals = phi(u) * g.dg(z[:, None, None] - u)
        total += np.sum(vals * w, axis=(1, 2))
    inside = (z >= 0) & (z <= 1)
    return g.g0 * np.where(inside, phi(np.clip(z, 0.0, 1.0)), 0.0) + total


def _variance_quadrature(g: ConvolutionKernel, jump, levels: int, grid_size: int) -> Quadrature:
    top = 1.0 + g.effective_length
    brk = [1.0]
    if jump is not None:
        brk += [jump, jump + g.effective_length]
    if np.isfinite(g.length):
        brk.append(g.length)
        hints = (0.0, top)
    else:
        hints = (0.0,)
    return build_quadrature((0.0, top), grid_size, "gauss", tuple(brk), hints, levels)


def theta_and_variance_deconv(phi: GridFunction, F0, g: ConvolutionKernel,
                              grid_size: int = 4000):
    """theta on the support of h0 and its variance int theta^2 h0.

    Returns
    -------
    theta : GridFunction
        Tabulated at the nodes of the variance quadrature.
    var : float
    """
    _require_differentiable(g)
    h0 = observation_density(F0, g)
    prev = None
    for levels in range(4, VAR_LEVELS + 1, 2):
        quad = _variance_quadrature(g, phi.jump_point, levels, grid_size)
        z = quad.nodes
        hz = np.asarray(h0(z), dtype=float)
        if np.any(hz <= HHAT_FLOOR):
            raise NumericalError(f"h0 underflows at z = {z[hz <= HHAT_FLOOR][0]!r}")
        theta = _theta_numerator(phi, g, z) / hz
        contrib = quad.weights * theta ** 2 * hz
        var = float(contrib.sum())
        top = z[-1] if np.isfinite(g.length) else None
        if top is not None:
            delta = 0.05 * (1.0 + g.length) * 0.5 ** levels
            tail = float(contrib[np.abs(1.0 + g.length - z) < delta].sum())
        else:
            tail = 0.0
        if tail < VAR_RTOL * max(var, 1e-300):
            break
        prev = var
    del prev
    return GridFunction(z, theta), var


def integrate_theta_h0(theta: GridFunction, F0, g: ConvolutionKernel) -> float:
    """int theta h0 over the tabulation nodes (trapezoid)."""
    h0 = observation_density(F0, g)
    z = theta.grid
    return float(np.trapezoid(theta.values * np.asarray(h0(z)), z))


def current_status_variance(F0) -> float:
    """int_0^1 F0 (1 - F0) dt."""
    if isinstance(F0, StepDistribution):
        pts = np.concatenate([[0.0], F0.jump_points[(F0.jump_points > 0) & (F0.jump_points < 1)],
                              [1.0]])
        vals = np.asarray(F0(pts[:-1]), dtype=float)
        return float(np.sum(vals * (1 - vals) * np.diff(pts)))
    if F0 is None:
        return 1.0 / 6.0
    return float(integrate.quad(lambda t: float(F0(t)) * (1 - float(F0(t))), 0.0, 1.0,
                                limit=500)[0])


# --------------------------------------------------------------------------- the MLE side

def _hhat_pieces(fit: MixtureFit, order: int = 32):
    """z-nodes and weights for integrals over [tau_1, tau_m + length).

    Panels are cut at every tau_k and tau_k + length so that hhat is smooth
    on each.  For the exponential the part beyond tau_m is left to the
    caller (it has a closed form).
    """
    g = fit.kernel
    tau = fit.F.jump_points
    cuts = [tau]
    if np.isfinite(g.length):
        cuts.append(tau + g.length)
    e = np.unique(np.concatenate(cuts))
    gx, gw = np.polynomial.legendre.leggauss(order)
    mid, half = 0.5 * (e[1:] + e[:-1]), 0.5 * np.diff(e)
    z = (mid[:, None] + half[:, None] * gx).ravel()
    w = (half[:, None] * gw).ravel()
    return z, w


def bar_phi_matrix(fit: MixtureFit, sample: DeconvSample, spec: FunctionalSpec):
    """Solve the finite adjoint system at the jump points of the MLE.

    The jumps beta of the step function bar phi solve

        sum_j M_ij beta_j = kappa(tau_i) - int kappa dF,
        M_ij = int_{z >= tau_i v tau_j} g(z - tau_i) g(z - tau_j) / hhat(z) dz,

    and bar theta(z) = sum_j beta_j g(z - tau_j) / hhat(z) on the support
    of hhat.  The value of int bar theta dH_n is stored in the
    ``residual_sup`` field of the returned PhiFunction.

    Raises
    ------
    NumericalError
        Singular system, or int bar theta dH_n exceeding 1e-8.
    """
    g = fit.kernel
    tau, p = fit.F.jump_points, fit.F.masses
    z, w = _hhat_pieces(fit)
    G = g.g(z[:, None] - tau[None, :])
    h = G @ p
    floor = h <= HHAT_FLOOR
    if np.any(floor & np.any(G > 0, axis=1)):
        log.info("hhat floor hit at %d quadrature nodes", int(np.sum(floor & np.any(G > 0, axis=1))))
    inv = np.where(floor, 0.0, 1.0 / np.maximum(h, HHAT_FLOOR))
    M = G.T @ (G * (w * inv)[:, None])
    if not np.isfinite(g.length):
        # beyond tau_m: hhat = C e^{-z}, so the integrand is e^{tau_i + tau_j - z} / C
        C = float(p @ np.exp(tau - tau[-1]))
        M += np.exp((tau[:, None] - tau[-1]) + (tau[None, :] - tau[-1])) / C
    kap = np.asarray(spec.gradient(tau), dtype=float)
    b = kap - float(p @ kap)
    cond = np.linalg.cond(M)
    if not cond < 1e12:
        raise NumericalError(f"adjoint system is singular (condition {cond:.3e})")
    beta = np.linalg.solve(M, b)
    # int bar theta dH_n = sum_j beta_j int g(z - tau_j) / hhat dH_n
    d = prop21_integrals(fit.F, sample, g, tau)
    resid = float(beta @ d)
    if abs(resid) > 1e-8:
        raise NumericalError(f"int bar theta dH_n = {resid:.3e} exceeds 1e-8")
    top = max(1.0, float(tau[-1]))
    smooth = GridFunction(np.array([0.0, top]), np.zeros(2))
    bar_phi = PhiFunction(smooth, tuple(zip(map(float, tau), map(float, beta))),
                          residual_sup=abs(resid), grid_size=int(tau.size))
    end = float(tau[-1] + g.effective_length)
    grid = np.unique(np.concatenate([np.linspace(0.0, end, 4001), tau]))
    return bar_phi, GridFunction(grid, _bar_theta(fit, beta, grid))


def _bar_theta(fit: MixtureFit, beta, z):
    g = fit.kernel
    G = g.g(np.asarray(z)[:, None] - fit.F.jump_points[None, :])
    h = G @ fit.F.masses
    inside = h > HHAT_FLOOR
    return np.where(inside, (G @ beta) / np.where(inside, h, 1.0), 0.0)


# --------------------------------------------------------------------------- theta at the MLE

def _elbow_inverse_h(F: StepDistribution):
    """s -> int_{tau_1}^s dz / hhat(z), exact: the elbow hhat is piecewise linear."""
    tau, p = F.jump_points, F.masses
    e = np.unique(np.concatenate([tau, tau + 1.0]))
    mid = 0.5 * (e[1:] + e[:-1])
    on = (mid[:, None] >= tau) & (mid[:, None] < tau + 1.0)
    b = -2.0 * (on * p).sum(axis=1)
    a = 2.0 * (on * p * (1.0 + tau)).sum(axis=1)

    def piece(k, s):
        lo, hi = a[k] + b[k] * e[k], a[k] + b[k] * s
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(b[k] != 0, np.log(hi / lo) / np.where(b[k] != 0, b[k], 1.0),
                            (s - e[k]) / lo)

    cum = np.concatenate([[0.0], np.cumsum(piece(np.arange(mid.size), e[1:]))])

    def C(s):
        s = np.asarray(s, dtype=float)
        k = np.clip(np.searchsorted(e, s, side="right") - 1, 0, mid.size - 1)
        return cum[k] + piece(k, s)
    return C


@dataclass(frozen=True)
class MleTheta:
    """theta of the MLE on [0, 2], tabulated at the nodes of ``quadrature``.

    When tau_m < 1 and phi(tau_m-) != 0 the extension is a measure: on top
    of the density it puts ``atom = (1 + tau_m, mass)``.  ``phi`` holds the
    node values of phi on [tau_1, tau_m).  ``transform(x)`` evaluates
    int theta(z) g(z - x) dz, equal to kappa(x) - int kappa dFhat on (0, 1).
    """

    quadrature: Quadrature
    values: np.ndarray
    phi: Optional[GridFunction]
    kernel: ConvolutionKernel
    atom: tuple = (2.0, 0.0)

    def integrate(self, density: Callable) -> float:
        q = self.quadrature
        dens = float(q.weights @ (self.values * np.asarray(density(q.nodes), dtype=float)))
        at, mass = self.atom
        return dens + (mass * float(density(at)) if mass else 0.0)

    def transform(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        q = self.quadrature
        W = row_weights(q, x, lambda s: np.stack([s, s + 1.0], axis=1))
        G = self.kernel.g(q.nodes[None, :] - x[:, None])
        at, mass = self.atom
        return (W * G) @ self.values + mass * self.kernel.g(at - x)


def _merge(*quads: Quadrature) -> Quadrature:
    x = np.concatenate([q.nodes for q in quads])
    w = np.concatenate([q.weights for q in quads])
    order = np.argsort(x)
    edges = np.unique(np.concatenate([q.panel_edges for q in quads]))
    return Quadrature(x[order], w[order], 0, edges)


def theta_at_mle(fit: MixtureFit, spec: FunctionalSpec, grid_size: int = 400) -> MleTheta:
    """theta_Fhat for an elbow fit, extended to all of [0, 2].

    On [tau_1, tau_m) phi solves the second-kind equation with hhat in place
    of h0; theta = {g(0) phi(z) + int phi(u) g'(z - u) du} / hhat(z) on
    [tau_1, tau_m + 1).  Below tau_1 theta comes from the Volterra equation
    g(0) theta(x) = -k(x) - int theta(z) g'(z - x) dz; above tau_m + 1 from
    its derivative, which for the elbow reads
    theta(x + 1) = theta(x) + theta'(x) + k'(x)/2.  A nonzero phi(tau_m-)
    makes theta jump at tau_m; matching the derivative of the transform
    there needs the mass -2 phi(tau_m-) / hhat(tau_m) at 1 + tau_m.
    """
    g = fit.kernel
    if g.family != "elbow":
        raise ValueError("theta_at_mle is implemented for the elbow kernel")
    if grid_size < 16:
        raise ValueError("grid_size must be at least 16")
    tau, p = fit.F.jump_points, fit.F.masses
    t1, tm = float(tau[0]), float(tau[-1])
    hhat = fit.hhat
    k = lambda x: np.asarray(spec.gradient_derivative(x), dtype=float) * np.ones_like(x)

    # phi on [tau_1, tau_m)
    if tau.size > 1:
        C = _elbow_inverse_h(fit.F)

        def kernel(x, u):
            hx = hhat(x)
            first = -((u < x) & (x - u < 1.0)).astype(float)
            second = np.where((u >= x) & (u - x < 1.0), -hx / hhat(u), 0.0)
            third = hx * np.maximum(C(1.0 + np.minimum(x, u)) - C(np.maximum(x, u)), 0.0)
            return first + second + third

        problem = FredholmProblem(
            kernel=kernel, rhs=lambda x: -hhat(x) * k(x) / 4.0, domain=(t1, tm),
            singularity_hints=(tm,), breakpoints=tuple(tau[1:-1]),
            kernel_jumps=lambda x: np.stack([x, x - 1.0, x + 1.0], axis=1))
        qp = _quadrature_for(problem, grid_size, "gauss")
        phi_nodes, _ = _assemble_and_solve(problem, qp, None, MAX_CONDITION)
        phi = GridFunction(qp.nodes, phi_nodes)

        def phi_at(z):
            return _interpolate(problem, qp, phi_nodes, z, _rhs_values(problem, z))

        def window(z):
            # int_{z-1}^{z} phi(u) du over [tau_1, tau_m)
            W = row_weights(qp, z, lambda s: np.stack([s, s - 1.0], axis=1))
            inside = (qp.nodes[None, :] < z[:, None]) & (qp.nodes[None, :] > z[:, None] - 1.0)
            return (W * inside) @ phi_nodes
    else:
        phi = None
        phi_at = lambda z: np.zeros_like(z)
        window = lambda z: np.zeros_like(z)

    top = min(tm + 1.0, 2.0)
    brk = np.concatenate([tau[1:], tau + 1.0])
    qm = build_quadrature((t1, top), 4 * grid_size, "gauss", tuple(brk[(brk > t1) & (brk < top)]))
    zm = qm.nodes
    num = -2.0 * window(zm)
    lower = zm < tm
    if np.any(lower):
        num[lower] += 2.0 * phi_at(zm[lower])
    theta_m = num / hhat(zm)
    parts, values = [qm], [theta_m]

    if t1 > 0:
        ql = build_quadrature((0.0, t1), max(grid_size // 4, 16), "gauss")
        x = ql.nodes
        Wl = row_weights(ql, x, lambda s: s[:, None]) * (x[None, :] > x[:, None])
        Wm = row_weights(qm, x + 1.0, lambda s: s[:, None]) * (zm[None, :] < x[:, None] + 1.0)
        rhs = -k(x) / 2.0 + Wm @ theta_m
        parts.insert(0, ql)
        values.insert(0, np.linalg.solve(np.eye(x.size) - Wl, rhs))

    if top < 2.0:
        qr = build_quadrature((top, 2.0), max(grid_size // 4, 16), "gauss")
        x = qr.nodes - 1.0
        N = -2.0 * float(qp.weights @ phi_nodes) if phi is not None else 0.0
        hx = np.asarray(hhat(x), dtype=float)
        step = 1e-6
        dk = (k(x + step) - k(x - step)) / (2 * step)
        parts.append(qr)
        values.append(N / hx + 2.0 * N / hx ** 2 + dk / 2.0)
        atom = (top, -2.0 * float(phi_at(np.array([tm]))[0]) / float(hhat(tm)))
    else:
        atom = (2.0, 0.0)

    return MleTheta(_merge(*parts), np.concatenate(values), phi, g, atom)


# --------------------------------------------------------------------------- exponential

@dataclass(frozen=True)
class TwoLevel:
    """below on [0, t), above on [t, inf)."""

    t: float
    below: float
    above: float

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        out = np.where(z < self.t, self.below, self.above)
        return out if out.ndim else float(out)


def _K_t(t, F):
    if isinstance(F, StepDistribution):
        x, pm = F.jump_points, F.masses
        m = x < t
        return float(np.sum((np.exp(-(t - x[m])) - 1.0) * pm[m]))
    if F is None:
        return 1.0 - np.exp(-t) - t
    # int_{[0,t)} c dF with c(t) = 0: integrate by parts
    val = integrate.quad(lambda x: float(F(x)) * np.exp(-(t - x)), 0.0, t, limit=200)[0]
    return -val


def exponential_kt_functional(t: float) -> FunctionalSpec:
    """K_t(F) = int_{[0,t)} (e^{-(t-x)} - 1) dF(x) as a linear functional."""
    def c(x):
        x = np.asarray(x, dtype=float)
        return np.where(x < t, np.expm1(-(t - x)), 0.0)

    def k(x):
        x = np.asarray(x, dtype=float)
        return np.where(x < t, np.exp(-(t - x)), 0.0)

    return FunctionalSpec(c, k, f"K_t({t!r})", integrand=c, check_derivative=False)


def exponential_closed_forms(t: float, F=None):
    """K_t, theta, phi and sigma_t^2 for exponential deconvolution.

    ``F`` is a StepDistribution, a cdf, or None for uniform on [0, 1].

    Returns
    -------
    K : float
        int_{[0,t)} (e^{-(t-x)} - 1) dF(x).
    theta : TwoLevel
        -1{z < t} - K.
    phi : PhiFunction
        -(1+K) F(x) for x < t and -K (F(x) - 1) for x >= t.
    sigma2 : float
        (1+K)^2 H(t) + K^2 (1 - H(t)) with H(t) = -K.
    """
    end = F.support_end if isinstance(F, StepDistribution) else 1.0
    if not 0.0 < t < end:
        raise ValueError(f"t must be interior to (0, {end}), got {t!r}")
    K = float(_K_t(t, F))
    theta = TwoLevel(t, -1.0 - K, -K)
    cdf = _cdf_of(F)
    if isinstance(F, StepDistribution):
        jumps = {}
        for x, pm in zip(F.jump_points, F.masses):
            jumps[float(x)] = -(1.0 + K) * pm + (pm if x >= t else 0.0)
        jumps[float(t)] = jumps.get(float(t), 0.0) + float(F.left_limit(t)) + K
        smooth = GridFunction(np.array([0.0, end]), np.zeros(2))
        disc = tuple(sorted(jumps.items()))
    else:
        grid = np.unique(np.concatenate([np.linspace(0.0, end, 2001), [t]]))
        J = float(cdf(t)) + K
        vals = -(1.0 + K) * np.asarray(cdf(grid), dtype=float)
        smooth = GridFunction(grid, vals)
        disc = ((float(t), J),)

    def exact(x, left=False):
        x = np.asarray(x, dtype=float)
        Fx = np.asarray(F.left_limit(x) if left and isinstance(F, StepDistribution) else cdf(x),
                        dtype=float)
        on = (x > t) | ((x == t) & (not left))
        out = np.where(on, -K * (Fx - 1.0), -(1.0 + K) * Fx)
        return out if out.ndim else float(out)

    phi = PhiFunction(smooth, disc, exact=exact, cdf=F)
    H = -K
    sigma2 = (1.0 + K) ** 2 * H + K ** 2 * (1.0 - H)
    return K, theta, phi, sigma2


# --------------------------------------------------------------------------- local limits

def local_scaling_constant_deconv(t0: float, F0, g: ConvolutionKernel,
                                  case: str = "smooth_decreasing", f0: Optional[float] = None) -> float:
    """Standardizing factor c with c n^{1/3} (F_n(t0) - F0(t0)) -> 2Z.

    ``smooth_decreasing`` uses {2 g(0)^2 / (f0 h0)}^{1/3};
    ``discontinuity_set`` uses {2 sum_i (jump_i)^2 / h0(t0 + a_i)}^{1/3} f0^{-1/3}
    over the jumps a_i of g.
    """
    f = _density_of(F0, t0) if f0 is None else float(f0)
    if not f > 0:
        raise ValueError(f"density at t0 must be positive, got {f!r}")
    h0 = observation_density(F0, g)
    if case == "smooth_decreasing":
        _require_differentiable(g)
        h = float(h0(t0))
        if not h > 0:
            raise ValueError("h0(t0) must be positive")
        return float((2.0 * g.g0 ** 2 / (f * h)) ** (1.0 / 3.0))
    if case == "discontinuity_set":
        total = 0.0
        for a, jump in g.discontinuities():
            h = float(h0(t0 + a))
            if not h > 0:
                raise ValueError(f"h0 vanishes at {t0 + a!r}")
            total += jump ** 2 / h
        return float((2.0 * total) ** (1.0 / 3.0) * f ** (-1.0 / 3.0))
    raise ValueError(f"unknown case {case!r}")
