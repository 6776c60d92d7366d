"""Canonical gradients for smooth functionals under interval censoring.

The integral equation for phi is

    phi(x) = d_F(x) { k(x) - int W(x,u) {phi(x) - phi(u)} du },
    W(x,u) = g(x ^ u, x v u) / |F(x) - F(u)|,

with W = 0 when F(x) = F(u).  It is handed to :mod:`npinteq.fredholm` as
a difference kernel d_F(x) W(x,u), which makes the discrete maximum
principle exact.  The ratio xi = phi / {F(1-F)} is computed directly from
the equation, so theta stays finite where F is 0 or 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq

from .core_types import FunctionalSpec, GridFunction, NumericalError, StepDistribution
from .fredholm import (FredholmProblem, JumpSpec, Quadrature, build_quadrature, row_weights,
                       solve_second_kind)
from .icens import ObservationModel

DENOM_FLOOR = 1e-12


@dataclass(frozen=True)
class PhiFunction:
    """phi as a continuous part plus jumps at listed locations.

    ``smooth_part`` is tabulated on a grid and interpolated linearly;
    ``discrete_jumps`` holds ``(location, jump)`` pairs, added
    right-continuously.  When built by a solver, ``exact`` evaluates the
    Nyström extension and ``xi`` the ratio phi / {F(1-F)}.
    """

    smooth_part: GridFunction
    discrete_jumps: tuple = ()
    exact: Optional[Callable] = field(default=None, repr=False, compare=False)
    xi: Optional[Callable] = field(default=None, repr=False, compare=False)
    cdf: Optional[object] = field(default=None, repr=False, compare=False)
    residual_sup: float = 0.0
    grid_size: int = 0
    quadrature: Optional[Quadrature] = field(default=None, repr=False, compare=False)
    node_values: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def jump_part(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for loc, jump in self.discrete_jumps:
            out = out + jump * (x >= loc)
        return out

    def __call__(self, x, left: bool = False):
        if self.exact is not None:
            return self.exact(x, left=left)
        x = np.asarray(x, dtype=float)
        if left:
            return self.smooth_part(x) + self.jump_part(np.nextafter(x, -np.inf))
        return self.smooth_part(x) + self.jump_part(x)

    def jump_bound(self, F: StepDistribution) -> float:
        """Measured K2 = max |phi jump| / (F jump) over the jumps of F."""
        if F.jump_points.size == 0:
            return 0.0
        jumps = dict(self.discrete_jumps)
        ratios = [abs(jumps.get(float(x), 0.0)) / p for x, p in zip(F.jump_points, F.masses)]
        return float(max(ratios))

    def to_grid_function(self) -> GridFunction:
        g = self.smooth_part.grid
        return GridFunction(g, self(g))


@dataclass(frozen=True)
class ThetaFunction:
    phi: PhiFunction
    cdf: object

    def __call__(self, t, u, d1, d2):
        t = np.asarray(t, dtype=float)
        u = np.asarray(u, dtype=float)
        d1 = np.asarray(d1)
        d2 = np.asarray(d2)
        d3 = 1 - d1 - d2
        F = self.cdf
        Ft = np.asarray(F(t), dtype=float)
        Fu = np.asarray(F(u), dtype=float)
        pt, pu = self.phi(t), self.phi(u)
        use_xi = self.phi.xi is not None and self.phi.cdf is F
        with np.errstate(divide="ignore", invalid="ignore"):
            if use_xi:
                a = self.phi.xi(t) * (1 - Ft)
                c = self.phi.xi(u) * Fu
            else:
                if np.any((d1 == 1) & (Ft <= DENOM_FLOOR)) or np.any((d3 == 1) & (1 - Fu <= DENOM_FLOOR)):
                    raise NumericalError("theta denominator underflow")
                a = pt / Ft
                c = pu / (1 - Fu)
            gap = Fu - Ft
            b = np.where(gap > 0, (pu - pt) / np.where(gap > 0, gap, 1.0), 0.0)
        out = -np.where(d1 == 1, a, 0.0) - np.where(d2 == 1, b, 0.0) + np.where(d3 == 1, c, 0.0)
        return out if out.ndim else float(out)


def _left_limit(F, x):
    if isinstance(F, StepDistribution):
        return F.left_limit(x)
    return F(x)


def _triangle_jumps(model: ObservationModel):
    """g drops to zero across |u - x| = eps."""
    eps = model.epsilon
    if eps <= 0:
        return None
    return lambda x: np.stack([np.asarray(x, float) - eps, np.asarray(x, float) + eps], axis=1)


class _IcEquation:
    """Discretised phi-equation for a given cdf, with Nyström evaluation."""

    def __init__(self, model: ObservationModel, F, k: Callable):
        self.model = model
        self.F = F
        self.k = k
        self.kernel_jumps = _triangle_jumps(model)

    def W(self, x, u, Fx=None, Fu=None):
        x, u = np.broadcast_arrays(np.asarray(x, float), np.asarray(u, float))
        Fx = np.asarray(self.F(x) if Fx is None else Fx, dtype=float)
        Fu = np.asarray(self.F(u) if Fu is None else Fu, dtype=float)
        gap = np.abs(Fx - Fu)
        g = self.model.g(np.minimum(x, u), np.maximum(x, u))
        if np.any((g > 0) & (gap > 0) & (gap < DENOM_FLOOR)):
            raise NumericalError("F(x) - F(u) below 1e-12 outside a constancy interval")
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where((gap > 0) & (g > 0), g / np.where(gap > 0, gap, 1.0), 0.0)

    def denom(self, x, Fx):
        return self.model.g1(x) * (1 - Fx) + self.model.g2(x) * Fx

    def d(self, x, Fx):
        D = self.denom(x, Fx)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(D > 0, Fx * (1 - Fx) / np.where(D > 0, D, 1.0), 0.0)

    def difference_kernel(self, x, u):
        Fx = np.asarray(self.F(x), dtype=float)
        return self.d(x, Fx) * self.W(x, u, Fx=Fx)

    def rhs(self, x):
        x = np.asarray(x, dtype=float)
        return self.d(x, np.asarray(self.F(x), dtype=float)) * self.k(x)

    def evaluate(self, quad: Quadrature, phi_nodes, x, left=False, want_xi=False):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        Fx = np.asarray(_left_limit(self.F, x) if left else self.F(x), dtype=float)
        kx = np.asarray(self.k(np.nextafter(x, -np.inf) if left else x), dtype=float)
        kx = np.broadcast_to(kx, x.shape)
        Wm = self.W(x[:, None], quad.nodes[None, :], Fx=Fx[:, None],
                    Fu=np.asarray(self.F(quad.nodes))[None, :]) * row_weights(quad, x, self.kernel_jumps)
        S = Wm.sum(axis=1)
        T = Wm @ phi_nodes
        dx = self.d(x, Fx)
        phi = dx * (kx + T) / (1.0 + dx * S)
        if not want_xi:
            return phi
        D = self.denom(x, Fx)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = np.where(D > 0, (kx - (phi * S - T)) / np.where(D > 0, D, 1.0), 0.0)
        return phi, xi


def _ic_phi(model: ObservationModel, F, spec: FunctionalSpec, grid_size: int,
            local_t: Optional[float] = None, rule: str = "gauss",
            dump_system: Optional[str] = None) -> PhiFunction:
    if local_t is None:
        k = spec.gradient_derivative
    else:
        t0 = float(local_t)

        def k(x):
            return (np.asarray(x, dtype=float) < t0).astype(float)

    eq = _IcEquation(model, F, k)
    a, b = 0.0, model.support_end
    jumps = F.jump_points if isinstance(F, StepDistribution) else np.empty(0)
    brk = tuple(model.breakpoints) + tuple(float(x) for x in jumps if a < x < b)
    jump_spec = None
    if local_t is not None:
        tt = np.array([float(local_t)])
        left = float(eq.d(tt, np.asarray(_left_limit(F, tt), dtype=float))[0])
        jump_spec = JumpSpec(float(local_t), left, 0.0)
    problem = FredholmProblem(kernel=None, rhs=eq.rhs, domain=(a, b), rhs_jump=jump_spec,
                              difference_kernel=eq.difference_kernel, breakpoints=brk,
                              kernel_jumps=eq.kernel_jumps)
    sol = solve_second_kind(problem, grid_size, rule, dump_system)
    quad, nodes_phi = sol.quadrature, sol.node_values

    def exact(x, left=False):
        xa = np.asarray(x, dtype=float)
        out = eq.evaluate(quad, nodes_phi, xa.ravel(), left=left).reshape(xa.shape)
        return out if out.ndim else float(out)

    def xi(x, left=False):
        xa = np.asarray(x, dtype=float)
        out = eq.evaluate(quad, nodes_phi, xa.ravel(), left=left, want_xi=True)[1].reshape(xa.shape)
        return out if out.ndim else float(out)

    locs = [float(x) for x in jumps]
    if local_t is not None and not np.any(np.isclose(locs, local_t, rtol=0, atol=0)):
        locs.append(float(local_t))
    locs = sorted(locs)
    discrete = []
    for loc in locs:
        right = eq.evaluate(quad, nodes_phi, [loc])[0]
        left = eq.evaluate(quad, nodes_phi, [loc], left=True)[0]
        discrete.append((loc, float(right - left)))
    discrete = tuple(discrete)
    grid = np.unique(np.concatenate([[a, b], quad.nodes, locs]))
    vals = exact(grid)
    proto = PhiFunction(GridFunction(grid, np.zeros_like(grid)), discrete)
    smooth = GridFunction(grid, vals - proto.jump_part(grid))
    return PhiFunction(smooth, discrete, exact, xi, F, sol.residual_sup, sol.grid_size, quad, nodes_phi)


def solve_phi_smooth(model: ObservationModel, F0, spec: FunctionalSpec, grid_size: int = 2000,
                     rule: str = "gauss", dump_system: Optional[str] = None) -> PhiFunction:
    """Solve the phi-equation at a continuous F0.

    The residual of the discrete system must be below 1e-6.
    """
    if not model.epsilon > 0:
        raise ValueError("the phi-equation solver needs a separated model (epsilon > 0)")
    phi = _ic_phi(model, F0, spec, grid_size, None, rule, dump_system)
    if not phi.residual_sup < 1e-6:
        raise NumericalError(f"phi-equation residual {phi.residual_sup:.3e} exceeds 1e-6")
    return phi


def solve_phi_at_step(model: ObservationModel, Fhat, spec: FunctionalSpec, grid_size: int = 2000,
                      local_t: Optional[float] = None, rule: str = "gauss",
                      dump_system: Optional[str] = None) -> PhiFunction:
    """Solve the phi-equation at a step function (or any cdf).

    Jump points of ``Fhat`` become panel edges, so phi is resolved on both
    sides of every jump.  With ``local_t`` the right-hand side is
    d_F 1_[0,t) and phi has one extra jump at t.
    """
    return _ic_phi(model, Fhat, spec, grid_size, local_t, rule, dump_system)


def project_bar_phi(phi: PhiFunction, Fhat, F0) -> PhiFunction:
    """Piecewise-constant version of phi on the constancy intervals of Fhat.

    On J_i = [tau_i, tau_{i+1}) the value is phi(s) at a crossing
    Fhat(s) = F0(s), else phi(tau_{i+1}-) when F0 < Fhat on J_i, else
    phi(tau_i).
    """
    if not isinstance(Fhat, StepDistribution) or Fhat.jump_points.size == 0:
        return phi
    M = Fhat.support_end
    taus = np.concatenate([[0.0], Fhat.jump_points[Fhat.jump_points > 0], [M]])
    values = []
    for lo, hi in zip(taus[:-1], taus[1:]):
        level = float(Fhat(lo))
        f_lo, f_hi = float(F0(lo)), float(F0(hi))
        if f_lo <= level <= f_hi and not (f_hi == level and hi < M):
            if f_lo == level:
                s = lo
            else:
                s = brentq(lambda v: float(F0(v)) - level, lo, hi, xtol=1e-14)
            values.append(float(phi(s)))
        elif f_hi <= level:
            values.append(float(phi(hi, left=True)))
        else:
            values.append(float(phi(lo)))
    values = np.array(values)
    jumps = tuple((float(x), float(v)) for x, v in zip(taus[1:-1], np.diff(values)))
    smooth = GridFunction(np.array([0.0, M]), np.array([values[0], values[0]]))
    return PhiFunction(smooth, jumps, cdf=Fhat)


def theta_from_phi(phi: PhiFunction, F) -> ThetaFunction:
    return ThetaFunction(phi, F)


def _pair_matrix(model: ObservationModel, F, nodes):
    eq = _IcEquation(model, F, lambda x: np.zeros_like(x))
    return eq.W(nodes[:, None], nodes[None, :])


def asymptotic_variance(phi: PhiFunction, model: ObservationModel, F0) -> float:
    """sigma^2 = int phi^2/F g1 + intint (phi(u)-phi(t))^2/(F(u)-F(t)) g + int phi^2/(1-F) g2.

    Evaluated with the quadrature phi was solved on.
    """
    if phi.quadrature is None:
        quad = build_quadrature((0.0, model.support_end), 2000, breakpoints=model.breakpoints)
    else:
        quad = phi.quadrature
    x, w = quad.nodes, quad.weights
    p = np.asarray(phi(x), dtype=float)
    Fx = np.asarray(F0(x), dtype=float)
    if phi.xi is not None and phi.cdf is F0:
        xi = np.asarray(phi.xi(x), dtype=float)
        v1 = np.sum(w * p * xi * (1 - Fx) * model.g1(x))
        v3 = np.sum(w * p * xi * Fx * model.g2(x))
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            v1 = np.sum(np.where(Fx > 0, w * p ** 2 / Fx * model.g1(x), 0.0))
            v3 = np.sum(np.where(Fx < 1, w * p ** 2 / (1 - Fx) * model.g2(x), 0.0))
    W = _pair_matrix(model, F0, x)
    diff = p[None, :] - p[:, None]
    v2 = 0.5 * float(w @ (W * diff * diff * row_weights(quad, x, _triangle_jumps(model))).sum(axis=1))
    total = float(v1 + v2 + v3)
    if not np.isfinite(total):
        raise NumericalError("variance quadrature is not finite")
    return total


def integrate_theta_q0(phi: PhiFunction, model: ObservationModel, F, F0) -> float:
    """int theta_F dQ0, with theta built from phi at F and Q0 generated by F0."""
    quad = phi.quadrature
    x, w = quad.nodes, quad.weights
    p = np.asarray(phi(x), dtype=float)
    Fx = np.asarray(F(x), dtype=float)
    F0x = np.asarray(F0(x), dtype=float)
    xi = np.asarray(phi.xi(x), dtype=float)
    t1 = -np.sum(w * xi * (1 - Fx) * F0x * model.g1(x))
    t3 = np.sum(w * xi * Fx * (1 - F0x) * model.g2(x))
    T, U = np.meshgrid(x, x, indexing="ij")
    G = model.g(T, U)
    gapF = Fx[None, :] - Fx[:, None]
    gap0 = F0x[None, :] - F0x[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where((gapF > 0) & (U > T), (p[None, :] - p[:, None]) / np.where(gapF > 0, gapF, 1.0), 0.0)
    t2 = -float(w @ (ratio * gap0 * G * row_weights(quad, x, _triangle_jumps(model))).sum(axis=1))
    return float(t1 + t2 + t3)


def plugin_functional(Fhat: StepDistribution, spec: FunctionalSpec) -> float:
    return spec.value(Fhat)


def k1_k2(x, model: ObservationModel, F0=None, grid_size: int = 2000):
    """k1(x) = int_x^M g(x,v)/(F0(v)-F0(x)) dv and k2(x) = int_0^x g(u,x)/(F0(x)-F0(u)) du.

    With ``F0=None`` (uniform) on the triangle family the closed forms are used.
    """
    M, eps = model.support_end, model.epsilon
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if F0 is None and model.family == "triangle":
        c = model.height
        with np.errstate(divide="ignore"):
            k1 = np.where(M - x > eps, c * np.log(np.maximum(M - x, eps) / eps), 0.0)
            k2 = np.where(x > eps, c * np.log(np.maximum(x, eps) / eps), 0.0)
        return k1, k2
    if F0 is None:
        F0 = lambda s: np.clip(np.asarray(s, float) / M, 0.0, 1.0)
    k1 = np.zeros_like(x)
    k2 = np.zeros_like(x)
    for i, xi in enumerate(x):
        if xi < M:
            q = build_quadrature((xi, M), grid_size, breakpoints=[min(xi + eps, M)] if eps else ())
            gap = np.asarray(F0(q.nodes)) - float(F0(xi))
            vals = np.where(gap > 0, model.g(xi, q.nodes) / np.where(gap > 0, gap, 1), 0.0)
            k1[i] = q.weights @ vals
        if xi > 0:
            q = build_quadrature((0.0, xi), grid_size, breakpoints=[max(xi - eps, 0.0)] if eps else ())
            gap = float(F0(xi)) - np.asarray(F0(q.nodes))
            vals = np.where(gap > 0, model.g(q.nodes, xi) / np.where(gap > 0, gap, 1), 0.0)
            k2[i] = q.weights @ vals
    return k1, k2


def xi_scaling_constant(t0: float, model: ObservationModel, F0=None, grid_size: int = 2000) -> float:
    """xi(t0) = g1/F0 + k1 + k2 + g2/(1-F0) at t0.

    ``F0=None`` means the uniform distribution on [0, M], for which the
    triangle family uses closed-form k1 and k2.
    """
    M = model.support_end
    if not 0 < t0 < M:
        raise ValueError(f"t0 must lie in (0, {M})")
    Fval = t0 / M if F0 is None else float(F0(t0))
    if not 0 < Fval < 1:
        raise ValueError("F0(t0) must lie in (0, 1)")
    k1, k2 = k1_k2(t0, model, F0, grid_size)
    return float(model.g1(t0) / Fval + k1[0] + k2[0] + model.g2(t0) / (1 - Fval))


def local_limit_scale(t0: float, model: ObservationModel, F0=None, case: str = "separated",
                      f0: Optional[float] = None, h_diag: Optional[float] = None):
    """Scale constant and rate label for the pointwise limit of the MLE.

    separated: {2 xi(t0)/f0(t0)}^(-1/3), multiplying n^(-1/3) 2Z.
    nonseparated: {3/4 f0(t0)^2 / h(t0,t0)}^(1/3), against (n log n)^(-1/3).
    """
    M = model.support_end
    if f0 is None:
        if F0 is None:
            f0 = 1.0 / M
        else:
            h = 1e-5
            f0 = (float(F0(t0 + h)) - float(F0(t0 - h))) / (2 * h)
    if not f0 > 0:
        raise ValueError("density f0(t0) must be positive")
    if case == "separated":
        xi = xi_scaling_constant(t0, model, F0)
        return (2 * xi / f0) ** (-1.0 / 3.0), "n^(-1/3)"
    if case == "nonseparated":
        if h_diag is None:
            h_diag = float(model.g(t0, np.nextafter(t0, np.inf)))
        if not h_diag > 0:
            raise ValueError("h(t0, t0) must be positive in the non-separated case")
        return (0.75 * f0 ** 2 / h_diag) ** (1.0 / 3.0), "(n log n)^(-1/3)"
    raise ValueError(f"unknown case {case!r}")


def variance_record(label: str, value: float, grid_size: int, residual: float) -> str:
    return f"{label},{value!r},{grid_size},{residual!r}"
