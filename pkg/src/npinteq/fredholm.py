"""Nyström solver for Fredholm equations of the second kind.

The equation solved is

    phi(x) + int D(x,u) {phi(x) - phi(u)} du + int A(x,u) phi(u) du = r(x)

on ``[a, b]``.  ``A`` is the ordinary kernel; the optional difference
kernel ``D`` is kept separate so that its diagonal contribution is formed
from the same quadrature as its off-diagonal part.  That keeps discrete
maximum principles exact.

Quadrature is composite Gauss-Legendre on panels (2 points per panel by
default, or the midpoint rule), so no node sits on a domain endpoint or a
declared breakpoint.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import lapack, lu_factor, lu_solve

from .core_types import GridFunction, NumericalError

log = logging.getLogger(__name__)

MAX_CONDITION = 1e12
JUMP_TIE = 1e-9
HINT_FRACTION = 0.05
HINT_LEVELS = 8
HINT_MAX_LEVELS = 16
TAIL_RTOL = 1e-4


class FredholmError(NumericalError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


@dataclass(frozen=True)
class JumpSpec:
    location: float
    left: float
    right: float


@dataclass(frozen=True)
class FredholmProblem:
    """Kernel, right-hand side and domain of a second-kind equation.

    ``kernel`` and ``difference_kernel`` are called as ``k(x, u)`` with
    broadcastable arrays.  ``rhs_jump`` gives the left and right limits of
    the right-hand side at its single discontinuity.  ``breakpoints`` are
    points where the kernel or rhs is not smooth; they become panel edges.
    ``kernel_jumps(x)`` returns, per row x, the u-locations (shape
    ``(x.size, k)``, NaN for none) where the kernel jumps; the panel
    weights there are split at the jump.
    """

    kernel: Optional[Callable] = None
    rhs: Callable = None
    domain: tuple = (0.0, 1.0)
    rhs_jump: Optional[JumpSpec] = None
    singularity_hints: tuple = ()
    difference_kernel: Optional[Callable] = None
    breakpoints: tuple = ()
    kernel_jumps: Optional[Callable] = None

    def __post_init__(self):
        a, b = map(float, self.domain)
        if not a < b:
            raise ValueError(f"domain must satisfy a < b, got {self.domain}")
        if self.rhs is None:
            raise ValueError("rhs is required")
        object.__setattr__(self, "domain", (a, b))
        if self.rhs_jump is not None and not a < self.rhs_jump.location < b:
            raise ValueError("rhs_jump location must be interior to the domain")
        for h in self.singularity_hints:
            if h not in (a, b):
                raise ValueError(f"singularity hint {h} is not a domain endpoint")


@dataclass(frozen=True)
class Quadrature:
    nodes: np.ndarray
    weights: np.ndarray
    levels: int = 0
    panel_edges: Optional[np.ndarray] = field(default=None, repr=False)

    def integrate(self, f: Callable) -> float:
        return float(np.dot(self.weights, f(self.nodes)))


@dataclass(frozen=True)
class FredholmSolution:
    solution: GridFunction
    residual_sup: float
    grid_size: int
    condition: float = float("nan")
    quadrature: Optional[Quadrature] = field(default=None, repr=False)
    node_values: Optional[np.ndarray] = field(default=None, repr=False)


def _panel_rule(rule: str):
    if rule in ("gauss", "gauss2"):
        return np.polynomial.legendre.leggauss(2)
    if rule in ("midpoint", "mid"):
        return np.array([0.0]), np.array([2.0])
    if rule.startswith("gauss") and rule[5:].isdigit():
        return np.polynomial.legendre.leggauss(int(rule[5:]))
    raise ValueError(f"unknown quadrature rule {rule!r}")


def _panels(edges: np.ndarray, counts: Sequence[int], gx, gw):
    xs, ws = [], []
    for lo, hi, k in zip(edges[:-1], edges[1:], counts):
        e = np.linspace(lo, hi, int(k) + 1)
        mid = 0.5 * (e[1:] + e[:-1])
        half = 0.5 * np.diff(e)
        xs.append((mid[:, None] + half[:, None] * gx[None, :]).ravel())
        ws.append((half[:, None] * gw[None, :]).ravel())
    return np.concatenate(xs), np.concatenate(ws)


def build_quadrature(domain, grid_size: int, rule: str = "gauss", breakpoints=(),
                     hints=(), levels: int = HINT_LEVELS) -> Quadrature:
    """Composite panel quadrature with geometric grading toward hinted endpoints.

    About ``grid_size`` nodes are spread uniformly; each hinted endpoint
    gets its last 5% of the domain split into pieces shrinking by ½, with
    ``levels`` extra pieces.
    """
    a, b = map(float, domain)
    L = b - a
    gx, gw = _panel_rule(rule)
    npan = max(grid_size // len(gx), 1)
    density = npan / L
    lo = a + HINT_FRACTION * L if a in hints else a
    hi = b - HINT_FRACTION * L if b in hints else b
    brk = [p for p in breakpoints if lo < p < hi]
    core = np.unique(np.concatenate([[lo, hi], brk]))
    counts = np.maximum(1, np.round(density * np.diff(core)).astype(int))
    edges_list, count_list = [core], [counts]
    m_min = max(4, int(np.ceil(HINT_FRACTION * npan / max(levels, 1))))
    for end, inner in ((a, lo), (b, hi)):
        if end not in hints:
            continue
        # piece boundaries at distances 0.05L * 2^-k from the endpoint
        dist = HINT_FRACTION * L * 0.5 ** np.arange(levels + 1)
        pts = end + np.sign(inner - end) * np.concatenate([dist, [0.0]])
        zone = [p for p in breakpoints if min(end, inner) < p < max(end, inner)]
        pts = np.unique(np.concatenate([pts, zone]))
        cnt = np.maximum(m_min, np.round(density * np.diff(pts)).astype(int))
        edges_list.append(pts)
        count_list.append(cnt)
    xs, ws, es = [], [], []
    for e, c in zip(edges_list, count_list):
        x, w = _panels(e, c, gx, gw)
        xs.append(x)
        ws.append(w)
        es.append(np.concatenate([np.linspace(lo_, hi_, int(k) + 1)
                                  for lo_, hi_, k in zip(e[:-1], e[1:], c)]))
    x = np.concatenate(xs)
    w = np.concatenate(ws)
    order = np.argsort(x)
    return Quadrature(x[order], w[order], levels if hints else 0, np.unique(np.concatenate(es)))


def row_weights(quad: Quadrature, x, kernel_jumps: Optional[Callable] = None) -> np.ndarray:
    """Quadrature weights for rows ``x``; shape (1, N) without kernel jumps."""
    if kernel_jumps is None or quad.panel_edges is None:
        return quad.weights[None, :]
    return _split_weights(quad, np.asarray(x, dtype=float), kernel_jumps(x))


def _split_weights(quad: Quadrature, x, jumps):
    """Row-wise weights with every panel containing a kernel jump split at it.

    Each side of the jump inside the panel gets its length shared by that
    side's nodes in proportion to their weights; a side without nodes hands
    its length to the nearest node beyond the panel on that side.  A node
    sitting on the jump itself is ambiguous and gets weight zero.
    """
    u, w = quad.nodes, quad.weights
    W = np.broadcast_to(w, (x.size, u.size)).copy()
    edges = quad.panel_edges
    jumps = np.asarray(jumps, dtype=float).reshape(x.size, -1)
    start = np.searchsorted(u, edges[:-1])
    stop = np.searchsorted(u, edges[1:])
    for i, j in zip(*np.nonzero(np.isfinite(jumps))):
        c = jumps[i, j]
        p = int(np.searchsorted(edges, c, side="right")) - 1
        if p < 0 or p >= edges.size - 1 or c == edges[p]:
            continue
        a, b, lo, hi = edges[p], edges[p + 1], start[p], stop[p]
        tie = JUMP_TIE * (b - a)
        cut = lo + int(np.searchsorted(u[lo:hi], c - tie))
        past = lo + int(np.searchsorted(u[lo:hi], c + tie, side="right"))
        W[i, cut:past] = 0.0
        for s0, s1, length, spill in ((lo, cut, c - a, lo - 1), (past, hi, b - c, hi)):
            if s1 > s0:
                W[i, s0:s1] *= length / w[s0:s1].sum()
            elif 0 <= spill < u.size:
                W[i, spill] += length
    return W


def _eval_kernel(fn, x, u, name):
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        K = np.asarray(fn(x[:, None], u[None, :]), dtype=float)
    K = np.broadcast_to(K, (x.size, u.size))
    bad = ~np.isfinite(K)
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        raise FredholmError(f"{name} is not finite at (x, u) = ({x[i]!r}, {u[j]!r})")
    return K


def _operator_rows(problem: FredholmProblem, x, quad: Quadrature):
    """Rows of the discretised operator (without identity) at points x."""
    u = quad.nodes
    w = row_weights(quad, x, problem.kernel_jumps)
    M = np.zeros((x.size, u.size))
    if problem.kernel is not None:
        M += _eval_kernel(problem.kernel, x, u, "kernel") * w
    diag = np.zeros(x.size)
    if problem.difference_kernel is not None:
        D = _eval_kernel(problem.difference_kernel, x, u, "difference kernel") * w
        M -= D
        diag = D.sum(axis=1)
    return M, diag


def _rhs_values(problem: FredholmProblem, x):
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.broadcast_to(np.asarray(problem.rhs(x), dtype=float), x.shape).copy()
    if not np.all(np.isfinite(r)):
        raise FredholmError(f"rhs is not finite at x = {x[~np.isfinite(r)][0]!r}")
    return r


def _tail_share(problem, quad: Quadrature, end: float) -> float:
    """Relative operator mass carried by the innermost graded piece at ``end``."""
    a, b = problem.domain
    delta = HINT_FRACTION * (b - a) * 0.5 ** quad.levels
    inner = np.abs(quad.nodes - end) < delta
    rows = np.unique(np.concatenate([
        np.linspace(0, quad.nodes.size - 1, 64).astype(int),
        np.nonzero(np.abs(quad.nodes - end) < HINT_FRACTION * (b - a))[0]]))
    M, diag = _operator_rows(problem, quad.nodes[rows], quad)
    absM = np.abs(M)
    total = absM.sum(axis=1) + np.abs(diag)
    tail = absM[:, inner].sum(axis=1)
    return float(np.max(tail) / max(np.max(total), 1e-300))


def _quadrature_for(problem: FredholmProblem, grid_size: int, rule: str, extra_breaks=()):
    brk = tuple(problem.breakpoints) + tuple(extra_breaks)
    hints = tuple(problem.singularity_hints)
    levels = HINT_LEVELS
    quad = build_quadrature(problem.domain, grid_size, rule, brk, hints, levels)
    while hints and levels < HINT_MAX_LEVELS:
        share = max(_tail_share(problem, quad, h) for h in hints)
        if share < TAIL_RTOL:
            break
        levels += 1
        quad = build_quadrature(problem.domain, grid_size, rule, brk, hints, levels)
    return quad


def _condition(lu, anorm) -> float:
    rcond, info = lapack.dgecon(lu, anorm, norm="1")
    if info != 0 or rcond <= 0:
        return float("inf")
    return 1.0 / rcond


def _dump(prefix, matrix, rhs, nodes, weights):
    np.savetxt(f"{prefix}_matrix.csv", matrix, delimiter=",")
    np.savetxt(f"{prefix}_rhs.csv", np.column_stack([nodes, weights, rhs]), delimiter=",",
               header="x,weight,rhs", comments="")


def _assemble_and_solve(problem, quad, dump_system, max_condition):
    x = quad.nodes
    M, diag = _operator_rows(problem, x, quad)
    M[np.diag_indices_from(M)] += 1.0 + diag
    r = _rhs_values(problem, x)
    if dump_system:
        _dump(dump_system, M, r, x, quad.weights)
    anorm = np.abs(M).sum(axis=0).max()
    lu = lu_factor(M, check_finite=False)
    cond = _condition(lu[0], anorm)
    if not cond <= max_condition:
        raise FredholmError(f"linear system is singular or ill-conditioned "
                            f"(condition estimate {cond:.3e})", condition=cond)
    phi = lu_solve(lu, r, check_finite=False)
    return phi, cond


def _interpolate(problem, quad, phi, pts, rvals):
    """Nyström extension phi(x) = (r(x) - sum A w phi + sum D w phi) / (1 + sum D w)."""
    M, diag = _operator_rows(problem, pts, quad)
    return (rvals - M @ phi) / (1.0 + diag)


def residual(problem: FredholmProblem, candidate: GridFunction, grid_size: int = 2000,
             rule: str = "gauss", quadrature: Optional[Quadrature] = None) -> float:
    """Sup-norm residual of ``candidate`` on the quadrature nodes.

    At the jump of the right-hand side the equation is also checked with
    the one-sided values stored in ``candidate``.
    """
    if quadrature is None:
        extra = (problem.rhs_jump.location,) if _has_real_jump(problem) else ()
        quadrature = _quadrature_for(problem, grid_size, rule, extra)
    x = quadrature.nodes
    phi = np.asarray(candidate(x), dtype=float)
    M, diag = _operator_rows(problem, x, quadrature)
    res = phi * (1.0 + diag) + M @ phi - _rhs_values(problem, x)
    worst = float(np.max(np.abs(res)))
    jump = problem.rhs_jump
    if jump is not None and candidate.jump_point is not None:
        t = np.array([jump.location])
        Mt, dt = _operator_rows(problem, t, quadrature)
        off = float((Mt @ phi)[0])
        for val, rv in ((candidate.value_left, jump.left), (candidate.value_right, jump.right)):
            worst = max(worst, abs(val * (1.0 + dt[0]) + off - rv))
    return worst


def _has_real_jump(problem) -> bool:
    j = problem.rhs_jump
    return j is not None and j.left != j.right


def _endpoint_values(problem, quad, phi):
    a, b = problem.domain
    ends = [e for e in (a, b) if e not in problem.singularity_hints]
    if not ends:
        return np.empty(0), np.empty(0)
    pts = np.array(ends)
    return pts, _interpolate(problem, quad, phi, pts, _rhs_values(problem, pts))


def solve_second_kind(problem: FredholmProblem, grid_size: int = 2000, rule: str = "gauss",
                      dump_system: Optional[str] = None,
                      max_condition: float = MAX_CONDITION) -> FredholmSolution:
    """Nyström solve with a dense LU factorisation.

    Parameters
    ----------
    problem : FredholmProblem
        If it carries a genuine rhs jump the call is forwarded to
        :func:`solve_with_jump`.
    grid_size : int
        Approximate number of quadrature nodes (at least 16).
    rule : {"gauss", "midpoint"}
        Panel rule.
    dump_system : str, optional
        Prefix for CSV dumps of the dense matrix and right-hand side.

    Returns
    -------
    FredholmSolution
        The solution tabulated at the nodes, extended to non-singular
        endpoints by Nyström interpolation.
    """
    if grid_size < 16:
        raise ValueError("grid_size must be at least 16")
    if _has_real_jump(problem):
        return solve_with_jump(problem, grid_size, rule, dump_system, max_condition)
    quad = _quadrature_for(problem, grid_size, rule)
    phi, cond = _assemble_and_solve(problem, quad, dump_system, max_condition)
    pe, ve = _endpoint_values(problem, quad, phi)
    grid = np.concatenate([quad.nodes, pe])
    vals = np.concatenate([phi, ve])
    order = np.argsort(grid)
    gf = GridFunction(grid[order], vals[order])
    res = residual(problem, gf, quadrature=quad)
    return FredholmSolution(gf, res, quad.nodes.size, cond, quad, phi)


def solve_with_jump(problem: FredholmProblem, grid_size: int = 2000, rule: str = "gauss",
                    dump_system: Optional[str] = None,
                    max_condition: float = MAX_CONDITION) -> FredholmSolution:
    """Solve when the right-hand side jumps at ``problem.rhs_jump.location``.

    The jump location is a panel edge, so no node sits on it; the left and
    right values there come from the Nyström extension with the one-sided
    rhs limits.
    """
    if grid_size < 16:
        raise ValueError("grid_size must be at least 16")
    jump = problem.rhs_jump
    if jump is None:
        raise ValueError("problem has no rhs_jump")
    if jump.left == jump.right:
        return solve_second_kind(FredholmProblem(
            problem.kernel, problem.rhs, problem.domain, None, problem.singularity_hints,
            problem.difference_kernel, problem.breakpoints, problem.kernel_jumps), grid_size, rule, dump_system,
            max_condition)
    t = float(jump.location)
    quad = _quadrature_for(problem, grid_size, rule, (t,))
    phi, cond = _assemble_and_solve(problem, quad, dump_system, max_condition)
    left, right = _interpolate(problem, quad, phi, np.array([t, t]), np.array([jump.left, jump.right]))
    pe, ve = _endpoint_values(problem, quad, phi)
    grid = np.concatenate([quad.nodes, pe, [t]])
    vals = np.concatenate([phi, ve, [right]])
    order = np.argsort(grid)
    gf = GridFunction(grid[order], vals[order], jump_point=t, value_left=float(left))
    res = residual(problem, gf, quadrature=quad)
    return FredholmSolution(gf, res, quad.nodes.size, cond, quad, phi)
