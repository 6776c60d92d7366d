"""Interval censoring case 2 and current status data: data model and MLE."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import isotonic_regression

from . import _mixture
from .core_types import NumericalError, StepDistribution

log = logging.getLogger(__name__)

ENDPOINT_MERGE = 1e-12


@dataclass(frozen=True)
class IcObservation:
    t: float
    u: float
    delta1: int
    delta2: int

    def __post_init__(self):
        if not self.t < self.u:
            raise ValueError(f"need t < u, got t={self.t}, u={self.u}")
        if self.delta1 not in (0, 1) or self.delta2 not in (0, 1) or self.delta1 + self.delta2 > 1:
            raise ValueError(f"invalid indicators ({self.delta1}, {self.delta2})")

    @property
    def delta3(self) -> int:
        return 1 - self.delta1 - self.delta2


@dataclass(frozen=True)
class IcSample:
    """Observations (T_i, U_i, Delta_i1, Delta_i2) stored column-wise."""

    t: np.ndarray
    u: np.ndarray
    d1: np.ndarray
    d2: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(-1)
        u = np.asarray(self.u, dtype=float).reshape(-1)
        d1 = np.asarray(self.d1).reshape(-1).astype(int)
        d2 = np.asarray(self.d2).reshape(-1).astype(int)
        if not (t.size == u.size == d1.size == d2.size):
            raise ValueError("columns must have equal length")
        if t.size < 1:
            raise ValueError("sample must contain at least one observation")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(u))):
            raise ValueError("observation times must be finite")
        if np.any(t >= u):
            i = int(np.argmax(t >= u))
            raise ValueError(f"observation {i}: need t < u")
        bad = ~np.isin(d1, (0, 1)) | ~np.isin(d2, (0, 1)) | (d1 + d2 > 1)
        if np.any(bad):
            raise ValueError(f"observation {int(np.argmax(bad))}: invalid indicators")
        for name, arr in (("t", t), ("u", u), ("d1", d1), ("d2", d2)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_observations(cls, observations) -> "IcSample":
        obs = list(observations)
        return cls([o.t for o in obs], [o.u for o in obs],
                   [o.delta1 for o in obs], [o.delta2 for o in obs])

    @property
    def n(self) -> int:
        return int(self.t.size)

    @property
    def d3(self) -> np.ndarray:
        return 1 - self.d1 - self.d2

    @property
    def observations(self) -> list:
        return [IcObservation(float(a), float(b), int(c), int(d))
                for a, b, c, d in zip(self.t, self.u, self.d1, self.d2)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "u", "d1", "d2"])
            for row in zip(self.t, self.u, self.d1, self.d2):
                w.writerow([repr(float(row[0])), repr(float(row[1])), int(row[2]), int(row[3])])

    @classmethod
    def from_csv(cls, path) -> "IcSample":
        rows = _read_rows(path, ["t", "u", "d1", "d2"])
        arr = np.array(rows, dtype=float).reshape(-1, 4)
        for line, (t, u, d1, d2) in enumerate(arr, start=2):
            if not t < u:
                raise ValueError(f"{path}: line {line}, column u: need t < u")
            for col, v in (("d1", d1), ("d2", d2)):
                if v not in (0.0, 1.0):
                    raise ValueError(f"{path}: line {line}, column {col}: indicator must be 0 or 1")
            if d1 + d2 > 1:
                raise ValueError(f"{path}: line {line}, column d2: d1 + d2 must be at most 1")
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])


def _read_rows(path, header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if head != header:
            raise ValueError(f"{path}: line 1: expected header {','.join(header)}")
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: line {line}: expected {len(header)} columns")
            vals = []
            for col, cell in zip(header, row):
                try:
                    v = float(cell)
                except ValueError:
                    raise ValueError(f"{path}: line {line}, column {col}: not a number") from None
                if not np.isfinite(v):
                    raise ValueError(f"{path}: line {line}, column {col}: not finite")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return rows


def read_current_status_csv(path):
    """Pairs (z, delta) from a ``z,delta`` CSV; z must be >= 0 and delta in {0, 1}."""
    rows = _read_rows(path, ["z", "delta"])
    for line, (z, d) in enumerate(rows, start=2):
        if z < 0:
            raise ValueError(f"{path}: line {line}, column z: negative value {z!r}")
        if d not in (0.0, 1.0):
            raise ValueError(f"{path}: line {line}, column delta: must be 0 or 1")
    return [(z, int(d)) for z, d in rows]


def write_current_status_csv(path, pairs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["z", "delta"])
        for z, d in pairs:
            w.writerow([repr(float(z)), int(d)])


@dataclass(frozen=True)
class ObservationModel:
    """Joint density g of (T, U) on {0 <= t < u <= M}.

    ``family`` is ``"triangle"`` (uniform on the triangle u - t > epsilon)
    or ``"tabulated"`` (bilinear interpolation of ``table`` on ``nodes``,
    zero for u <= t + epsilon).
    """

    family: str = "triangle"
    epsilon: float = 0.1
    support_end: float = 1.0
    nodes: Optional[np.ndarray] = field(default=None, repr=False)
    table: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        M, eps = float(self.support_end), float(self.epsilon)
        if not 0 <= eps < M:
            raise ValueError(f"epsilon must lie in [0, M), got {eps}")
        if self.family == "triangle":
            return
        if self.family != "tabulated":
            raise ValueError(f"unknown family {self.family!r}")
        s = np.asarray(self.nodes, dtype=float)
        G = np.asarray(self.table, dtype=float)
        if G.shape != (s.size, s.size) or np.any(G < 0) or not np.all(np.isfinite(G)):
            raise ValueError("table must be a non-negative finite square matrix over nodes")
        T, U = np.meshgrid(s, s, indexing="ij")
        G = np.where(U - T > eps, G, 0.0)
        mass = np.trapezoid(np.trapezoid(G, s, axis=1), s)
        if not mass > 0:
            raise ValueError("tabulated density has zero mass")
        if abs(mass - 1) > 1e-2:
            log.info("tabulated density integrates to %.6g; renormalised", mass)
        G = G / mass
        object.__setattr__(self, "nodes", s)
        object.__setattr__(self, "table", G)
        object.__setattr__(self, "_interp", RegularGridInterpolator((s, s), G, bounds_error=False,
                                                                    fill_value=0.0))
        object.__setattr__(self, "_g1", np.trapezoid(G, s, axis=1))
        object.__setattr__(self, "_g2", np.trapezoid(G, s, axis=0))

    @classmethod
    def uniform_triangle(cls, epsilon: float, support_end: float = 1.0) -> "ObservationModel":
        return cls("triangle", epsilon, support_end)

    @classmethod
    def tabulated(cls, nodes, table, epsilon: float = 0.0) -> "ObservationModel":
        nodes = np.asarray(nodes, dtype=float)
        return cls("tabulated", epsilon, float(nodes[-1]), nodes, np.asarray(table, dtype=float))

    @property
    def height(self) -> float:
        return 2.0 / (self.support_end - self.epsilon) ** 2

    @property
    def breakpoints(self) -> tuple:
        if self.family == "triangle" and self.epsilon > 0:
            return (self.epsilon, self.support_end - self.epsilon)
        return ()

    def g(self, t, u):
        t = np.asarray(t, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.family == "triangle":
            inside = (u - t > self.epsilon) & (t >= 0) & (u <= self.support_end)
            return np.where(inside, self.height, 0.0)
        tt, uu = np.broadcast_arrays(t, u)
        vals = self._interp(np.stack([tt.ravel(), uu.ravel()], axis=-1)).reshape(tt.shape)
        return np.where(uu - tt > self.epsilon, vals, 0.0)

    def g1(self, t):
        t = np.asarray(t, dtype=float)
        if self.family == "triangle":
            M, eps = self.support_end, self.epsilon
            return np.where((t >= 0) & (t <= M - eps), self.height * (M - eps - t), 0.0)
        return np.interp(t, self.nodes, self._g1, left=0.0, right=0.0)

    def g2(self, u):
        u = np.asarray(u, dtype=float)
        if self.family == "triangle":
            M, eps = self.support_end, self.epsilon
            return np.where((u >= eps) & (u <= M), self.height * (u - eps), 0.0)
        return np.interp(u, self.nodes, self._g2, left=0.0, right=0.0)

    def d(self, F, x):
        """d_F(x) = F(1-F) / {g1 (1-F) + g2 F}."""
        x = np.asarray(x, dtype=float)
        Fx = np.asarray(F(x), dtype=float)
        den = self.g1(x) * (1 - Fx) + self.g2(x) * Fx
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(den > 0, Fx * (1 - Fx) / np.where(den > 0, den, 1.0), 0.0)
        return out

    def mean_t(self) -> float:
        """E T for the triangle family."""
        M, eps = self.support_end, self.epsilon
        return (M - eps) / 3.0


def loglik_case2(F, sample: IcSample) -> float:
    """Average log-likelihood (1/n) sum log q_F; -inf if some q_F <= 0."""
    Ft = np.asarray(F(sample.t), dtype=float)
    Fu = np.asarray(F(sample.u), dtype=float)
    q = sample.d1 * Ft + sample.d2 * (Fu - Ft) + sample.d3 * (1 - Fu)
    if np.any(q <= 0):
        return -np.inf
    return float(np.mean(np.log(q)))


def fit_current_status(pairs, support_end: Optional[float] = None) -> StepDistribution:
    """Current status MLE by pool-adjacent-violators on the ordered indicators.

    Observations sharing a z value are pooled into one weighted point, so
    the fit does not depend on how ties are ordered.
    """
    arr = np.asarray(list(pairs), dtype=float).reshape(-1, 2)
    if arr.shape[0] < 1:
        raise ValueError("need at least one observation")
    z, inv, counts = np.unique(arr[:, 0], return_inverse=True, return_counts=True)
    delta = np.bincount(inv, weights=arr[:, 1]) / counts
    fitted = isotonic_regression(delta, weights=counts.astype(float)).x
    inc = np.diff(np.concatenate([[0.0], fitted]))
    M = max(1.0, float(z.max())) if support_end is None else support_end
    keep = inc > 0
    return StepDistribution.from_points(z[keep], inc[keep], M)


@dataclass(frozen=True)
class Candidates:
    """Maximal intersections (left, right] and the observations covering them."""

    left: np.ndarray
    right: np.ndarray
    location: np.ndarray
    first: np.ndarray
    last: np.ndarray

    @property
    def m(self) -> int:
        return int(self.left.size)


def _snap(values: np.ndarray) -> np.ndarray:
    finite = np.isfinite(values)
    v = values[finite]
    if v.size == 0:
        return values
    uniq = np.unique(v)
    rep = uniq.copy()
    for k in range(1, uniq.size):
        if uniq[k] - rep[k - 1] <= ENDPOINT_MERGE:
            rep[k] = rep[k - 1]
    out = values.copy()
    out[finite] = rep[np.searchsorted(uniq, v)]
    return out


def observation_intervals(sample: IcSample):
    """The sets (L, R] that contain X for each observation."""
    L = np.where(sample.d1 == 1, -np.inf, np.where(sample.d2 == 1, sample.t, sample.u))
    R = np.where(sample.d1 == 1, sample.t, np.where(sample.d2 == 1, sample.u, np.inf))
    return _snap(L), _snap(R)


def maximal_intersections(sample: IcSample, support_end: float = 1.0) -> Candidates:
    L, R = observation_intervals(sample)
    vals = np.concatenate([R, L])
    kind = np.concatenate([np.zeros(R.size), np.ones(L.size)])  # right ends first at ties
    order = np.lexsort((kind, vals))
    vals, kind = vals[order], kind[order]
    starts = np.nonzero((kind[:-1] == 1) & (kind[1:] == 0) & (vals[:-1] < vals[1:]))[0]
    left, right = vals[starts], vals[starts + 1]
    if np.any(np.isinf(right) & (left >= support_end)):
        raise ValueError("support_end must exceed every right-censoring time")
    location = np.where(np.isinf(right), support_end, right)
    first = np.searchsorted(left, L, side="left")
    last = np.searchsorted(right, R, side="right") - 1
    return Candidates(left, right, location, first, last)


@dataclass(frozen=True)
class IcFit:
    F: StepDistribution
    loglik: float
    iterations: int
    max_violation: float
    support_slack: float
    trace: tuple = field(default=(), repr=False)

    def summary(self) -> str:
        return ("{" + f'"loglik": {self.loglik!r}, "iterations": {self.iterations}, '
                f'"max_violation": {self.max_violation!r}, "support_slack": {self.support_slack!r}'
                + "}")


def _design(sample: IcSample, cand: Candidates):
    """Grouped 0/1 design: rows are distinct (first, last) pairs with weights."""
    key = np.stack([cand.first, cand.last], axis=1)
    uniq, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    cols = np.arange(cand.m)
    A = ((cols[None, :] >= uniq[:, :1]) & (cols[None, :] <= uniq[:, 1:])).astype(float)
    return A, counts / sample.n, uniq


def _icm_step(F, lo, hi, c, ll_fun, ll):
    """One iterative-convex-minorant step on cumulative masses F_1..F_{m-1}."""
    m = F.size + 1
    Fx = np.concatenate([[0.0], F, [1.0]])  # Fx[k] = F_k, k = 0..m
    q = Fx[hi + 1] - Fx[lo]
    grad = np.zeros(m + 1)
    hess = np.zeros(m + 1)
    np.add.at(grad, hi + 1, c / q)
    np.add.at(grad, lo, -c / q)
    np.add.at(hess, hi + 1, c / q ** 2)
    np.add.at(hess, lo, c / q ** 2)
    g, w = grad[1:m], np.maximum(hess[1:m], 1e-300)
    target = np.clip(isotonic_regression(F + g / w, weights=w).x, 0.0, 1.0)
    direction = target - F
    slope = float(g @ direction)
    s = 1.0
    for _ in range(20):
        cand = F + s * direction
        val = ll_fun(cand)
        if val >= ll + 1e-4 * s * slope and val >= ll:
            return cand, val
        s *= 0.5
    return F, ll


def fit_mle_case2(sample: IcSample, tol: float = 1e-8, max_iter: int = 10000,
                  support_end: float = 1.0, hybrid_iter: int = 50,
                  full_output: bool = False):
    """NPMLE of F for interval censoring case 2.

    Mass is restricted to the maximal intersections and located at their
    right endpoints (at ``support_end`` for unbounded ones).  EM and ICM
    steps alternate for ``hybrid_iter`` rounds, after which an active-set
    Newton iteration finishes the job until the Fenchel residuals are below
    ``tol``.  The log-likelihood is checked to be nondecreasing at every
    accepted step.

    Returns
    -------
    StepDistribution, or IcFit when ``full_output`` is true.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    cand = maximal_intersections(sample, support_end)
    A, c, rows = _design(sample, cand)
    lo, hi = rows[:, 0], rows[:, 1]
    m = cand.m
    p = np.full(m, 1.0 / m)
    trace = []

    def ll_cum(Fc):
        Fx = np.concatenate([[0.0], Fc, [1.0]])
        q = Fx[hi + 1] - Fx[lo]
        return float(c @ np.log(q)) if np.all(q > 0) else -np.inf

    ll = _mixture.loglik(A, c, p)
    _mixture._check_monotone(trace, ll)
    it = 0
    for it in range(1, min(hybrid_iter, max_iter) + 1):
        d = _mixture.directional(A, c, p)
        if max(np.max(d), np.max(np.abs(d[p > 0]))) <= tol:
            break
        # EM (self-consistency) step
        p = p * (d + 1.0)
        p /= p.sum()
        ll = _mixture.loglik(A, c, p)
        _mixture._check_monotone(trace, ll)
        # ICM step on the cumulative masses
        if m > 1:
            Fc, ll_icm = _icm_step(np.cumsum(p)[:-1].clip(0.0, 1.0), lo, hi, c, ll_cum, ll)
            if ll_icm > ll:
                p = np.diff(np.concatenate([[0.0], Fc, [1.0]])).clip(min=0.0)
                p /= p.sum()
                ll = _mixture.loglik(A, c, p)
                _mixture._check_monotone(trace, ll)
    p[p < 1e-12 * p.max()] = 0.0
    p /= p.sum()
    state = _mixture.support_reduction(A, c, p, tol=tol, max_iter=max(max_iter - it, 1),
                                       trace=trace)
    p = state.p
    p[p < 1e-12] = 0.0
    p /= p.sum()
    F = StepDistribution.from_points(cand.location, p, support_end, prune=0.0)
    viol, slack = fenchel_residuals(F, sample)
    if max(viol, slack) > tol:
        raise NumericalError(f"MLE did not reach tol {tol:g}: residuals {viol:.3e}, {slack:.3e}")
    if not full_output:
        return F
    return IcFit(F, loglik_case2(F, sample), it + state.iterations, viol, slack, tuple(trace))


def fenchel_residuals(F: StepDistribution, sample: IcSample, support_end: Optional[float] = None):
    """Largest directional derivative over candidate points and the support.

    The derivative for adding mass at x is (1/n) sum_i 1{x in (L_i, R_i]}/q_i - 1.
    Returns ``(max_violation, support_slack)``; both are +inf when F gives
    zero probability to some observation.
    """
    M = F.support_end if support_end is None else support_end
    Ft = np.asarray(F(sample.t))
    Fu = np.asarray(F(sample.u))
    q = sample.d1 * Ft + sample.d2 * (Fu - Ft) + sample.d3 * (1 - Fu)
    if np.any(q <= 0):
        return np.inf, np.inf
    L, R = observation_intervals(sample)
    cand = maximal_intersections(sample, M)
    pts = np.unique(np.concatenate([cand.location, F.jump_points]))
    cover = (pts[None, :] > L[:, None]) & (pts[None, :] <= R[:, None])
    d = cover.T.astype(float) @ (1.0 / q) / sample.n - 1.0
    on_support = np.isin(pts, F.jump_points)
    viol = max(float(np.max(d)), 0.0)
    slack = float(np.max(np.abs(d[on_support]))) if on_support.any() else 0.0
    return viol, slack
