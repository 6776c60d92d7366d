"""Step distribution functions, tabulated grid functions and smooth functionals.

These are the value types passed between the estimation and
integral-equation modules.  All of them are immutable after construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

ArrayLike = Union[float, np.ndarray]

MASS_TOL = 1e-12


class NumericalError(RuntimeError):
    """A computation failed for numerical reasons (conditioning, non-convergence)."""


@dataclass(frozen=True)
class StepDistribution:
    """A (sub-)distribution function with finitely many jumps on ``[0, support_end]``.

    Use :meth:`from_points` to build one from unsorted points; coincident
    points are merged by summing their masses.
    """

    jump_points: np.ndarray
    masses: np.ndarray
    support_end: float = 1.0

    def __post_init__(self):
        x = np.asarray(self.jump_points, dtype=float).reshape(-1)
        p = np.asarray(self.masses, dtype=float).reshape(-1)
        if x.shape != p.shape:
            raise ValueError("jump_points and masses must have the same length")
        if x.size and np.any(np.diff(x) <= 0):
            raise ValueError("jump_points must be strictly increasing")
        if np.any(p <= 0) or not np.all(np.isfinite(p)):
            raise ValueError("masses must be positive and finite")
        if p.sum() > 1 + MASS_TOL:
            raise ValueError(f"total mass {p.sum():.15g} exceeds 1")
        if x.size and (x[0] < 0 or x[-1] > self.support_end):
            raise ValueError("jump points must lie in [0, support_end]")
        x.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "jump_points", x)
        object.__setattr__(self, "masses", p)
        object.__setattr__(self, "support_end", float(self.support_end))

    @classmethod
    def from_points(cls, points, masses, support_end: float = 1.0,
                    prune: float = 0.0) -> "StepDistribution":
        points = np.asarray(points, dtype=float).reshape(-1)
        masses = np.asarray(masses, dtype=float).reshape(-1)
        keep = masses > prune
        points, masses = points[keep], masses[keep]
        order = np.argsort(points, kind="stable")
        points, masses = points[order], masses[order]
        if points.size == 0:
            return cls(points, masses, support_end)
        uniq, inv = np.unique(points, return_inverse=True)
        merged = np.zeros(uniq.size)
        np.add.at(merged, inv, masses)
        return cls(uniq, merged, support_end)

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.masses)

    def __call__(self, x: ArrayLike) -> ArrayLike:
        return eval_cdf(self, x)

    def __eq__(self, other):
        if not isinstance(other, StepDistribution):
            return NotImplemented
        return (self.support_end == other.support_end
                and np.array_equal(self.jump_points, other.jump_points)
                and np.array_equal(self.masses, other.masses))

    __hash__ = None

    def left_limit(self, x: ArrayLike) -> ArrayLike:
        """F(x-)."""
        x = np.asarray(x, dtype=float)
        cum = np.concatenate([[0.0], self.cumulative])
        out = cum[np.searchsorted(self.jump_points, x, side="left")]
        return out if out.ndim else float(out)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "mass"])
            for x, p in zip(self.jump_points, self.masses):
                writer.writerow([repr(float(x)), repr(float(p))])

    @classmethod
    def from_csv(cls, path, support_end: float = 1.0) -> "StepDistribution":
        data = _read_csv(path, ["x", "mass"])
        return cls.from_points(data["x"], data["mass"], support_end)


@dataclass(frozen=True)
class GridFunction:
    """A real function tabulated on strictly increasing nodes.

    Between nodes the function is interpolated linearly.  When
    ``jump_point`` is set it must be one of the nodes; ``values`` then holds
    the right-continuous value there and ``value_left`` the left limit.
    """

    grid: np.ndarray
    values: np.ndarray
    jump_point: Optional[float] = None
    value_left: Optional[float] = None

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float).reshape(-1)
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if g.shape != v.shape:
            raise ValueError("grid and values must have the same length")
        if g.size < 1 or np.any(np.diff(g) <= 0):
            raise ValueError("grid must be non-empty and strictly increasing")
        if not np.all(np.isfinite(v)):
            raise ValueError("values must be finite")
        if self.jump_point is not None:
            if not np.any(g == self.jump_point):
                raise ValueError("jump_point must coincide with a grid node")
            if self.value_left is None or not np.isfinite(self.value_left):
                raise ValueError("a jump node needs a finite left value")
        g.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", v)

    @property
    def value_right(self) -> Optional[float]:
        if self.jump_point is None:
            return None
        return float(self.values[np.searchsorted(self.grid, self.jump_point)])

    def __call__(self, x: ArrayLike) -> ArrayLike:
        x = np.asarray(x, dtype=float)
        if self.jump_point is None:
            out = np.interp(x, self.grid, self.values)
        else:
            k = int(np.searchsorted(self.grid, self.jump_point))
            left_g = self.grid[: k + 1]
            left_v = np.concatenate([self.values[:k], [self.value_left]])
            out = np.where(
                x < self.jump_point,
                np.interp(x, left_g, left_v),
                np.interp(x, self.grid[k:], self.values[k:]),
            )
        return out if out.ndim else float(out)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            if self.jump_point is None:
                writer.writerow(["x", "value"])
                for x, v in zip(self.grid, self.values):
                    writer.writerow([repr(float(x)), repr(float(v))])
            else:
                writer.writerow(["x", "value_left", "value_right"])
                for x, v in zip(self.grid, self.values):
                    left = self.value_left if x == self.jump_point else v
                    writer.writerow([repr(float(x)), repr(float(left)), repr(float(v))])

    @classmethod
    def from_csv(cls, path) -> "GridFunction":
        with open(path, newline="") as fh:
            header = next(csv.reader(fh))
        if header == ["x", "value"]:
            data = _read_csv(path, header)
            return cls(data["x"], data["value"])
        data = _read_csv(path, ["x", "value_left", "value_right"])
        diff = np.nonzero(data["value_left"] != data["value_right"])[0]
        if diff.size == 0:
            return cls(data["x"], data["value_right"])
        if diff.size > 1:
            raise ValueError("a GridFunction carries at most one jump node")
        k = int(diff[0])
        return cls(data["x"], data["value_right"], jump_point=float(data["x"][k]),
                   value_left=float(data["value_left"][k]))


def _read_csv(path, columns) -> dict:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != list(columns):
            raise ValueError(f"{path}: expected header {','.join(columns)}, got {','.join(header)}")
        rows = [r for r in reader if r]
    arr = np.array(rows, dtype=float).reshape(-1, len(columns))
    return {c: arr[:, i] for i, c in enumerate(columns)}


@dataclass(frozen=True)
class FunctionalSpec:
    """A smooth functional K through its canonical gradient.

    ``gradient`` is kappa (up to an additive constant) and
    ``gradient_derivative`` its derivative k.  For a linear functional
    K(F) = int c dF, ``integrand`` is c; other functionals provide
    ``evaluate`` acting on a cdf.
    """

    gradient: Callable[[ArrayLike], ArrayLike]
    gradient_derivative: Callable[[ArrayLike], ArrayLike]
    label: str
    integrand: Optional[Callable[[ArrayLike], ArrayLike]] = None
    evaluate: Optional[Callable[[object], float]] = None
    domain: tuple = (0.0, 1.0)
    check_derivative: bool = field(default=True, repr=False)

    def __post_init__(self):
        if self.check_derivative:
            self.verify_derivative()

    def verify_derivative(self, n_points: int = 10, rtol: float = 1e-5) -> None:
        a, b = self.domain
        rng = np.random.default_rng(20240611)
        x = rng.uniform(a + 0.05 * (b - a), b - 0.05 * (b - a), n_points)
        step = 1e-5 * (b - a)
        fd = (np.asarray(self.gradient(x + step), dtype=float)
              - np.asarray(self.gradient(x - step), dtype=float)) / (2 * step)
        k = np.broadcast_to(np.asarray(self.gradient_derivative(x), dtype=float), x.shape)
        err = np.abs(fd - k) / np.maximum(1.0, np.abs(k))
        if np.any(err >= rtol):
            i = int(np.argmax(err))
            raise ValueError(f"{self.label}: gradient_derivative disagrees with finite "
                             f"differences at x={x[i]:.6g} (relative error {err[i]:.2e})")

    def value(self, F) -> float:
        if self.integrand is not None and isinstance(F, StepDistribution):
            return integrate_against(F, self.integrand)
        if self.evaluate is not None:
            return float(self.evaluate(F))
        if self.integrand is not None:
            a, b = self.domain
            x, w = _midpoints(a, b, 20000)
            # int c dF = c(b)F(b) - int F c' dx; F(b) taken as 1 on [a, b]
            return float(np.asarray(self.integrand(b)) * np.asarray(F(b))
                         - np.sum(w * np.asarray(F(x)) * _derivative(self.integrand, x)))
        raise ValueError(f"{self.label}: no way to evaluate the functional")


def _derivative(f, x, step=1e-6):
    return (np.asarray(f(x + step)) - np.asarray(f(x - step))) / (2 * step)


def first_moment(domain=(0.0, 1.0)) -> FunctionalSpec:
    return FunctionalSpec(lambda x: np.asarray(x, dtype=float),
                          lambda x: np.ones_like(np.asarray(x, dtype=float)),
                          "mean", integrand=lambda x: np.asarray(x, dtype=float),
                          domain=domain)


def moment(k: int, domain=(0.0, 1.0)) -> FunctionalSpec:
    if k == 1:
        return first_moment(domain)
    return FunctionalSpec(lambda x: np.asarray(x, dtype=float) ** k,
                          lambda x: k * np.asarray(x, dtype=float) ** (k - 1),
                          f"moment{k}", integrand=lambda x: np.asarray(x, dtype=float) ** k,
                          domain=domain)


def constant_functional(c: float = 1.0, domain=(0.0, 1.0)) -> FunctionalSpec:
    """K(F) = c for every F: the gradient is constant, so k = 0."""
    return FunctionalSpec(lambda x: np.full_like(np.asarray(x, dtype=float), c),
                          lambda x: np.zeros_like(np.asarray(x, dtype=float)),
                          "constant", evaluate=lambda F: float(c), domain=domain)


def squared_cdf_functional(F0, weight=None, domain=(0.0, 1.0), n_nodes: int = 4001) -> FunctionalSpec:
    """K(F) = int F(x)^2 w(x) dx, with gradient taken at F0.

    kappa(x) = 2 int_x^M F0(s) w(s) ds (up to a constant) and
    k(x) = -2 F0(x) w(x).
    """
    a, b = domain
    if weight is None:
        weight = lambda x: np.ones_like(np.asarray(x, dtype=float))
    s = np.linspace(a, b, n_nodes)
    dens = 2 * np.asarray(F0(s)) * np.asarray(weight(s))
    tail = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(s))])
    tail = tail[-1] - tail

    def gradient(x):
        x = np.asarray(x, dtype=float)
        # exact on each trapezoid cell: integrate the linear interpolant of dens
        i = np.clip(np.searchsorted(s, x, side="right") - 1, 0, n_nodes - 2)
        t = x - s[i]
        slope = (dens[i + 1] - dens[i]) / (s[i + 1] - s[i])
        return tail[i] - (dens[i] * t + 0.5 * slope * t * t)

    def derivative(x):
        return -np.interp(np.asarray(x, dtype=float), s, dens)

    def evaluate(F):
        x, w = _midpoints(a, b, 20000)
        return float(np.sum(w * np.asarray(F(x)) ** 2 * np.asarray(weight(x))))

    return FunctionalSpec(gradient, derivative, "squared_cdf", evaluate=evaluate, domain=domain)


def eval_cdf(F: StepDistribution, x: ArrayLike) -> ArrayLike:
    """Sum of the masses at jump points <= x (right-continuous)."""
    x = np.asarray(x, dtype=float)
    cum = np.concatenate([[0.0], np.cumsum(F.masses)])
    out = cum[np.searchsorted(F.jump_points, x, side="right")]
    return out if out.ndim else float(out)


def integrate_against(F: StepDistribution, c: Callable[[ArrayLike], ArrayLike]) -> float:
    if F.jump_points.size == 0:
        return 0.0
    vals = np.broadcast_to(np.asarray(c(F.jump_points), dtype=float), F.jump_points.shape)
    bad = ~np.isfinite(vals)
    if np.any(bad):
        raise ValueError(f"integrand is not finite at jump point {F.jump_points[bad][0]!r}")
    return float(np.dot(vals, F.masses))


def _midpoints(a, b, n):
    h = (b - a) / n
    return a + (np.arange(n) + 0.5) * h, np.full(n, h)


def _domain_of(F, default):
    if isinstance(F, StepDistribution):
        return (0.0, F.support_end)
    if isinstance(F, GridFunction):
        return (float(F.grid[0]), float(F.grid[-1]))
    return default


def _critical_points(F) -> np.ndarray:
    if isinstance(F, StepDistribution):
        return F.jump_points
    if isinstance(F, GridFunction):
        pts = F.grid
        if F.jump_point is not None:
            pts = np.concatenate([pts, [F.jump_point]])
        return pts
    return np.empty(0)


def distance(F, G, kind: str = "sup", domain=None, n_panels: int = 20000) -> float:
    """Sup or L2 distance between two cdf-like objects on a common domain.

    ``F`` and ``G`` may be StepDistribution, GridFunction or vectorised
    callables.  The sup is exact at jump points (both one-sided values) and
    grid nodes, supplemented by a uniform scan for continuous callables.
    """
    dF = _domain_of(F, None)
    dG = _domain_of(G, None)
    if dF is not None and dG is not None and not np.allclose(dF, dG):
        raise ValueError(f"mismatched domains {dF} and {dG}")
    dom = domain or dF or dG or (0.0, 1.0)
    a, b = map(float, dom)
    if kind == "sup":
        crit = np.concatenate([_critical_points(F), _critical_points(G)])
        crit = crit[(crit >= a) & (crit <= b)]
        left = np.nextafter(crit, -np.inf)
        pts = np.concatenate([np.linspace(a, b, 4001), crit, left[left >= a]])
        return float(np.max(np.abs(np.asarray(F(pts)) - np.asarray(G(pts)))))
    if kind == "L2":
        x, w = _midpoints(a, b, max(int(n_panels), 1000))
        diff = np.asarray(F(x)) - np.asarray(G(x))
        return float(np.sqrt(np.sum(w * diff * diff)))
    raise ValueError(f"unknown distance kind {kind!r}")


def uniform_cdf(a: float = 0.0, b: float = 1.0) -> Callable[[ArrayLike], ArrayLike]:
    def F(x):
        return np.clip((np.asarray(x, dtype=float) - a) / (b - a), 0.0, 1.0)
    return F
