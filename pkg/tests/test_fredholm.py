import numpy as np
import pytest

from npinteq.core_types import GridFunction, first_moment
from npinteq.deconv import ConvolutionKernel, solve_phi_deconv
from npinteq.fredholm import (FredholmError, FredholmProblem, JumpSpec, build_quadrature, residual,
                              solve_second_kind, solve_with_jump)
from npinteq.functionals import solve_phi_smooth
from npinteq.icens import ObservationModel

from conftest import uniform


def separable(x, u):
    return x * u


def test_zero_kernel_returns_rhs():
    p = FredholmProblem(lambda x, u: np.zeros(np.broadcast(x, u).shape), np.cos)
    sol = solve_second_kind(p, 64)
    x = sol.solution.grid
    assert np.allclose(sol.solution.values, np.cos(x), atol=1e-15)
    assert sol.residual_sup == 0.0


def test_separable_kernel_oracle():
    # phi + int x u phi(u) du = x has phi = 3x/4
    p = FredholmProblem(separable, lambda x: np.asarray(x, dtype=float))
    sol = solve_second_kind(p, 512)
    x = sol.solution.grid
    assert np.max(np.abs(sol.solution.values - 0.75 * x)) < 1e-8
    exact = GridFunction(np.linspace(0, 1, 11), 0.75 * np.linspace(0, 1, 11))
    assert residual(p, exact, 512) < 1e-8


def test_open_grid_avoids_endpoints():
    q = build_quadrature((0.0, 1.0), 100)
    assert q.nodes.min() > 0 and q.nodes.max() < 1
    assert q.weights.sum() == pytest.approx(1.0, abs=1e-14)


def test_residual_of_zero_candidate_is_sup_rhs():
    p = FredholmProblem(separable, lambda x: np.sin(3 * np.asarray(x)))
    zero = GridFunction([0.0, 1.0], [0.0, 0.0])
    q = build_quadrature((0.0, 1.0), 256)
    assert residual(p, zero, quadrature=q) == pytest.approx(np.max(np.abs(np.sin(3 * q.nodes))))


def test_reported_residual_matches_recomputation():
    p = FredholmProblem(lambda x, u: np.exp(-np.abs(x - u)), lambda x: 1 + np.asarray(x) ** 2)
    sol = solve_second_kind(p, 300)
    assert residual(p, sol.solution, quadrature=sol.quadrature) == pytest.approx(sol.residual_sup, abs=1e-15)
    assert sol.residual_sup < 1e-12


def test_linearity():
    k = lambda x, u: np.cos(x - u)
    r1, r2 = (lambda x: np.asarray(x) ** 2), (lambda x: np.exp(np.asarray(x)))
    s1 = solve_second_kind(FredholmProblem(k, r1), 200).solution
    s2 = solve_second_kind(FredholmProblem(k, r2), 200).solution
    s12 = solve_second_kind(FredholmProblem(k, lambda x: r1(x) + r2(x)), 200).solution
    assert np.max(np.abs(s12.values - s1.values - s2.values)) < 1e-9


def test_degenerate_jump_is_plain_solve():
    r = lambda x: np.asarray(x, dtype=float)
    plain = solve_second_kind(FredholmProblem(separable, r), 128)
    jump = solve_with_jump(FredholmProblem(separable, r, rhs_jump=JumpSpec(0.4, 0.4, 0.4)), 128)
    assert np.array_equal(plain.solution.values, jump.solution.values)


def test_jump_solution_closed_form():
    # phi + int x u phi = 1{x >= t}: phi = 1{x >= t} - c x with c = 3(1 - t^2)/8
    t = 0.37
    p = FredholmProblem(separable, lambda x: (np.asarray(x) >= t).astype(float),
                        rhs_jump=JumpSpec(t, 0.0, 1.0))
    sol = solve_second_kind(p, 512)
    gf = sol.solution
    c = 3 * (1 - t * t) / 8
    assert gf.jump_point == t
    assert gf.value_left == pytest.approx(-c * t, abs=1e-10)
    assert gf.value_right == pytest.approx(1 - c * t, abs=1e-10)
    x = gf.grid[gf.grid != t]
    assert np.max(np.abs(gf(x) - ((x >= t) - c * x))) < 1e-10
    assert sol.residual_sup < 1e-12


def test_singular_system_reports_condition():
    # phi - int phi = r is singular (constants are in the null space)
    p = FredholmProblem(lambda x, u: -np.ones(np.broadcast(x, u).shape), np.sin)
    with pytest.raises(FredholmError) as info:
        solve_second_kind(p, 64)
    assert info.value.condition > 1e12


def test_nonfinite_kernel_is_reported():
    p = FredholmProblem(lambda x, u: 1.0 / (x - u), np.sin)
    with pytest.raises(Exception, match="kernel"):
        with np.errstate(divide="ignore"):
            solve_second_kind(p, 64)


def test_problem_validation():
    with pytest.raises(ValueError):
        FredholmProblem(separable, np.sin, (1.0, 0.0))
    with pytest.raises(ValueError):
        FredholmProblem(separable, np.sin, rhs_jump=JumpSpec(1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        FredholmProblem(separable, np.sin, singularity_hints=(0.5,))
    with pytest.raises(ValueError):
        solve_second_kind(FredholmProblem(separable, np.sin), 8)


def test_singularity_hint_grades_the_grid():
    q = build_quadrature((0.0, 1.0), 200, hints=(1.0,), levels=8)
    gaps = 1.0 - q.nodes[-5:]
    assert gaps.min() < 0.05 * 0.5 ** 8
    assert q.weights.sum() == pytest.approx(1.0, abs=1e-13)


def test_dump_system(tmp_path):
    prefix = str(tmp_path / "sys")
    solve_second_kind(FredholmProblem(separable, np.sin), 32, dump_system=prefix)
    M = np.loadtxt(prefix + "_matrix.csv", delimiter=",")
    rhs = np.loadtxt(prefix + "_rhs.csv", delimiter=",", skiprows=1)
    assert M.shape == (rhs.shape[0], rhs.shape[0])


def _changes(solve, sizes, x):
    vals = [solve(n)(x) for n in sizes]
    return [np.max(np.abs(b - a)) for a, b in zip(vals[:-1], vals[1:])]


@pytest.mark.parametrize("problem", ["triangle", "elbow"])
def test_refinement_is_at_least_first_order(problem):
    x = np.linspace(0.05, 0.95, 37)
    if problem == "triangle":
        model = ObservationModel.uniform_triangle(0.1)
        solve = lambda n: solve_phi_smooth(model, uniform, first_moment(), n)
    else:
        g = ConvolutionKernel.elbow()
        solve = lambda n: solve_phi_deconv(None, g, first_moment(), n)
    d1, d2 = _changes(solve, [512, 1024, 2048], x)
    assert d2 <= 0.6 * d1
