import math

import numpy as np
import pytest
from scipy import integrate

from supg_dwr.fespace import FeSpace
from supg_dwr.mesh import EAST, NORTH, SOUTH, WEST, MarkSet, new_uniform
from supg_dwr.problem import (ConfigurationError, DegenerateGoalError, Dirichlet, DomainMean,
                              L2ErrorRep, PointValueRegularized, ProblemSpec, SubdomainMean,
                              constant_problem, dual_rhs_density, example1, example2,
                              exact_goal_error, freeze_context, goal_of_function, goal_value, l2_error,
                              manufactured, tanh_layer_mean)

PROBLEMS = [example1(1e-6), example1(1e-3), example2(1e-6), example2(1e-3),
            manufactured(1), manufactured(3, epsilon=0.5, b=(2.0, -1.0), alpha=0.0)]


def test_example1_center_value():
    u = example1(1e-6).exact.u(0.5, 0.5)
    assert u == pytest.approx(0.5 + math.atan(125.0) / math.pi, rel=1e-14)
    assert u == pytest.approx(0.997454, abs=1e-6)


@pytest.mark.parametrize("eps", [1e-6, 1e-3])
def test_example1_boundary_zero(eps):
    u = example1(eps).exact.u
    t = np.linspace(0, 1, 11)
    for x, y in ((t, 0 * t), (t, 0 * t + 1), (0 * t, t), (0 * t + 1, t)):
        assert np.allclose(u(x, y), 0.0)


def test_example2_values():
    pr = example2(1e-6)
    x = np.linspace(0.2, 0.6, 7)
    assert np.allclose(pr.exact.u(x, 2 * x - 0.25), 0.5)
    assert pr.exact.u(0.0, 1.0) == 1.0
    bx, by = pr.b(np.zeros(3), np.zeros(3))
    assert np.allclose(np.hypot(bx, by), 1.0)


def fd_derivatives(u, x, y, h):
    ux = (u(x + h, y) - u(x - h, y)) / (2 * h)
    uy = (u(x, y + h) - u(x, y - h)) / (2 * h)
    lap = (u(x + h, y) + u(x - h, y) + u(x, y + h) + u(x, y - h) - 4 * u(x, y)) / h**2
    return ux, uy, lap


@pytest.mark.parametrize("pr, h", [(example1(1e-2), 1e-4), (example2(1e-2), 1e-4),
                                   (manufactured(2), 1e-4)])
def test_derivatives_against_finite_differences(pr, h):
    rng = np.random.default_rng(0)
    x, y = 0.05 + 0.9 * rng.random(20), 0.05 + 0.9 * rng.random(20)
    ux, uy, lap = fd_derivatives(pr.exact.u, x, y, h)
    gx, gy = pr.exact.grad(x, y)
    ex_lap = pr.exact.lap(x, y)
    scale = np.max(np.abs(ex_lap)) + 1
    assert np.max(np.abs(ux - gx)) < 1e-4 * (np.max(np.abs(gx)) + 1)
    assert np.max(np.abs(uy - gy)) < 1e-4 * (np.max(np.abs(gy)) + 1)
    assert np.max(np.abs(lap - ex_lap)) < 1e-4 * scale


def test_example1_laplacian_away_from_layer_small_eps():
    pr = example1(1e-6)
    rng = np.random.default_rng(1)
    pts = []
    while len(pts) < 20:
        x, y = 0.05 + 0.9 * rng.random(2)
        if abs(math.hypot(x - 0.5, y - 0.5) - 0.25) > 0.05:
            pts.append((x, y))
    x, y = np.array(pts).T
    _, _, lap = fd_derivatives(pr.exact.u, x, y, 1e-4)
    ex = pr.exact.lap(x, y)
    assert np.max(np.abs(lap - ex) / (np.abs(ex) + 1e-3)) < 1e-4


@pytest.mark.parametrize("pr", PROBLEMS, ids=lambda p: p.name)
def test_exact_residual_vanishes(pr):
    rng = np.random.default_rng(2)
    x, y = rng.random(100), rng.random(100)
    fmax = np.max(np.abs(pr.f(x, y))) + 1e-300
    assert np.max(np.abs(pr.strong_residual(x, y))) < 1e-8 * fmax


def test_problem_validation():
    with pytest.raises(ConfigurationError):
        constant_problem(epsilon=0.0)
    with pytest.raises(ConfigurationError):
        constant_problem(alpha=-1.0)
    pr = constant_problem()
    with pytest.raises(ConfigurationError):
        ProblemSpec("bad", 1.0, lambda x, y: (x, 0.0 * x), pr.reaction, pr.source, pr.boundary)
    with pytest.raises(ConfigurationError):
        ProblemSpec("bad", 1.0, pr.convection, pr.reaction, pr.source, {WEST: Dirichlet(pr.source)})


def test_nonhomogeneous_flag():
    assert not constant_problem().has_nonhomogeneous_dirichlet
    assert constant_problem(dirichlet=1.0).has_nonhomogeneous_dirichlet
    neu = constant_problem(neumann_sides=(EAST, NORTH))
    assert neu.dirichlet_sides == [WEST, SOUTH]


def test_tanh_mean_against_quadrature():
    eps = 1e-3
    u = example2(eps).exact.u
    ref, _ = integrate.dblquad(lambda y, x: u(x, y), 0, 1, 0, 1, epsabs=1e-12)
    assert tanh_layer_mean(eps) == pytest.approx(ref, rel=1e-9)


def space_and_state(n=4, p=1, pr=None):
    pr = pr or example2(1e-3)
    mesh = new_uniform(n=n)
    mesh, _ = mesh.refine_and_coarsen(MarkSet.of(mesh.keys[:2]))
    space = FeSpace(mesh, p)
    return pr, space


def test_domain_mean_and_point_of_constants():
    pr, space = space_and_state()
    c = np.full(space.n_dofs, 2.5)
    ctx = freeze_context(DomainMean(), pr, space, c, 4)
    assert goal_value(ctx, space, np.ones(space.n_dofs), 4) == pytest.approx(1.0)
    for r in (0.05, 0.2):
        ctx = freeze_context(PointValueRegularized(radius=r), pr, space, c, 4)
        assert goal_value(ctx, space, c, 4) == pytest.approx(2.5)


def test_box_goal_is_area_for_one():
    pr, space = space_and_state(n=8)
    ctx = freeze_context(SubdomainMean((0.25, 0.75, 0.25, 0.75)), pr, space, None, 4)
    assert goal_value(ctx, space, np.ones(space.n_dofs), 4) == pytest.approx(0.25)


def test_point_density_outside_ball_zero():
    pr, space = space_and_state()
    ctx = freeze_context(PointValueRegularized(), pr, space, np.zeros(space.n_dofs), 4)
    j = dual_rhs_density(ctx, np.array([0]), None, np.array([[0.9]]), np.array([[0.9]]))
    assert j[0, 0] == 0.0


def test_l2_goal_error_equals_norm():
    pr, space = space_and_state(8)
    u_h = space.interpolate_function(lambda x, y: pr.exact.u(x, y) + 0.1 * x * y)
    ctx = freeze_context(L2ErrorRep(), pr, space, u_h, 4, 8)
    err = exact_goal_error(ctx, 8)
    assert err == pytest.approx(l2_error(pr, space, u_h, 8), rel=1e-12)
    # expanding (e, u - u_h)/|e| by quadrature gives the same value
    expanded = goal_of_function(ctx, pr.exact.u, 8) - goal_value(ctx, space, u_h, 8)
    assert expanded == pytest.approx(err, rel=1e-12)


def test_l2_goal_with_zero_uh():
    pr, space = space_and_state(8)
    zero = np.zeros(space.n_dofs)
    ctx = freeze_context(L2ErrorRep(), pr, space, zero, 6)
    assert goal_of_function(ctx, pr.exact.u, 6) == pytest.approx(ctx.e_norm, rel=1e-12)


def test_l2_goal_needs_exact_and_nonzero_error():
    pr = constant_problem()
    space = FeSpace(new_uniform(n=2), 1)
    with pytest.raises(ConfigurationError):
        freeze_context(L2ErrorRep(), pr, space, np.zeros(space.n_dofs), 4)
    mpr = manufactured(1)
    exact = space.interpolate_function(mpr.exact.u)
    ctx = freeze_context(L2ErrorRep(), mpr, space, exact, 4)
    with pytest.raises(DegenerateGoalError):
        dual_rhs_density(ctx, np.array([0]), np.array([[0.5, 0.5]]),
                         np.array([[0.25]]), np.array([[0.25]]))


def test_point_goal_ball_missing_all_points():
    pr, space = space_and_state(2)
    with pytest.raises(DegenerateGoalError):
        freeze_context(PointValueRegularized((0.5, 0.5), 1e-4), pr, space, None, 1)
    with pytest.raises(ConfigurationError):
        PointValueRegularized(radius=0.0)


@pytest.mark.parametrize("goal", [DomainMean(), PointValueRegularized(), SubdomainMean(),
                                  L2ErrorRep()])
def test_goal_linearity(goal):
    pr, space = space_and_state(8, 2)
    rng = np.random.default_rng(4)
    u_h = space.T @ rng.standard_normal(space.n_free)
    ctx = freeze_context(goal, pr, space, u_h, 5)
    v = space.T @ rng.standard_normal(space.n_free)
    w = space.T @ rng.standard_normal(space.n_free)
    a, b = 1.7, -0.3
    lhs = goal_value(ctx, space, a * v + b * w, 5)
    rhs = a * goal_value(ctx, space, v, 5) + b * goal_value(ctx, space, w, 5)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-14)
