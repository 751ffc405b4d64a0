"""Model problems -eps*Lap(u) + b.grad(u) + alpha*u = f and goal functionals."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .fespace import FeSpace, make_quadrature
from .mesh import EAST, NORTH, SOUTH, WEST


class ConfigurationError(ValueError):
    """Raised for inconsistent problem/goal combinations."""


class DegenerateGoalError(ArithmeticError):
    """Raised when the goal's dual density is undefined (e.g. zero error)."""


Field = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Exact:
    """Closed-form solution with its gradient and Laplacian."""

    u: Field
    grad: Callable[[np.ndarray, np.ndarray], tuple]
    lap: Field


@dataclass(frozen=True)
class Dirichlet:
    g: Field


@dataclass(frozen=True)
class Neumann:
    """Homogeneous Neumann condition."""


@dataclass(frozen=True)
class ProblemSpec:
    """Coefficients and data of a steady convection-diffusion-reaction problem.

    ``convection`` returns ``(bx, by)``; ``boundary`` maps side index
    (see :mod:`supg_dwr.mesh`) to :class:`Dirichlet` or :class:`Neumann`.
    """

    name: str
    epsilon: float
    convection: Callable
    reaction: Field
    source: Field
    boundary: dict
    domain: tuple = (0.0, 1.0, 0.0, 1.0)
    exact: Optional[Exact] = None
    exact_mean: Optional[float] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be positive, got {self.epsilon}")
        if set(self.boundary) != {WEST, EAST, SOUTH, NORTH}:
            raise ConfigurationError("boundary conditions needed on all four sides")
        self._spot_check()

    def _spot_check(self, n: int = 16, step: float = 1e-5):
        xmin, xmax, ymin, ymax = self.domain
        rng = np.random.default_rng(12345)
        x = xmin + (xmax - xmin) * (0.05 + 0.9 * rng.random(n))
        y = ymin + (ymax - ymin) * (0.05 + 0.9 * rng.random(n))
        alpha = np.broadcast_to(self.reaction(x, y), x.shape)
        if np.any(alpha < 0):
            raise ConfigurationError("reaction coefficient must be non-negative")
        bxp, _ = self.b(x + step, y)
        bxm, _ = self.b(x - step, y)
        _, byp = self.b(x, y + step)
        _, bym = self.b(x, y - step)
        div = (bxp - bxm + byp - bym) / (2 * step)
        bmag = np.max(np.hypot(*self.b(x, y))) + 1.0
        if np.max(np.abs(div)) > 1e-6 * bmag:
            raise ConfigurationError("convection field must be divergence free")

    def b(self, x, y):
        bx, by = self.convection(x, y)
        return np.broadcast_to(bx, np.shape(x)), np.broadcast_to(by, np.shape(x))

    def alpha(self, x, y):
        return np.broadcast_to(self.reaction(x, y), np.shape(x))

    def f(self, x, y):
        return np.broadcast_to(self.source(x, y), np.shape(x))

    @property
    def dirichlet_sides(self) -> list:
        return [s for s, bc in sorted(self.boundary.items()) if isinstance(bc, Dirichlet)]

    @property
    def has_nonhomogeneous_dirichlet(self) -> bool:
        return any(isinstance(bc, Dirichlet) and not getattr(bc.g, "is_zero", False)
                   for bc in self.boundary.values())

    def strong_residual(self, x, y):
        """``f + eps*Lap(u) - b.grad(u) - alpha*u`` for the exact solution."""
        if self.exact is None:
            raise ConfigurationError(f"problem {self.name!r} has no exact solution")
        ux, uy = self.exact.grad(x, y)
        bx, by = self.b(x, y)
        return (self.f(x, y) + self.epsilon * self.exact.lap(x, y)
                - bx * ux - by * uy - self.alpha(x, y) * self.exact.u(x, y))


def _zero(x, y):
    return np.zeros(np.shape(x))


_zero.is_zero = True


def _const(c):
    def fn(x, y):
        return np.full(np.shape(x), float(c))
    if c == 0:
        fn.is_zero = True
    return fn


def _all_dirichlet(g):
    return {s: Dirichlet(g) for s in (WEST, EAST, SOUTH, NORTH)}


def _source_from_exact(epsilon, convection, reaction, exact: Exact) -> Field:
    def f(x, y):
        ux, uy = exact.grad(x, y)
        bx, by = convection(x, y)
        return -epsilon * exact.lap(x, y) + bx * ux + by * uy + reaction(x, y) * exact.u(x, y)
    return f


# ---------------------------------------------------------------------------
# benchmark problems
# ---------------------------------------------------------------------------

def hump_solution(epsilon: float, r0: float = 0.25, center=(0.5, 0.5)) -> Exact:
    """Bubble times an arctan ramp with a circular internal layer."""
    c = 2.0 / math.sqrt(epsilon)
    x0, y0 = center

    def parts(x, y):
        g = r0**2 - (x - x0) ** 2 - (y - y0) ** 2
        s = c * g
        q = 0.5 + np.arctan(s) / np.pi
        d = 1.0 / (1.0 + s * s)
        gx, gy = -2.0 * (x - x0), -2.0 * (y - y0)
        qx = c * gx * d / np.pi
        qy = c * gy * d / np.pi
        # d/dx of c*g_x/(1+s^2) = c*(g_xx*(1+s^2) - g_x*2*s*c*g_x)/(1+s^2)^2
        qxx = c * (-2.0 * d - 2.0 * s * c * gx * gx * d * d) / np.pi
        qyy = c * (-2.0 * d - 2.0 * s * c * gy * gy * d * d) / np.pi
        px_ = x * (1 - x)
        py_ = y * (1 - y)
        P = 16.0 * px_ * py_
        Px = 16.0 * (1 - 2 * x) * py_
        Py = 16.0 * px_ * (1 - 2 * y)
        Pxx = -32.0 * py_
        Pyy = -32.0 * px_
        return P, Px, Py, Pxx, Pyy, q, qx, qy, qxx, qyy

    def u(x, y):
        P, *_, q, qx, qy, qxx, qyy = parts(x, y)
        return P * q

    def grad(x, y):
        P, Px, Py, _, _, q, qx, qy, _, _ = parts(x, y)
        return Px * q + P * qx, Py * q + P * qy

    def lap(x, y):
        P, Px, Py, Pxx, Pyy, q, qx, qy, qxx, qyy = parts(x, y)
        return Pxx * q + 2 * Px * qx + P * qxx + Pyy * q + 2 * Py * qy + P * qyy

    return Exact(u, grad, lap)


def example1(epsilon: float = 1e-6) -> ProblemSpec:
    """Hump with a circular interior layer, b = (2, 3), alpha = 1."""
    exact = hump_solution(epsilon)

    def conv(x, y):
        return 2.0, 3.0

    react = _const(1.0)
    return ProblemSpec(
        name="example1", epsilon=epsilon, convection=conv, reaction=react,
        source=_source_from_exact(epsilon, conv, react, exact),
        boundary=_all_dirichlet(exact.u), exact=exact, params={"epsilon": epsilon},
    )


def _sech2(t):
    e = np.exp(-2.0 * np.abs(t))
    return 4.0 * e / (1.0 + e) ** 2


def tanh_layer_solution(epsilon: float) -> Exact:
    sigma = math.sqrt(5.0 * epsilon)

    def u(x, y):
        return 0.5 * (1.0 - np.tanh((2 * x - y - 0.25) / sigma))

    def grad(x, y):
        ut = -0.5 * _sech2((2 * x - y - 0.25) / sigma)
        return 2.0 * ut / sigma, -ut / sigma

    def lap(x, y):
        t = (2 * x - y - 0.25) / sigma
        return 5.0 * _sech2(t) * np.tanh(t) / sigma**2

    return Exact(u, grad, lap)


def _logcosh(t):
    a = np.abs(t)
    return a + np.log1p(np.exp(-2.0 * a)) - math.log(2.0)


def tanh_layer_mean(epsilon: float) -> float:
    """Integral of the tanh layer solution over the unit square.

    The y-integral is done in closed form, the x-integral adaptively.
    """
    sigma = math.sqrt(5.0 * epsilon)

    def inner(x):
        # int_0^1 tanh((2x - y - 0.25)/sigma) dy
        return sigma * (_logcosh((2 * x - 0.25) / sigma) - _logcosh((2 * x - 1.25) / sigma))

    pts = [0.125, 0.625]
    val, _ = integrate.quad(inner, 0.0, 1.0, points=pts, limit=500, epsabs=1e-15, epsrel=1e-13)
    return 0.5 * (1.0 - val)


def example2(epsilon: float = 1e-6) -> ProblemSpec:
    """Straight interior tanh layer along 2*x1 - x2 = 0.25, b = (1, 2)/sqrt(5)."""
    exact = tanh_layer_solution(epsilon)
    s5 = 1.0 / math.sqrt(5.0)

    def conv(x, y):
        return s5, 2.0 * s5

    react = _const(1.0)
    return ProblemSpec(
        name="example2", epsilon=epsilon, convection=conv, reaction=react,
        source=_source_from_exact(epsilon, conv, react, exact),
        boundary=_all_dirichlet(exact.u), exact=exact,
        exact_mean=tanh_layer_mean(epsilon), params={"epsilon": epsilon},
    )


def manufactured(degree: int = 1, epsilon: float = 1.0, b=(1.0, 1.0), alpha: float = 1.0) -> ProblemSpec:
    """Problem whose exact solution lies in Q_degree."""
    P = np.polynomial.polynomial
    cx = np.zeros(degree + 1)
    cy = np.zeros(degree + 1)
    cx[0], cx[1] = 1.0, 1.0
    cy[0], cy[1] = 1.0, 2.0
    if degree >= 2:
        cx[degree] += 0.5
        cy[degree] -= 1.0 / 3.0
    dx, dy = P.polyder(cx), P.polyder(cy)
    dxx, dyy = P.polyder(cx, 2), P.polyder(cy, 2)
    exact = Exact(
        u=lambda x, y: P.polyval(x, cx) * P.polyval(y, cy),
        grad=lambda x, y: (P.polyval(x, dx) * P.polyval(y, cy), P.polyval(x, cx) * P.polyval(y, dy)),
        lap=lambda x, y: P.polyval(x, dxx) * P.polyval(y, cy) + P.polyval(x, cx) * P.polyval(y, dyy),
    )
    bx, by = float(b[0]), float(b[1])

    def conv(x, y):
        return bx, by

    react = _const(alpha)
    mean = float(np.sum(P.polyint(cx)) * np.sum(P.polyint(cy)))
    return ProblemSpec(
        name="manufactured", epsilon=epsilon, convection=conv, reaction=react,
        source=_source_from_exact(epsilon, conv, react, exact),
        boundary=_all_dirichlet(exact.u), exact=exact, exact_mean=mean,
        params={"degree": degree, "epsilon": epsilon, "b": [bx, by], "alpha": alpha},
    )


def constant_problem(epsilon: float = 1.0, b=(0.0, 0.0), alpha: float = 0.0,
                     f: float = 0.0, dirichlet: float = 0.0, neumann_sides=()) -> ProblemSpec:
    """Constant coefficients and data; used for custom runs and null tests."""
    bx, by = float(b[0]), float(b[1])

    def conv(x, y):
        return bx, by

    boundary = {s: (Neumann() if s in neumann_sides else Dirichlet(_const(dirichlet)))
                for s in (WEST, EAST, SOUTH, NORTH)}
    return ProblemSpec(
        name="custom", epsilon=epsilon, convection=conv, reaction=_const(alpha),
        source=_const(f), boundary=boundary,
        params={"epsilon": epsilon, "b": [bx, by], "alpha": alpha, "f": f, "dirichlet": dirichlet},
    )


# ---------------------------------------------------------------------------
# goal functionals
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class L2ErrorRep:
    """J(v) = (e, v) / ||e|| with e = u - u_h frozen per iteration."""

    name = "l2"


@dataclass(frozen=True)
class DomainMean:
    """J(v) = integral of v over the domain."""

    name = "mean"


@dataclass(frozen=True)
class PointValueRegularized:
    """Mean of v over the ball of radius ``radius`` around ``center``."""

    center: tuple = (5.0 / 16.0, 3.0 / 8.0)
    radius: float = 0.05
    name = "point"

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigurationError("ball radius must be positive")


@dataclass(frozen=True)
class SubdomainMean:
    """Integral of v over the box ``(xmin, xmax, ymin, ymax)`` (unnormalized)."""

    box: tuple = (0.25, 0.75, 0.25, 0.75)
    name = "box"


GOALS = {"l2": L2ErrorRep, "mean": DomainMean, "point": PointValueRegularized, "box": SubdomainMean}


@dataclass
class GoalContext:
    """Data frozen for one adaptive iteration (per goal)."""

    goal: object
    problem: ProblemSpec
    primal: Optional[FeSpace] = None
    u_h: Optional[np.ndarray] = None
    e_norm: Optional[float] = None
    measure: Optional[float] = None
    u_norm: Optional[float] = None


_CHUNK_POINTS = 2_000_000
# relative size of ||u - u_h|| below which the L2 goal is treated as undefined
_DEGENERATE = 1e-13


def _quad_points(mesh, q, cells=None):
    rule = make_quadrature(q)
    x0, y0, hx, hy = mesh.geometry
    if cells is not None:
        x0, y0, hx, hy = x0[cells], y0[cells], hx[cells], hy[cells]
    X = x0[:, None] + hx[:, None] * rule.points[None, :, 0]
    Y = y0[:, None] + hy[:, None] * rule.points[None, :, 1]
    W = (hx * hy)[:, None] * rule.weights[None, :]
    return rule, X, Y, W


def _cell_sum(mesh, q, integrand) -> float:
    """Sum of ``integrand(cells, xhat, X, Y) * W`` over all cells, in chunks."""
    n = len(mesh)
    chunk = max(1, _CHUNK_POINTS // len(make_quadrature(q).weights))
    total = 0.0
    for start in range(0, n, chunk):
        cells = np.arange(start, min(start + chunk, n))
        rule, X, Y, W = _quad_points(mesh, q, cells)
        total += float(np.sum(W * integrand(cells, rule.points, X, Y)))
    return total


def l2_error(problem: ProblemSpec, space: FeSpace, u_h, q: int) -> float:
    if problem.exact is None:
        raise ConfigurationError(f"problem {problem.name!r} has no exact solution")

    def sq(cells, xhat, X, Y):
        e = problem.exact.u(X, Y) - space.evaluate(u_h, cells, xhat, 1)["v"]
        return e * e

    return math.sqrt(_cell_sum(space.mesh, q, sq))


def freeze_context(goal, problem: ProblemSpec, space: FeSpace, u_h, q: int,
                   q_error: Optional[int] = None) -> GoalContext:
    """Fix the iteration-dependent data a goal needs (error norm, ball measure)."""
    ctx = GoalContext(goal, problem, space, u_h)
    if isinstance(goal, L2ErrorRep):
        ctx.e_norm = l2_error(problem, space, u_h, q_error or q)
        ctx.u_norm = math.sqrt(_cell_sum(space.mesh, q_error or q,
                                         lambda c, xh, X, Y: problem.exact.u(X, Y) ** 2))
    elif isinstance(goal, PointValueRegularized):
        ctx.measure = _cell_sum(space.mesh, q, lambda c, xh, X, Y: _in_ball(goal, X, Y))
        if ctx.measure == 0.0:
            raise DegenerateGoalError("no quadrature point falls inside the ball")
    return ctx


def _in_ball(goal, X, Y):
    cx, cy = goal.center
    return ((X - cx) ** 2 + (Y - cy) ** 2 < goal.radius**2).astype(float)


def _in_box(goal, X, Y):
    x0, x1, y0, y1 = goal.box
    return ((X > x0) & (X < x1) & (Y > y0) & (Y < y1)).astype(float)


def dual_rhs_density(ctx: GoalContext, cells, xhat, X, Y) -> np.ndarray:
    """Dual right-hand side density j at points ``(X, Y)`` of ``cells``."""
    goal = ctx.goal
    if isinstance(goal, L2ErrorRep):
        if ctx.problem.exact is None:
            raise ConfigurationError("the L2 goal needs an exact solution")
        if ctx.e_norm is None or ctx.e_norm <= _DEGENERATE * (ctx.u_norm or 1.0):
            raise DegenerateGoalError("discrete solution is exact; L2 goal undefined")
        uh = ctx.primal.evaluate(ctx.u_h, cells, xhat, 1)["v"]
        return (ctx.problem.exact.u(X, Y) - uh) / ctx.e_norm
    if isinstance(goal, DomainMean):
        return np.ones(np.shape(X))
    if isinstance(goal, PointValueRegularized):
        return _in_ball(goal, X, Y) / ctx.measure
    if isinstance(goal, SubdomainMean):
        return _in_box(goal, X, Y)
    raise ConfigurationError(f"unknown goal {goal!r}")


def goal_value(ctx: GoalContext, space: FeSpace, coeffs, q: int) -> float:
    """J(v) = (j, v) by cell-wise quadrature."""
    def jv(cells, xhat, X, Y):
        return dual_rhs_density(ctx, cells, xhat, X, Y) * space.evaluate(coeffs, cells, xhat, 1)["v"]

    return _cell_sum(space.mesh, q, jv)


def goal_of_function(ctx: GoalContext, fn: Field, q: int) -> float:
    """J(fn) for a closed-form function, by the same quadrature."""
    def jf(cells, xhat, X, Y):
        return dual_rhs_density(ctx, cells, xhat, X, Y) * fn(X, Y)

    return _cell_sum(ctx.primal.mesh, q, jf)


def exact_goal_error(ctx: GoalContext, q: int) -> Optional[float]:
    """J(u) - J(u_h), or None without an exact solution."""
    problem, goal = ctx.problem, ctx.goal
    if problem.exact is None:
        return None
    if isinstance(goal, L2ErrorRep):
        return ctx.e_norm
    if isinstance(goal, DomainMean) and problem.exact_mean is not None:
        return problem.exact_mean - goal_value(ctx, ctx.primal, ctx.u_h, q)
    return goal_of_function(ctx, problem.exact.u, q) - goal_value(ctx, ctx.primal, ctx.u_h, q)
