"""SUPG-stabilized assembly of the primal and dual systems, and the solve.

Both problems share one kernel: with ``sign = +1`` it assembles

    (eps grad u, grad v) + (b.grad u, v) + (alpha u, v)
        + sum_K delta_K (-eps Lap u + b.grad u + alpha u, b.grad v)_K

and with ``sign = -1`` the adjoint operator with reversed convection, whose
stabilization also tests against ``-b.grad v``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fespace import FeSpace, make_quadrature
from .problem import Dirichlet, ProblemSpec, dual_rhs_density

log = logging.getLogger(__name__)

_CHUNK_ENTRIES = 2_000_000


class SolverError(RuntimeError):
    """Raised when the sparse factorization fails."""


def default_quadrature(degree: int) -> int:
    return degree + 2


def cell_points(mesh, q: int, cells=None):
    """Reference rule and physical points/weights ``(rule, X, Y, W)``."""
    rule = make_quadrature(q)
    x0, y0, hx, hy = mesh.geometry
    if cells is not None:
        x0, y0, hx, hy = x0[cells], y0[cells], hx[cells], hy[cells]
    X = x0[:, None] + hx[:, None] * rule.points[None, :, 0]
    Y = y0[:, None] + hy[:, None] * rule.points[None, :, 1]
    W = (hx * hy)[:, None] * rule.weights[None, :]
    return rule, X, Y, W


def delta_param(h, degree: int, bnorm, epsilon: float, alpha_max, delta0: float = 1.0):
    """SUPG parameter ``delta0 * min(h/(p|b|), h^2/(p^4 eps), 1/alpha)``.

    Terms whose denominator vanishes are dropped; with all of them dropped
    the result is 0.
    """
    h = np.asarray(h, dtype=float)
    bnorm = np.broadcast_to(np.asarray(bnorm, dtype=float), h.shape)
    alpha_max = np.broadcast_to(np.asarray(alpha_max, dtype=float), h.shape)
    terms = [h**2 / (degree**4 * epsilon)]
    with np.errstate(divide="ignore"):
        terms.append(np.where(bnorm > 0, h / (degree * bnorm), np.inf))
        terms.append(np.where(alpha_max > 0, 1.0 / alpha_max, np.inf))
    out = delta0 * np.minimum.reduce(terms)
    return np.where(np.isfinite(out), out, 0.0)


def stabilization(mesh, problem: ProblemSpec, degree: int, delta0: float = 1.0,
                  q: Optional[int] = None) -> np.ndarray:
    """Per-cell delta_K for a space of the given degree.

    |b| on a cell is the largest Euclidean norm over the quadrature points.
    """
    _, X, Y, _ = cell_points(mesh, q or default_quadrature(degree))
    bx, by = problem.b(X, Y)
    bnorm = np.max(np.hypot(bx, by), axis=1)
    amax = np.max(problem.alpha(X, Y), axis=1)
    return delta_param(mesh.diameters, degree, bnorm, problem.epsilon, amax, delta0)


@dataclass
class NodalForms:
    """Unconstrained (node-level) pieces of a stabilized system."""

    galerkin: sp.csr_matrix
    supg: sp.csr_matrix
    load: np.ndarray
    supg_load: np.ndarray


def assemble_forms(trial: FeSpace, test: FeSpace, problem: ProblemSpec, sign: int,
                   delta: np.ndarray, q: int, density=None, split: bool = False):
    """Node-level matrix/vector of the (stabilized) forms.

    ``density(cells, xhat, X, Y)`` gives the right-hand side at quadrature
    points; ``None`` means the problem's source f.  Entry ``[i, j]`` is the
    form with trial function j and test function i.  With ``split`` the
    Galerkin and SUPG parts are returned separately as :class:`NodalForms`.
    """
    mesh = trial.mesh
    rule = make_quadrature(q)
    tT = trial.element.tabulate(rule.points)
    tS = test.element.tabulate(rule.points)
    nbT, nbS, nq = trial.element.n_basis, test.element.n_basis, len(rule.weights)
    _, _, HX, HY = mesh.geometry
    eps = problem.epsilon
    ncell = len(mesh)
    chunk = max(1, _CHUNK_ENTRIES // (nq * max(nbT, nbS)))
    # pure reference integrals of the diffusion term
    Rxx = tS["x"].T @ (rule.weights[:, None] * tT["x"])
    Ryy = tS["y"].T @ (rule.weights[:, None] * tT["y"])

    mats = {"galerkin": [], "supg": []}
    loads = {"load": np.zeros(test.n_dofs), "supg_load": np.zeros(test.n_dofs)}
    for start in range(0, ncell, chunk):
        c = np.arange(start, min(start + chunk, ncell))
        hx, hy = HX[c][:, None, None], HY[c][:, None, None]
        _, X, Y, W = cell_points(mesh, q, c)
        bx, by = problem.b(X, Y)
        alpha = problem.alpha(X, Y)
        g = problem.f(X, Y) if density is None else density(c, rule.points, X, Y)
        g = np.broadcast_to(g, X.shape)

        convT = sign * (bx[..., None] * tT["x"] / hx + by[..., None] * tT["y"] / hy)
        convS = sign * (bx[..., None] * tS["x"] / hx + by[..., None] * tS["y"] / hy)
        vT = np.broadcast_to(tT["v"], (len(c), nq, nbT))
        vS = tS["v"]
        Wn = W[..., None]

        area = (HX[c] * HY[c])[:, None, None]
        diff = eps * area * (Rxx / hx**2 + Ryy / hy**2)
        lower = Wn * (convT + alpha[..., None] * vT)
        gal = diff + np.einsum("qi,cqj->cij", vS, lower, optimize=True)
        lapT = tT["xx"] / hx**2 + tT["yy"] / hy**2
        strong = -eps * lapT + convT + alpha[..., None] * vT
        d = delta[c][:, None, None]
        supg = np.matmul(np.swapaxes(convS, 1, 2), d * Wn * strong)

        Wg = W * g
        nodes = test.cell_nodes[c]
        np.add.at(loads["load"], nodes.ravel(), (Wg @ vS).ravel())
        supg_rhs = np.einsum("cq,cqi->ci", delta[c][:, None] * Wg, convS)
        np.add.at(loads["supg_load"], nodes.ravel(), supg_rhs.ravel())

        rows = np.broadcast_to(nodes[:, :, None], (len(c), nbS, nbT)).ravel()
        cols = np.broadcast_to(trial.cell_nodes[c][:, None, :], (len(c), nbS, nbT)).ravel()
        if split:
            mats["galerkin"].append((gal.ravel(), rows, cols))
            mats["supg"].append((supg.ravel(), rows, cols))
        else:
            mats["galerkin"].append(((gal + supg).ravel(), rows, cols))

    def build(parts):
        vals = np.concatenate([p[0] for p in parts])
        rows = np.concatenate([p[1] for p in parts])
        cols = np.concatenate([p[2] for p in parts])
        return sp.csr_matrix((vals, (rows, cols)), shape=(test.n_dofs, trial.n_dofs))

    if split:
        return NodalForms(build(mats["galerkin"]), build(mats["supg"]),
                          loads["load"], loads["supg_load"])
    return build(mats["galerkin"]), loads["load"] + loads["supg_load"]


@dataclass
class SparseSystem:
    """Constrained system over the free (non-hanging) dofs of ``space``.

    Dirichlet dofs are listed in free numbering with their values and are
    eliminated in :func:`solve`.
    """

    space: FeSpace
    matrix: sp.csr_matrix
    rhs: np.ndarray
    dirichlet_dofs: np.ndarray
    dirichlet_values: np.ndarray
    delta: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def unknowns(self) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[self.dirichlet_dofs] = False
        return np.flatnonzero(mask)


def dirichlet_data(space: FeSpace, problem: ProblemSpec, homogeneous: bool = False):
    """Free-numbered Dirichlet dofs and nodal values of g_D."""
    nodes, values = [], []
    xy = space.node_coords
    for side, bc in sorted(problem.boundary.items()):
        if not isinstance(bc, Dirichlet):
            continue
        nd = space.boundary_nodes[side]
        nodes.append(nd)
        values.append(np.zeros(len(nd)) if homogeneous
                      else np.broadcast_to(bc.g(xy[nd, 0], xy[nd, 1]), nd.shape))
    if not nodes:
        return np.empty(0, dtype=np.int64), np.empty(0)
    nodes = np.concatenate(nodes)
    values = np.concatenate(values).astype(float)
    nodes, first = np.unique(nodes, return_index=True)
    values = values[first]
    free_index = np.full(space.n_dofs, -1, dtype=np.int64)
    free_index[space.free] = np.arange(space.n_free)
    dofs = free_index[nodes]
    if np.any(dofs < 0):
        raise AssertionError("a boundary node is constrained")
    return dofs, values


def _constrain(space: FeSpace, A, b, problem, homogeneous, delta) -> SparseSystem:
    T = space.T
    Af = (T.T @ A @ T).tocsr()
    bf = T.T @ b
    dofs, vals = dirichlet_data(space, problem, homogeneous)
    return SparseSystem(space, Af, bf, dofs, vals, delta)


def assemble_primal(space: FeSpace, problem: ProblemSpec, delta0: float = 1.0,
                    q: Optional[int] = None, stabilize: bool = True) -> SparseSystem:
    """Primal SUPG system on ``space`` with nodal Dirichlet data."""
    q = q or default_quadrature(space.degree)
    delta = stabilization(space.mesh, problem, space.degree, delta0, q) if stabilize \
        else np.zeros(len(space.mesh))
    A, b = assemble_forms(space, space, problem, +1, delta, q)
    return _constrain(space, A, b, problem, False, delta)


def assemble_dual(space: FeSpace, problem: ProblemSpec, ctx, delta0: float = 1.0,
                  q: Optional[int] = None, stabilize: bool = True) -> SparseSystem:
    """Dual SUPG system (reversed convection) with homogeneous Dirichlet data.

    ``ctx`` is the frozen :class:`~supg_dwr.problem.GoalContext`; its density
    is the right-hand side.
    """
    q = q or default_quadrature(space.degree)
    delta = stabilization(space.mesh, problem, space.degree, delta0, q) if stabilize \
        else np.zeros(len(space.mesh))

    def density(cells, xhat, X, Y):
        return dual_rhs_density(ctx, cells, xhat, X, Y)

    A, b = assemble_forms(space, space, problem, -1, delta, q, density=density)
    return _constrain(space, A, b, problem, True, delta)


def solve(system: SparseSystem, rtol: float = 1e-10) -> np.ndarray:
    """Direct sparse solve; returns nodal coefficients on all nodes."""
    U = system.unknowns()
    D = system.dirichlet_dofs
    x = np.zeros(system.n)
    x[D] = system.dirichlet_values
    A = system.matrix
    rhs = system.rhs - A @ x
    if len(U):
        Auu = A[U][:, U].tocsc()
        bu = rhs[U]
        try:
            lu = spla.splu(Auu, permc_spec="COLAMD")
        except RuntimeError as exc:
            empty = np.flatnonzero(np.diff(Auu.indptr) == 0)
            raise SolverError(
                f"sparse factorization failed ({exc}); n={len(U)}, "
                f"empty columns at free dofs {U[empty[:10]].tolist()}"
            ) from exc
        xu = lu.solve(bu)
        del lu
        nb = np.linalg.norm(bu)
        res = np.linalg.norm(Auu @ xu - bu)
        if not np.all(np.isfinite(xu)) or (nb > 0 and res > rtol * nb) or (nb == 0 and res > rtol):
            raise SolverError(f"solve residual {res:.3e} exceeds tolerance (|b|={nb:.3e})")
        x[U] = xu
    return system.space.T @ x


def dump_matrix(system: SparseSystem, path) -> None:
    scipy.io.mmwrite(str(path), system.matrix)
