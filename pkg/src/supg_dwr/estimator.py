"""Cell-wise dual weighted residual indicators for the SUPG discretization.

For a primal solution u_h in Q_p and a dual solution z_h in Q_{p+s} the
indicator of cell K is

    eta_K = (R(u_h), z_h - I z_h)_K - delta_K (R(u_h), b.grad I z_h)_K
            - (E(u_h), z_h - I z_h)_{dK}

with R = f + eps Lap u_h - b.grad u_h - alpha u_h, E the half normal jump of
eps grad u_h on interior edges (0 on the boundary) and I the nodal
restriction to Q_p.  The embedding of u_h into Q_{p+s} is exact, so residuals
are evaluated from the primal representation directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .assembly import assemble_forms, cell_points, stabilization
from .fespace import FeSpace, gauss_1d, interpolate
from .problem import Dirichlet, ProblemSpec


@dataclass
class ErrorIndicators:
    eta_K: np.ndarray
    n_dofs_primal: int
    n_dofs_dual: int
    exact_error: Optional[float] = None
    parts: dict = field(default_factory=dict)

    def __post_init__(self):
        self.eta_K = np.asarray(self.eta_K, dtype=float)
        self.total = float(np.sum(self.eta_K))
        self.eta_max = float(np.max(np.abs(self.eta_K))) if self.eta_K.size else 0.0

    @property
    def abs_sum(self) -> float:
        return float(np.sum(np.abs(self.eta_K)))


def cell_residual(space: FeSpace, u, problem: ProblemSpec, cells, xhat) -> np.ndarray:
    """Strong residual ``f + eps Lap u - b.grad u - alpha u`` at reference points."""
    cells = np.asarray(cells, dtype=np.int64)
    mesh = space.mesh
    x0, y0, hx, hy = mesh.geometry
    xhat = np.asarray(xhat, dtype=float)
    if xhat.ndim == 2:
        X = x0[cells][:, None] + hx[cells][:, None] * xhat[None, :, 0]
        Y = y0[cells][:, None] + hy[cells][:, None] * xhat[None, :, 1]
    else:
        X = x0[cells][:, None] + hx[cells][:, None] * xhat[..., 0]
        Y = y0[cells][:, None] + hy[cells][:, None] * xhat[..., 1]
    ev = space.evaluate(u, cells, xhat, derivs=2)
    bx, by = problem.b(X, Y)
    return (problem.f(X, Y) + problem.epsilon * ev["lap"]
            - bx * ev["x"] - by * ev["y"] - problem.alpha(X, Y) * ev["v"])


def _reference_coords(mesh, cells, pts):
    x0, y0, hx, hy = mesh.geometry
    return np.stack([(pts[..., 0] - x0[cells][:, None]) / hx[cells][:, None],
                     (pts[..., 1] - y0[cells][:, None]) / hy[cells][:, None]], axis=-1)


def _edge_points(start, end, q):
    t, w = gauss_1d(q)
    pts = start[:, None, :] + t[None, :, None] * (end - start)[:, None, :]
    length = np.linalg.norm(end - start, axis=1)
    return pts, length[:, None] * w[None, :]


def edge_jump(space: FeSpace, u, problem: ProblemSpec, q: int):
    """Half normal jump ``1/2 n.[eps grad u]`` on every interior (sub-)edge.

    Returns ``(edges, E, pts, weights)`` with ``E`` of shape ``(n_edges, q)``
    evaluated at Gauss points; the jump is ``cell`` side minus ``other``
    side and ``n`` points from ``cell`` to ``other``.
    """
    mesh = space.mesh
    edges = mesh.interior_edges
    pts, wts = _edge_points(edges.start, edges.end, q)
    gk = space.evaluate(u, edges.cell, _reference_coords(mesh, edges.cell, pts))
    go = space.evaluate(u, edges.other, _reference_coords(mesh, edges.other, pts))
    n = edges.normal
    jump = n[:, 0:1] * (gk["x"] - go["x"]) + n[:, 1:2] * (gk["y"] - go["y"])
    return edges, 0.5 * problem.epsilon * jump, pts, wts


def boundary_correction(primal: FeSpace, u_h, dual: FeSpace, z_h, problem: ProblemSpec,
                        q: int) -> np.ndarray:
    """Per-cell share of ``-((g_D - g_Dh), eps grad z_h . n)`` on Dirichlet sides."""
    mesh = primal.mesh
    out = np.zeros(len(mesh))
    be = mesh.boundary_edges
    for side, bc in sorted(problem.boundary.items()):
        if not isinstance(bc, Dirichlet) or getattr(bc.g, "is_zero", False):
            continue
        sel = be.side == side
        cells = be.cell[sel]
        pts, wts = _edge_points(be.start[sel], be.end[sel], q)
        ref = _reference_coords(mesh, cells, pts)
        gh = primal.evaluate(u_h, cells, ref)["v"]
        gz = dual.evaluate(z_h, cells, ref)
        n = be.normal[sel]
        flux = problem.epsilon * (n[:, 0:1] * gz["x"] + n[:, 1:2] * gz["y"])
        g = bc.g(pts[..., 0], pts[..., 1])
        np.add.at(out, cells, -np.sum(wts * (g - gh) * flux, axis=1))
    return out


def _residual_parts(primal: FeSpace, u_h, space: FeSpace, w, problem: ProblemSpec, q: int):
    """Per-cell ``(R(u_h), w)_K`` and ``-(E(u_h), w)_dK`` for ``w`` in ``space``."""
    mesh = primal.mesh
    if space.mesh is not mesh and not np.array_equal(space.mesh.keys, mesh.keys):
        raise ValueError("primal and weight spaces must share the mesh")
    ncell = len(mesh)
    cells = np.arange(ncell)
    rule, X, Y, W = cell_points(mesh, q)
    R = cell_residual(primal, u_h, problem, cells, rule.points)
    cell = np.sum(W * R * space.evaluate(w, cells, rule.points)["v"], axis=1)

    edges, E, pts, wts = edge_jump(primal, u_h, problem, q)
    edge = np.zeros(ncell)
    # both neighbours see the same value of E(u_h) on their own side
    for side_cells in (edges.cell, edges.other):
        wv = space.evaluate(w, side_cells, _reference_coords(mesh, side_cells, pts))["v"]
        np.add.at(edge, side_cells, -np.sum(wts * E * wv, axis=1))
    return cell, edge


def weighted_residual(primal: FeSpace, u_h, space: FeSpace, w, problem: ProblemSpec,
                      q: int) -> np.ndarray:
    """Per-cell ``(R(u_h), w)_K - (E(u_h), w)_dK`` for ``w`` in ``space``."""
    cell, edge = _residual_parts(primal, u_h, space, w, problem, q)
    return cell + edge


def indicators(primal: FeSpace, u_h, dual: FeSpace, z_h, problem: ProblemSpec,
               delta: Optional[np.ndarray] = None, delta0: float = 1.0,
               q: Optional[int] = None) -> ErrorIndicators:
    """Signed DWR indicators on every active cell."""
    mesh = primal.mesh
    if dual.mesh is not mesh and not np.array_equal(dual.mesh.keys, mesh.keys):
        raise ValueError("primal and dual spaces must share the mesh")
    q = q or dual.degree + 2
    if delta is None:
        delta = stabilization(mesh, problem, primal.degree, delta0, q)
    Iz = interpolate(dual, z_h, primal)
    weight = z_h - interpolate(primal, Iz, dual)
    cell_part, edge_part = _residual_parts(primal, u_h, dual, weight, problem, q)

    rule, X, Y, W = cell_points(mesh, q)
    cells = np.arange(len(mesh))
    R = cell_residual(primal, u_h, problem, cells, rule.points)
    iz = primal.evaluate(Iz, cells, rule.points)
    bx, by = problem.b(X, Y)
    stab_part = -delta * np.sum(W * R * (bx * iz["x"] + by * iz["y"]), axis=1)

    bnd_part = boundary_correction(primal, u_h, dual, z_h, problem, q)
    eta = cell_part + stab_part + edge_part + bnd_part
    return ErrorIndicators(
        eta, primal.n_dofs, dual.n_dofs,
        parts={"cell": cell_part, "stabilization": stab_part, "edge": edge_part,
               "boundary": bnd_part, "delta": delta},
    )


def global_form_estimate(primal: FeSpace, u_h, dual: FeSpace, z_h, problem: ProblemSpec,
                         delta: np.ndarray, q: int) -> float:
    """rho(u_h)(z_h - I z_h) + S(u_h)(I z_h) + boundary term, from global matrices.

    Used to cross-check :func:`indicators`: no integration by parts, no edges.
    """
    Iz = interpolate(dual, z_h, primal)
    w = z_h - interpolate(primal, Iz, dual)
    mixed = assemble_forms(primal, dual, problem, +1, np.zeros(len(primal.mesh)), q, split=True)
    rho = float(w @ (mixed.load - mixed.galerkin @ u_h))
    own = assemble_forms(primal, primal, problem, +1, delta, q, split=True)
    stab = float(Iz @ (own.supg @ u_h - own.supg_load))
    bnd = float(np.sum(boundary_correction(primal, u_h, dual, z_h, problem, q)))
    return rho + stab + bnd


def effectivity(ind: ErrorIndicators, exact_error: Optional[float]) -> Optional[float]:
    """``|eta / (J(u) - J(u_h))|``; None when the exact error is absent or zero."""
    if exact_error is None or exact_error == 0.0:
        return None
    return abs(ind.total / exact_error)
