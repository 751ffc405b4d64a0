"""Continuous Lagrange Q_p spaces on quadtree meshes.

Nodes are addressed by integer coordinates on the finest dyadic grid of the
mesh, so coincident nodes of neighboring cells merge by key.  Nodes lying
inside a coarse edge that faces two finer cells (and not on a node of the
coarse edge itself) are *hanging*: their value is the coarse-side trace,
i.e. a combination of the coarse edge's nodal values.

Field coefficients are always stored on *all* nodes, hanging ones included,
and satisfy the constraints.  ``FeSpace.T`` maps the free (non-hanging)
values to the full nodal vector.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp

from .mesh import BOUNDARY, EAST, FINER, NORTH, SOUTH, WEST, QuadMesh


# ---------------------------------------------------------------------------
# reference element and quadrature
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _lagrange_1d(p: int):
    """Coefficient arrays of the 1D Lagrange basis on ``p+1`` equispaced nodes."""
    t = np.linspace(0.0, 1.0, p + 1)
    polys = []
    for k in range(p + 1):
        others = np.delete(t, k)
        c = np.polynomial.polynomial.polyfromroots(others)
        c = c / np.polynomial.polynomial.polyval(t[k], c)
        polys.append(c)
    return t, polys


def lagrange_1d(p: int, x, deriv: int = 0) -> np.ndarray:
    """Values of the 1D basis (or its derivative) at ``x``; shape ``x.shape + (p+1,)``."""
    _, polys = _lagrange_1d(p)
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (p + 1,))
    P = np.polynomial.polynomial
    for k, c in enumerate(polys):
        out[..., k] = P.polyval(x, P.polyder(c, deriv) if deriv else c)
    return out


@dataclass(frozen=True)
class ReferenceElement:
    """Tensor-product Lagrange element of degree ``p`` on ``[0,1]^2``.

    Local index ``i = a + (p+1)*b`` is the node at ``(a/p, b/p)``.
    """

    degree: int

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError(f"degree must be >= 1, got {self.degree}")

    @property
    def n_basis(self) -> int:
        return (self.degree + 1) ** 2

    @cached_property
    def nodes(self) -> np.ndarray:
        t = np.linspace(0.0, 1.0, self.degree + 1)
        a, b = np.meshgrid(t, t, indexing="xy")
        return np.column_stack([a.ravel(), b.ravel()])

    @cached_property
    def node_index(self):
        """Integer ``(a, b)`` node coordinates for every local index."""
        n = self.degree + 1
        i = np.arange(n * n)
        return i % n, i // n

    def side_nodes(self, side: int) -> np.ndarray:
        """Local indices on ``side``, ordered by increasing coordinate."""
        p = self.degree
        r = np.arange(p + 1)
        if side == WEST:
            return r * (p + 1)
        if side == EAST:
            return r * (p + 1) + p
        if side == SOUTH:
            return r
        return p * (p + 1) + r

    def tabulate(self, pts, derivs: int = 2) -> dict:
        """Basis values/derivatives at reference points ``pts`` (..., 2).

        Keys: ``"v"``, ``"x"``, ``"y"``, and with ``derivs >= 2`` also
        ``"xx"``, ``"yy"``, ``"xy"``; each of shape ``pts.shape[:-1] + (nb,)``.
        """
        pts = np.asarray(pts, dtype=float)
        p = self.degree
        X = [lagrange_1d(p, pts[..., 0], d) for d in range(derivs + 1)]
        Y = [lagrange_1d(p, pts[..., 1], d) for d in range(derivs + 1)]
        shape = pts.shape[:-1] + (self.n_basis,)

        def outer(dx, dy):
            return (X[dx][..., None, :] * Y[dy][..., :, None]).reshape(shape)

        tab = {"v": outer(0, 0), "x": outer(1, 0), "y": outer(0, 1)}
        if derivs >= 2:
            tab.update(xx=outer(2, 0), yy=outer(0, 2), xy=outer(1, 1))
        return tab

    def shape_eval(self, i: int, xhat):
        """Value, reference gradient and Hessian of basis function ``i`` at ``xhat``."""
        if not 0 <= i < self.n_basis:
            raise ValueError(f"basis index {i} out of range for Q{self.degree}")
        t = self.tabulate(np.asarray(xhat, dtype=float)[None, :])
        grad = np.array([t["x"][0, i], t["y"][0, i]])
        hess = np.array([[t["xx"][0, i], t["xy"][0, i]], [t["xy"][0, i], t["yy"][0, i]]])
        return t["v"][0, i], grad, hess


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray


@lru_cache(maxsize=None)
def gauss_1d(q: int):
    """Gauss-Legendre points and weights on ``[0, 1]``."""
    if q < 1:
        raise ValueError(f"quadrature needs q >= 1 points, got {q}")
    x, w = np.polynomial.legendre.leggauss(q)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def make_quadrature(q: int) -> QuadratureRule:
    x, w = gauss_1d(q)
    X, Y = np.meshgrid(x, x, indexing="xy")
    W = np.outer(w, w)
    return QuadratureRule(np.column_stack([X.ravel(), Y.ravel()]), W.ravel())


def side_points(side: int, t):
    """Reference coordinates of the points with parameter ``t`` on ``side``."""
    t = np.asarray(t, dtype=float)
    zero, one = np.zeros_like(t), np.ones_like(t)
    if side == WEST:
        return np.stack([zero, t], axis=-1)
    if side == EAST:
        return np.stack([one, t], axis=-1)
    if side == SOUTH:
        return np.stack([t, zero], axis=-1)
    return np.stack([t, one], axis=-1)


# ---------------------------------------------------------------------------
# global space
# ---------------------------------------------------------------------------

class FeSpace:
    """Continuous Q_p space on a mesh, with hanging-node constraints."""

    def __init__(self, mesh: QuadMesh, degree: int):
        self.mesh = mesh
        self.degree = int(degree)
        self.element = ReferenceElement(self.degree)
        self._build()

    def _build(self):
        mesh, p, el = self.mesh, self.degree, self.element
        scale = 1 << mesh.max_level
        mult = (scale >> mesh.level)[:, None]
        a, b = el.node_index
        X = (mesh.ix[:, None] * p + a[None, :]) * mult
        Y = (mesh.iy[:, None] * p + b[None, :]) * mult
        self._grid = mesh.n * scale * p
        width = self._grid + 1
        uniq, inverse = np.unique((X * width + Y).ravel(), return_inverse=True)
        self.cell_nodes = inverse.reshape(X.shape).astype(np.int64)
        self._node_ij = np.column_stack([uniq // width, uniq % width])
        n_nodes = len(uniq)

        # hanging-node constraints from coarse-side traces
        rows, cols, vals = [], [], []
        for side in range(4):
            kind, idx = mesh.neighbors[side]
            coarse = np.flatnonzero(kind == FINER)
            if not len(coarse):
                continue
            masters = self.cell_nodes[coarse][:, el.side_nodes(side)]
            fine_side = el.side_nodes({WEST: EAST, EAST: WEST, SOUTH: NORTH, NORTH: SOUTH}[side])
            for offset in (0, 1):
                fine = idx[coarse, offset]
                fine_nodes = self.cell_nodes[fine][:, fine_side]
                for k in range(p + 1):
                    if (offset * p + k) % 2 == 0:
                        continue  # coincides with a coarse edge node
                    t = (offset + k / p) / 2.0
                    coef = lagrange_1d(p, np.array(t))
                    keep = np.abs(coef) > 1e-14
                    rows.append(np.repeat(fine_nodes[:, k], keep.sum()))
                    cols.append(masters[:, keep].ravel())
                    vals.append(np.tile(coef[keep], len(coarse)))
        if rows:
            rows = np.concatenate(rows)
            cols = np.concatenate(cols)
            vals = np.concatenate(vals)
            # a hanging node shared by both fine cells appears twice
            key = rows * n_nodes + cols
            _, first = np.unique(key, return_index=True)
            rows, cols, vals = rows[first], cols[first], vals[first]
        else:
            rows = cols = np.empty(0, dtype=np.int64)
            vals = np.empty(0)
        hanging = np.zeros(n_nodes, dtype=bool)
        hanging[rows] = True
        self.hanging = hanging
        free = np.flatnonzero(~hanging)
        H = sp.csr_matrix(
            (np.concatenate([np.ones(len(free)), vals]),
             (np.concatenate([free, rows]), np.concatenate([free, cols]))),
            shape=(n_nodes, n_nodes),
        )
        T = H
        # masters may themselves hang from a coarser edge: resolve chains
        for _ in range(64):
            if T[:, np.flatnonzero(hanging)].nnz == 0:
                break
            T = (T @ H).tocsr()
            T.eliminate_zeros()
        else:
            raise RuntimeError("hanging-node constraints do not resolve")
        self.free = free
        self.T = T[:, free].tocsr()
        self.T.sum_duplicates()

    # -- sizes and node data ------------------------------------------

    @property
    def n_dofs(self) -> int:
        """All Lagrange nodes, hanging ones included."""
        return self.cell_nodes.max() + 1 if self.cell_nodes.size else 0

    @property
    def n_free(self) -> int:
        return len(self.free)

    @cached_property
    def node_coords(self) -> np.ndarray:
        xmin, xmax, ymin, ymax = self.mesh.domain
        ij = self._node_ij
        return np.column_stack([xmin + ij[:, 0] * (xmax - xmin) / self._grid,
                                ymin + ij[:, 1] * (ymax - ymin) / self._grid])

    @cached_property
    def boundary_nodes(self) -> dict:
        """Node indices on each domain side (corners belong to two sides)."""
        i, j = self._node_ij[:, 0], self._node_ij[:, 1]
        g = self._grid
        return {WEST: np.flatnonzero(i == 0), EAST: np.flatnonzero(i == g),
                SOUTH: np.flatnonzero(j == 0), NORTH: np.flatnonzero(j == g)}

    def constrain(self, values: np.ndarray) -> np.ndarray:
        """Overwrite hanging values with their constrained combination."""
        values = np.asarray(values, dtype=float)
        return self.T @ values[self.free]

    def interpolate_function(self, fn) -> np.ndarray:
        """Nodal interpolant of ``fn(x, y)``."""
        xy = self.node_coords
        return self.constrain(np.asarray(fn(xy[:, 0], xy[:, 1]), dtype=float) * np.ones(len(xy)))

    # -- evaluation ---------------------------------------------------

    def local(self, coeffs, cells=None) -> np.ndarray:
        coeffs = np.asarray(coeffs)
        idx = self.cell_nodes if cells is None else self.cell_nodes[cells]
        return coeffs[idx]

    def evaluate(self, coeffs, cells, xhat, derivs: int = 1) -> dict:
        """Evaluate a field at per-cell reference points.

        ``cells`` has shape ``(m,)`` and ``xhat`` either ``(nq, 2)`` (same
        points in every cell) or ``(m, nq, 2)``.  Returns physical ``"v"``,
        ``"x"``, ``"y"`` (and ``"xx"``, ``"yy"``, ``"xy"``, ``"lap"`` when
        ``derivs >= 2``), each of shape ``(m, nq)``.
        """
        cells = np.asarray(cells, dtype=np.int64)
        U = self.local(coeffs, cells)
        tab = self.element.tabulate(xhat, derivs=max(derivs, 1))
        _, _, hx, hy = self.mesh.geometry
        hx = hx[cells][:, None]
        hy = hy[cells][:, None]
        shared = np.ndim(xhat) == 2

        def contract(t):
            if shared:
                return U @ t.T
            return np.einsum("mqi,mi->mq", t, U)

        out = {"v": contract(tab["v"]), "x": contract(tab["x"]) / hx,
               "y": contract(tab["y"]) / hy}
        if derivs >= 2:
            out["xx"] = contract(tab["xx"]) / hx**2
            out["yy"] = contract(tab["yy"]) / hy**2
            out["xy"] = contract(tab["xy"]) / (hx * hy)
            out["lap"] = out["xx"] + out["yy"]
        return out

    def evaluate_field(self, coeffs, cell: int, xhat):
        """Value, physical gradient and Hessian at one reference point."""
        r = self.evaluate(coeffs, np.array([cell]), np.asarray(xhat, dtype=float)[None, :], 2)
        grad = np.array([r["x"][0, 0], r["y"][0, 0]])
        hess = np.array([[r["xx"][0, 0], r["xy"][0, 0]], [r["xy"][0, 0], r["yy"][0, 0]]])
        return r["v"][0, 0], grad, hess

    def locate(self, pts):
        """Active cell and reference coordinates of physical points ``(m, 2)``."""
        pts = np.asarray(pts, dtype=float)
        mesh = self.mesh
        xmin, xmax, ymin, ymax = mesh.domain
        lmax = mesh.max_level
        m = mesh.n << lmax
        gi = np.clip(((pts[:, 0] - xmin) / (xmax - xmin) * m).astype(np.int64), 0, m - 1)
        gj = np.clip(((pts[:, 1] - ymin) / (ymax - ymin) * m).astype(np.int64), 0, m - 1)
        cells = mesh.find_leaf(np.full(len(pts), lmax), gi, gj)
        x0, y0, hx, hy = mesh.geometry
        xhat = np.column_stack([(pts[:, 0] - x0[cells]) / hx[cells],
                                (pts[:, 1] - y0[cells]) / hy[cells]])
        return cells, xhat

    def __repr__(self) -> str:
        return f"FeSpace(Q{self.degree}, cells={len(self.mesh)}, dofs={self.n_dofs})"


def build_space(mesh: QuadMesh, degree: int) -> FeSpace:
    return FeSpace(mesh, degree)


def interpolate(source: FeSpace, coeffs, target: FeSpace) -> np.ndarray:
    """Nodal interpolation of a field from ``source`` into ``target``.

    Both spaces must live on the same mesh.  Embedding into a higher degree
    reproduces the field exactly; restriction to a lower degree is lossy.
    """
    if source.mesh is not target.mesh and not np.array_equal(source.mesh.keys, target.mesh.keys):
        raise ValueError("interpolation requires both spaces on the same mesh")
    tab = source.element.tabulate(target.element.nodes, derivs=1)["v"]
    local = source.local(coeffs) @ tab.T
    values = np.empty(target.n_dofs)
    values[target.cell_nodes.ravel()] = local.ravel()
    return target.constrain(values)


def interpolation_matrix(source: FeSpace, target: FeSpace) -> sp.csr_matrix:
    """Sparse matrix ``P`` with ``interpolate(source, u, target) == P @ u``."""
    tab = source.element.tabulate(target.element.nodes, derivs=1)["v"]
    nt, ns = tab.shape
    ncell = len(source.mesh)
    # one representative cell per target node keeps entries unsummed
    rep = np.full(target.n_dofs, -1, dtype=np.int64)
    rep_loc = np.zeros(target.n_dofs, dtype=np.int64)
    flat = target.cell_nodes.ravel()
    cell_of = np.repeat(np.arange(ncell), nt)
    loc_of = np.tile(np.arange(nt), ncell)
    rep[flat] = cell_of
    rep_loc[flat] = loc_of
    rows = np.repeat(np.arange(target.n_dofs), ns)
    cols = source.cell_nodes[rep].ravel()
    vals = tab[rep_loc].ravel()
    P = sp.csr_matrix((vals, (rows, cols)), shape=(target.n_dofs, source.n_dofs))
    return (target.T @ P[target.free]).tocsr()
