"""Adaptive quadtree meshes of axis-aligned rectangles.

Cells live on a dyadic grid: the initial ``n x n`` roots are level 0 and a
cell ``(level, i, j)`` covers ``[i, i+1] x [j, j+1]`` in units of the level's
cell size.  A cell is identified by an integer key that packs the triple, so
ids are stable across remeshing and parents/children are computed, not stored.

Side numbering used throughout the package::

        3 (north)
      +-----+
    0 |     | 1
      +-----+
        2 (south)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, NamedTuple

import numpy as np

_LEVEL_SHIFT = 52
_I_SHIFT = 26
_MASK = (1 << _I_SHIFT) - 1

WEST, EAST, SOUTH, NORTH = 0, 1, 2, 3

# neighbor kinds
BOUNDARY, SAME, COARSER, FINER = -1, 0, 1, 2

_SIDE_OFFSET = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]], dtype=np.int64)
_OPPOSITE = np.array([EAST, WEST, NORTH, SOUTH])
_OUTWARD_NORMAL = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]])


def encode(level, i, j):
    level = np.asarray(level, dtype=np.int64)
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    return (level << _LEVEL_SHIFT) | (i << _I_SHIFT) | j


def decode(keys):
    keys = np.asarray(keys, dtype=np.int64)
    return keys >> _LEVEL_SHIFT, (keys >> _I_SHIFT) & _MASK, keys & _MASK


def parent_keys(keys):
    level, i, j = decode(keys)
    if np.any(level == 0):
        raise ValueError("root cells have no parent")
    return encode(level - 1, i >> 1, j >> 1)


def children_keys(keys):
    """Children of each key, shape ``(len(keys), 4)``, ordered SW, SE, NW, NE."""
    level, i, j = decode(np.atleast_1d(keys))
    di = np.array([0, 1, 0, 1])
    dj = np.array([0, 0, 1, 1])
    return encode((level + 1)[:, None], (2 * i)[:, None] + di, (2 * j)[:, None] + dj)


class MarkSet(NamedTuple):
    """Cell ids flagged for refinement and for coarsening."""

    refine: frozenset
    coarsen: frozenset

    @classmethod
    def of(cls, refine: Iterable = (), coarsen: Iterable = ()) -> "MarkSet":
        r = frozenset(int(k) for k in refine)
        c = frozenset(int(k) for k in coarsen) - r
        return cls(r, c)


@dataclass
class ChangeLog:
    """What ``refine_and_coarsen`` actually did (ids are cell keys)."""

    refined: list = field(default_factory=list)
    closure: list = field(default_factory=list)
    coarsened: list = field(default_factory=list)
    dropped_coarsen: list = field(default_factory=list)

    @property
    def n_refined(self) -> int:
        return len(self.refined) + len(self.closure)

    @property
    def n_coarsened(self) -> int:
        return len(self.coarsened)


class Edges(NamedTuple):
    """Interior interfaces, one row per (sub-)edge.

    ``cell``/``other`` are active indices; ``side`` is the side of ``cell`` the
    edge lies on, so the unit normal from ``cell`` to ``other`` is
    ``normal[side]``.  ``start``/``end`` are the physical endpoints.
    """

    cell: np.ndarray
    other: np.ndarray
    side: np.ndarray
    start: np.ndarray
    end: np.ndarray

    @property
    def normal(self) -> np.ndarray:
        return _OUTWARD_NORMAL[self.side]

    @property
    def length(self) -> np.ndarray:
        return np.linalg.norm(self.end - self.start, axis=1)

    def __len__(self) -> int:
        return len(self.cell)


class BoundaryEdges(NamedTuple):
    cell: np.ndarray
    side: np.ndarray  # doubles as the boundary tag
    start: np.ndarray
    end: np.ndarray

    @property
    def normal(self) -> np.ndarray:
        return _OUTWARD_NORMAL[self.side]

    def __len__(self) -> int:
        return len(self.cell)


class QuadMesh:
    """Immutable 1-irregular quadtree mesh of a rectangle.

    Parameters
    ----------
    domain : (xmin, xmax, ymin, ymax)
    n : number of root cells per axis
    keys : sorted int64 keys of the active cells
    """

    def __init__(self, domain, n: int, keys: np.ndarray):
        self.domain = tuple(float(v) for v in domain)
        self.n = int(n)
        keys = np.asarray(keys, dtype=np.int64)
        self.keys = np.sort(keys)
        self.keys.setflags(write=False)
        self.level, self.ix, self.iy = decode(self.keys)

    # -- construction -------------------------------------------------

    @classmethod
    def uniform(cls, domain=(0.0, 1.0, 0.0, 1.0), n: int = 1) -> "QuadMesh":
        xmin, xmax, ymin, ymax = domain
        if n < 1:
            raise ValueError(f"cells per axis must be >= 1, got {n}")
        if not (xmax > xmin and ymax > ymin):
            raise ValueError(f"degenerate domain {domain}")
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        return cls(domain, n, encode(0, i.ravel(), j.ravel()))

    # -- basic geometry -----------------------------------------------

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def n_active(self) -> int:
        return len(self.keys)

    @property
    def max_level(self) -> int:
        return int(self.level.max()) if len(self.keys) else 0

    def cell_size(self, level):
        xmin, xmax, ymin, ymax = self.domain
        scale = 1.0 / (self.n * np.power(2.0, level))
        return (xmax - xmin) * scale, (ymax - ymin) * scale

    @cached_property
    def geometry(self):
        """Arrays ``(x0, y0, hx, hy)`` of lower-left corners and sizes."""
        hx, hy = self.cell_size(self.level)
        x0 = self.domain[0] + self.ix * hx
        y0 = self.domain[2] + self.iy * hy
        return x0, y0, hx, hy

    @property
    def diameters(self) -> np.ndarray:
        _, _, hx, hy = self.geometry
        return np.hypot(hx, hy)

    @property
    def areas(self) -> np.ndarray:
        _, _, hx, hy = self.geometry
        return hx * hy

    @property
    def domain_area(self) -> float:
        xmin, xmax, ymin, ymax = self.domain
        return (xmax - xmin) * (ymax - ymin)

    def index_of(self, keys) -> np.ndarray:
        """Active index of each key, or -1 for keys that are not active."""
        keys = np.asarray(keys, dtype=np.int64)
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        return np.where(self.keys[pos] == keys, pos, -1)

    def is_active(self, keys) -> np.ndarray:
        return self.index_of(keys) >= 0

    # -- tree queries -------------------------------------------------

    def find_leaf(self, level, i, j):
        """Active cell covering grid cell ``(level, i, j)`` at a level <= ``level``.

        Returns the active index, or -1 where the region is refined further.
        """
        return _find_leaf(self.keys, level, i, j)

    def _in_domain(self, level, i, j):
        m = self.n << np.asarray(level, dtype=np.int64)
        return (i >= 0) & (j >= 0) & (i < m) & (j < m)

    @cached_property
    def neighbors(self):
        """Per side: ``(kind, idx)`` with ``idx`` of shape ``(N, 2)``.

        For FINER neighbors both columns are set, ordered by increasing
        coordinate along the side; otherwise the second column is -1.
        """
        out = []
        for side in range(4):
            di, dj = _SIDE_OFFSET[side]
            ni, nj = self.ix + di, self.iy + dj
            inside = self._in_domain(self.level, ni, nj)
            kind = np.full(len(self), BOUNDARY, dtype=np.int8)
            idx = np.full((len(self), 2), -1, dtype=np.int64)
            leaf = np.full(len(self), -1, dtype=np.int64)
            leaf[inside] = self.find_leaf(self.level[inside], ni[inside], nj[inside])
            found = inside & (leaf >= 0)
            same = found & (self.level[np.maximum(leaf, 0)] == self.level)
            kind[same] = SAME
            kind[found & ~same] = COARSER
            idx[found, 0] = leaf[found]
            finer = inside & (leaf < 0)
            if np.any(finer):
                f = np.flatnonzero(finer)
                ci, cj = 2 * ni[f], 2 * nj[f]
                # children of the neighbor that touch this side
                if side == WEST:
                    a = (ci + 1, cj), (ci + 1, cj + 1)
                elif side == EAST:
                    a = (ci, cj), (ci, cj + 1)
                elif side == SOUTH:
                    a = (ci, cj + 1), (ci + 1, cj + 1)
                else:
                    a = (ci, cj), (ci + 1, cj)
                lev = self.level[f] + 1
                k0 = self.index_of(encode(lev, *a[0]))
                k1 = self.index_of(encode(lev, *a[1]))
                if np.any(k0 < 0) or np.any(k1 < 0):
                    raise ValueError("mesh is not 1-irregular")
                kind[f] = FINER
                idx[f, 0] = k0
                idx[f, 1] = k1
            out.append((kind, idx))
        return out

    def is_one_irregular(self) -> bool:
        return len(_irregular_leaves(self.keys, self.n, self.level, self.ix, self.iy)) == 0

    # -- vertices -----------------------------------------------------

    def _integer_scale(self) -> int:
        return 1 << self.max_level

    @cached_property
    def vertex_table(self):
        """``(coords, cell_vertices)`` with deduplicated vertex coordinates.

        ``cell_vertices`` lists the corners of every active cell in the order
        SW, SE, NW, NE.
        """
        scale = self._integer_scale()
        mult = scale >> self.level
        corners = []
        for a, b in ((0, 0), (1, 0), (0, 1), (1, 1)):
            corners.append(((self.ix + a) * mult, (self.iy + b) * mult))
        X = np.stack([c[0] for c in corners], axis=1)
        Y = np.stack([c[1] for c in corners], axis=1)
        width = self.n * scale + 1
        uniq, inverse = np.unique((X * width + Y).ravel(), return_inverse=True)
        xmin, xmax, ymin, ymax = self.domain
        gx = uniq // width
        gy = uniq % width
        coords = np.column_stack(
            [xmin + gx * (xmax - xmin) / (self.n * scale),
             ymin + gy * (ymax - ymin) / (self.n * scale)]
        )
        return coords, inverse.reshape(-1, 4)

    @property
    def n_vertices(self) -> int:
        return len(self.vertex_table[0])

    def hanging_vertices(self) -> np.ndarray:
        """Coordinates of vertices that sit mid-edge of a coarser neighbor."""
        x0, y0, hx, hy = self.geometry
        pts = []
        for side in range(4):
            kind, _ = self.neighbors[side]
            c = np.flatnonzero(kind == FINER)
            if side in (WEST, EAST):
                px = x0[c] + (side == EAST) * hx[c]
                py = y0[c] + 0.5 * hy[c]
            else:
                px = x0[c] + 0.5 * hx[c]
                py = y0[c] + (side == NORTH) * hy[c]
            pts.append(np.column_stack([px, py]))
        return np.concatenate(pts) if pts else np.empty((0, 2))

    # -- edges --------------------------------------------------------

    @cached_property
    def interior_edges(self) -> Edges:
        """Each interior (sub-)edge once, normal pointing ``cell -> other``.

        Only the east and north sides of every cell are scanned; a coarse cell
        facing finer neighbors reports one row per fine sub-edge.
        """
        x0, y0, hx, hy = self.geometry
        cells, others, sides, starts, ends = [], [], [], [], []
        for side in (EAST, NORTH):
            kind, idx = self.neighbors[side]
            for col, sel in ((0, kind != BOUNDARY), (1, kind == FINER)):
                c = np.flatnonzero(sel)
                o = idx[c, col]
                # the sub-edge is the side of whichever cell is smaller
                small = np.where(self.level[o] > self.level[c], o, c)
                if side == EAST:
                    x = x0[c] + hx[c]
                    s = np.column_stack([x, y0[small]])
                    e = np.column_stack([x, y0[small] + hy[small]])
                else:
                    y = y0[c] + hy[c]
                    s = np.column_stack([x0[small], y])
                    e = np.column_stack([x0[small] + hx[small], y])
                cells.append(c)
                others.append(o)
                sides.append(np.full(len(c), side))
                starts.append(s)
                ends.append(e)
        cell = np.concatenate(cells)
        order = np.lexsort((np.concatenate(sides), cell))
        return Edges(
            cell[order],
            np.concatenate(others)[order],
            np.concatenate(sides)[order],
            np.concatenate(starts)[order],
            np.concatenate(ends)[order],
        )

    @cached_property
    def boundary_edges(self) -> BoundaryEdges:
        x0, y0, hx, hy = self.geometry
        cells, sides, starts, ends = [], [], [], []
        for side in range(4):
            kind, _ = self.neighbors[side]
            c = np.flatnonzero(kind == BOUNDARY)
            xs = x0[c] + (side == EAST) * hx[c]
            ys = y0[c] + (side == NORTH) * hy[c]
            if side in (WEST, EAST):
                s = np.column_stack([xs, y0[c]])
                e = np.column_stack([xs, y0[c] + hy[c]])
            else:
                s = np.column_stack([x0[c], ys])
                e = np.column_stack([x0[c] + hx[c], ys])
            cells.append(c)
            sides.append(np.full(len(c), side))
            starts.append(s)
            ends.append(e)
        return BoundaryEdges(np.concatenate(cells), np.concatenate(sides),
                             np.concatenate(starts), np.concatenate(ends))

    def active_edges(self):
        """Yield ``(start, end, cell, other_or_tag, normal)`` per edge.

        Interior edges report the neighbor's active index; boundary edges
        report the string tag ``"boundary:<side>"``.
        """
        ie = self.interior_edges
        normals = ie.normal
        for k in range(len(ie)):
            yield ie.start[k], ie.end[k], int(ie.cell[k]), int(ie.other[k]), normals[k]
        be = self.boundary_edges
        for k in range(len(be)):
            yield (be.start[k], be.end[k], int(be.cell[k]),
                   f"boundary:{int(be.side[k])}", be.normal[k])

    # -- adaptation ---------------------------------------------------

    def refine_and_coarsen(self, marks: MarkSet):
        """Return ``(new_mesh, ChangeLog)``.

        Refine-marked cells are split; 1-irregularity is restored by closure
        refinement.  A parent is reinstated only when all four children are
        coarsen-marked, none got refined, and the result stays 1-irregular.
        """
        refine = np.array(sorted(marks.refine), dtype=np.int64)
        coarsen = np.array(sorted(set(marks.coarsen) - set(marks.refine)), dtype=np.int64)
        if len(refine) and np.any(~self.is_active(refine)):
            raise ValueError("refine marks must reference active cells")
        if len(coarsen) and np.any(~self.is_active(coarsen)):
            raise ValueError("coarsen marks must reference active cells")
        log = ChangeLog(refined=[int(k) for k in refine])

        keys = self.keys
        to_split = refine
        first = True
        while len(to_split):
            keys = np.sort(np.concatenate(
                [np.setdiff1d(keys, to_split, assume_unique=True),
                 children_keys(to_split).ravel()]))
            if not first:
                log.closure.extend(int(k) for k in to_split)
            first = False
            level, i, j = decode(keys)
            bad = _irregular_leaves(keys, self.n, level, i, j)
            to_split = keys[bad]

        keys, coarsened, dropped = _coarsen(keys, self.n, coarsen)
        log.coarsened = [int(k) for k in coarsened]
        log.dropped_coarsen = [int(k) for k in dropped]
        return QuadMesh(self.domain, self.n, keys), log

    def refine_all(self):
        return self.refine_and_coarsen(MarkSet.of(self.keys))

    # -- invariants ---------------------------------------------------

    def check(self, rtol: float = 1e-12) -> None:
        """Raise ``AssertionError`` if partition or 1-irregularity fails."""
        total = float(np.sum(self.areas))
        if abs(total - self.domain_area) > rtol * self.domain_area:
            raise AssertionError(f"cell areas sum to {total}, domain {self.domain_area}")
        # disjointness: no active key may have an active ancestor
        level, i, j = self.level, self.ix, self.iy
        for up in range(1, self.max_level + 1):
            sel = level >= up
            anc = encode(level[sel] - up, i[sel] >> up, j[sel] >> up)
            if np.any(self.is_active(anc)):
                raise AssertionError("an active cell overlaps an active ancestor")
        if not self.is_one_irregular():
            raise AssertionError("mesh is not 1-irregular")

    def __repr__(self) -> str:
        return (f"QuadMesh(domain={self.domain}, n={self.n}, "
                f"cells={len(self)}, max_level={self.max_level})")


def new_uniform(domain=(0.0, 1.0, 0.0, 1.0), n: int = 1) -> QuadMesh:
    return QuadMesh.uniform(domain, n)


def _find_leaf(keys, level, i, j):
    level = np.asarray(level, dtype=np.int64)
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    out = np.full(level.shape, -1, dtype=np.int64)
    if level.size == 0 or len(keys) == 0:
        return out
    pending = np.ones(level.shape, dtype=bool)
    for up in range(int(level.max()) + 1):
        sel = pending & (level >= up)
        if not np.any(sel):
            break
        k = encode(level[sel] - up, i[sel] >> up, j[sel] >> up)
        pos = np.minimum(np.searchsorted(keys, k), len(keys) - 1)
        hit = keys[pos] == k
        where = np.flatnonzero(sel)
        out[where[hit]] = pos[hit]
        pending[where[hit]] = False
    return out


def _irregular_leaves(keys, n, level, i, j):
    """Active indices of leaves that are 2+ levels coarser than a neighbor."""
    bad = []
    for side in range(4):
        di, dj = _SIDE_OFFSET[side]
        ni, nj = i + di, j + dj
        m = n << level
        inside = (ni >= 0) & (nj >= 0) & (ni < m) & (nj < m) & (level >= 2)
        if not np.any(inside):
            continue
        lev = level[inside]
        # only the leaf covering the coarse-by-two region matters
        leaf = _find_leaf(keys, lev - 2, ni[inside] >> 2, nj[inside] >> 2)
        bad.append(leaf[leaf >= 0])
    if not bad:
        return np.empty(0, dtype=np.int64)
    return np.unique(np.concatenate(bad))


def _coarsen(keys, n, marked):
    """Coarsen complete, fully marked sibling groups; iterate to a fixpoint."""
    empty = np.empty(0, dtype=np.int64)
    if len(marked) == 0:
        return keys, empty, empty
    cand = marked[decode(marked)[0] > 0]
    if len(cand):
        uniq, counts = np.unique(parent_keys(cand), return_counts=True)
        groups = uniq[counts == 4]
    else:
        groups = empty
    done = []
    while len(groups):
        kids = children_keys(groups)
        pos = np.minimum(np.searchsorted(keys, kids), len(keys) - 1)
        complete = np.all(keys[pos] == kids, axis=1)
        groups, kids = groups[complete], kids[complete]
        if not len(groups):
            break
        level, gi, gj = (a.reshape(-1, 4) for a in decode(kids.ravel()))
        ok = np.ones(len(groups), dtype=bool)
        for side in range(4):
            di, dj = _SIDE_OFFSET[side]
            ni, nj = gi + di, gj + dj
            m = n << level
            inside = (ni >= 0) & (nj >= 0) & (ni < m) & (nj < m)
            # siblings are fine; outside neighbors must not be finer than the children
            outer = inside & (((ni >> 1) != (gi >> 1)) | ((nj >> 1) != (gj >> 1)))
            if not np.any(outer):
                continue
            leaf = _find_leaf(keys, level[outer], ni[outer], nj[outer])
            blocked = np.zeros(level.shape, dtype=bool)
            blocked[outer] = leaf < 0
            ok &= ~np.any(blocked, axis=1)
        if not np.any(ok):
            break
        go = groups[ok]
        keys = np.sort(np.concatenate(
            [np.setdiff1d(keys, kids[ok].ravel(), assume_unique=True), go]))
        done.append(go)
        groups = groups[~ok]
    coarsened = np.sort(np.concatenate(done)) if done else empty
    removed = children_keys(coarsened).ravel() if len(coarsened) else empty
    dropped = np.setdiff1d(marked, removed)
    return keys, coarsened, dropped
