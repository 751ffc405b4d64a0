"""Histogram marking and the solve-estimate-mark-refine loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .assembly import assemble_dual, assemble_primal, solve
from .estimator import ErrorIndicators, effectivity, indicators
from .fespace import FeSpace
from .mesh import MarkSet, QuadMesh
from .problem import ProblemSpec, exact_goal_error, freeze_context, goal_value

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdaptConfig:
    theta: float = 1.0
    coarsen_fraction: float = 0.02
    tol: float = 1e-8
    max_iterations: int = 20
    p: int = 1
    s: int = 1
    delta0: float = 1.0
    max_dofs: Optional[int] = None
    quad_order: Optional[int] = None
    error_quad_order: Optional[int] = None

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        if not 0 <= self.coarsen_fraction < 1:
            raise ValueError(f"coarsen_fraction must lie in [0, 1), got {self.coarsen_fraction}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.p < 1 or self.s < 1:
            raise ValueError("p and s must be >= 1")
        if not self.delta0 > 0:
            raise ValueError("delta0 must be positive")

    @property
    def q(self) -> int:
        return self.quad_order or self.p + self.s + 2

    @property
    def q_error(self) -> int:
        return self.error_quad_order or max(self.q, 6)


@dataclass
class IterationRecord:
    iteration: int
    dofs_primal: int
    dofs_dual: Optional[int]
    J_uh: float
    err_exact: Optional[float] = None
    eta: Optional[float] = None
    eta_max: Optional[float] = None
    ieff: Optional[float] = None
    cells: int = 0
    cells_refined: int = 0
    cells_coarsened: int = 0
    seconds: float = 0.0


@dataclass
class LoopState:
    """Everything computed in one iteration (handed to callbacks)."""

    mesh: QuadMesh
    primal: FeSpace
    u_h: np.ndarray
    dual: Optional[FeSpace] = None
    z_h: Optional[np.ndarray] = None
    indicators: Optional[ErrorIndicators] = None
    delta: Optional[np.ndarray] = None
    systems: dict = field(default_factory=dict)


@dataclass
class LoopResult:
    records: list
    state: Optional[LoopState]
    reason: str


def mark_histogram(eta_K, keys, theta: float = 1.0, coarsen_fraction: float = 0.02) -> MarkSet:
    """Histogram marking on ``|eta_K|``.

    The threshold starts at ``theta * mean(|eta_K|)`` and is halved while it
    exceeds the largest indicator; cells strictly above it are refined.  The
    ``floor(coarsen_fraction * #K)`` smallest cells (ties by id) that are not
    refined are flagged for coarsening.
    """
    a = np.abs(np.asarray(eta_K, dtype=float))
    keys = np.asarray(keys, dtype=np.int64)
    if a.size == 0 or not np.any(a > 0):
        return MarkSet.of()
    eta_max = a.max()
    # correctly rounded sum, so equal indicators never exceed their own mean
    mu = theta * math.fsum(a) / a.size
    while mu > eta_max:
        mu /= 2.0
    refine = a > mu
    n_coarse = int(np.floor(coarsen_fraction * a.size))
    order = np.lexsort((keys, a))
    coarsen = [k for k, r in zip(keys[order][:n_coarse], refine[order][:n_coarse]) if not r]
    return MarkSet.of(keys[refine], coarsen)


def check_stop(ind: ErrorIndicators, tol: float) -> bool:
    return ind.eta_max < tol or abs(ind.total) < tol


def _solve_primal(mesh, problem, config):
    primal = FeSpace(mesh, config.p)
    system = assemble_primal(primal, problem, config.delta0, config.q)
    return primal, system, solve(system)


def dwr_loop(problem: ProblemSpec, goal, config: AdaptConfig, mesh: QuadMesh,
             callback: Optional[Callable] = None) -> LoopResult:
    """Adaptive DWR loop; ``callback(record, state)`` runs after each iteration."""
    records = []
    state = None
    reason = "max_iterations"
    for it in range(config.max_iterations):
        t0 = time.perf_counter()
        primal, psys, u_h = _solve_primal(mesh, problem, config)
        ctx = freeze_context(goal, problem, primal, u_h, config.q, config.q_error)
        dual = FeSpace(mesh, config.p + config.s)
        dsys = assemble_dual(dual, problem, ctx, config.delta0, config.q)
        z_h = solve(dsys)
        ind = indicators(primal, u_h, dual, z_h, problem, delta=psys.delta, q=config.q)
        err = exact_goal_error(ctx, config.q_error)
        ind.exact_error = err
        rec = IterationRecord(
            iteration=it, dofs_primal=primal.n_dofs, dofs_dual=dual.n_dofs,
            J_uh=goal_value(ctx, primal, u_h, config.q), err_exact=err,
            eta=ind.total, eta_max=ind.eta_max, ieff=effectivity(ind, err), cells=len(mesh),
        )
        state = LoopState(mesh, primal, u_h, dual, z_h, ind, psys.delta,
                          {"primal": psys, "dual": dsys})
        log.info("iter %d: dofs %d/%d eta %.4e err %s ieff %s", it, primal.n_dofs,
                 dual.n_dofs, ind.total, err, rec.ieff)
        records.append(rec)

        if check_stop(ind, config.tol):
            reason = "tolerance"
            rec.seconds = time.perf_counter() - t0
            if callback:
                callback(rec, state)
            break
        if it == config.max_iterations - 1:
            rec.seconds = time.perf_counter() - t0
            if callback:
                callback(rec, state)
            break
        marks = mark_histogram(ind.eta_K, mesh.keys, config.theta, config.coarsen_fraction)
        if not marks.refine:
            marks = MarkSet.of(mesh.keys, ())
        new_mesh, change = mesh.refine_and_coarsen(marks)
        rec.cells_refined = change.n_refined
        rec.cells_coarsened = change.n_coarsened
        rec.seconds = time.perf_counter() - t0
        if callback:
            callback(rec, state)
        mesh = new_mesh
        if config.max_dofs is not None and FeSpace(mesh, config.p).n_dofs > config.max_dofs:
            reason = "max_dofs"
            break
    return LoopResult(records, state, reason)


def global_loop(problem: ProblemSpec, goal, config: AdaptConfig, mesh: QuadMesh,
                callback: Optional[Callable] = None) -> LoopResult:
    """Uniform refinement, primal solves only, exact goal errors reported."""
    records = []
    state = None
    reason = "max_iterations"
    for it in range(config.max_iterations):
        t0 = time.perf_counter()
        primal, psys, u_h = _solve_primal(mesh, problem, config)
        ctx = freeze_context(goal, problem, primal, u_h, config.q, config.q_error)
        err = exact_goal_error(ctx, config.q_error)
        rec = IterationRecord(
            iteration=it, dofs_primal=primal.n_dofs, dofs_dual=None,
            J_uh=goal_value(ctx, primal, u_h, config.q), err_exact=err, cells=len(mesh),
        )
        records.append(rec)
        state = LoopState(mesh, primal, u_h, delta=psys.delta, systems={"primal": psys})
        log.info("global %d: dofs %d err %s", it, primal.n_dofs, err)
        last = it == config.max_iterations - 1
        if not last:
            new_mesh, change = mesh.refine_all()
            rec.cells_refined = change.n_refined
        rec.seconds = time.perf_counter() - t0
        if callback:
            callback(rec, state)
        if last:
            break
        mesh = new_mesh
        if config.max_dofs is not None and FeSpace(mesh, config.p).n_dofs > config.max_dofs:
            reason = "max_dofs"
            break
    return LoopResult(records, state, reason)
