"""Goal-oriented adaptive SUPG finite elements for steady convection-diffusion-reaction.

The primal problem is discretized with stabilized Q_p elements on a
1-irregular quadtree mesh; a higher-order dual problem weights the cell and
edge residuals to give signed per-cell error indicators that drive
refinement and coarsening.
"""
from .adapt import AdaptConfig, IterationRecord, LoopResult, check_stop, dwr_loop, global_loop, mark_histogram
from .assembly import SolverError, assemble_dual, assemble_primal, solve
from .estimator import ErrorIndicators, effectivity, indicators
from .fespace import FeSpace, interpolate
from .mesh import MarkSet, QuadMesh, new_uniform
from .problem import (ConfigurationError, DegenerateGoalError, DomainMean, L2ErrorRep,
                      PointValueRegularized, ProblemSpec, SubdomainMean, example1, example2,
                      manufactured)

__all__ = [
    "AdaptConfig", "IterationRecord", "LoopResult", "check_stop", "dwr_loop", "global_loop",
    "mark_histogram", "SolverError", "assemble_dual", "assemble_primal", "solve",
    "ErrorIndicators", "effectivity", "indicators", "FeSpace", "interpolate", "MarkSet",
    "QuadMesh", "new_uniform", "ConfigurationError", "DegenerateGoalError", "DomainMean",
    "L2ErrorRep", "PointValueRegularized", "ProblemSpec", "SubdomainMean", "example1",
    "example2", "manufactured",
]
__version__ = "0.1.0"
