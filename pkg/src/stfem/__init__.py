"""Adaptive space-time minimal residual finite elements for the 1D heat equation."""
from .errors import (CapacityError, ConsistencyError, InvalidArgument, InvalidData, InvalidState,
                     NumericalBreakdown)
from .mesh import (MeshHierarchy, build_initial, check_invariants, close_mesh, closure_violations,
                   dump_mesh, patches, refine_cell)
from .space import DofSystem, SpaceSpec, build_dofs, prolongation, trace_t0
from .forms import QuadratureRule, assemble_B, assemble_load, assemble_trace, h1x_error
from .precond import MultilevelPreconditioner, apply_G, apply_K, spectral_check
from .solver import LinearSystem, PCGResult, SchurSystem, StopCriterion, build_system, pcg_solve
from .adapt import (PROBLEMS, EstimatorReport, LevelRecord, LoopResult, Problem, adaptive_loop,
                    estimate, mark)
from .fracnorm import GramMatrix, gram, slobodeckij_gram, slobodeckij_seminorm_sq, weighted_gram
from .fortin import BubbleTestSpace, FortinOperator, SZOperator, fortin_apply, scott_zhang

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "ConsistencyError",
    "InvalidArgument",
    "InvalidData",
    "InvalidState",
    "NumericalBreakdown",
    "MeshHierarchy",
    "build_initial",
    "check_invariants",
    "close_mesh",
    "closure_violations",
    "dump_mesh",
    "patches",
    "refine_cell",
    "DofSystem",
    "SpaceSpec",
    "build_dofs",
    "prolongation",
    "trace_t0",
    "QuadratureRule",
    "assemble_B",
    "assemble_load",
    "assemble_trace",
    "h1x_error",
    "MultilevelPreconditioner",
    "apply_G",
    "apply_K",
    "spectral_check",
    "LinearSystem",
    "PCGResult",
    "SchurSystem",
    "StopCriterion",
    "build_system",
    "pcg_solve",
    "PROBLEMS",
    "EstimatorReport",
    "LevelRecord",
    "LoopResult",
    "Problem",
    "adaptive_loop",
    "estimate",
    "mark",
    "GramMatrix",
    "gram",
    "slobodeckij_gram",
    "slobodeckij_seminorm_sq",
    "weighted_gram",
    "BubbleTestSpace",
    "FortinOperator",
    "SZOperator",
    "fortin_apply",
    "scott_zhang",
]
