"""Two-level SIMP topology optimization with equilibrated cell tractions.

A coarse optimality-criteria pass distributes one relative density per cell
under a threshold-freezing loop, the converged finite element solution is
converted into continuous per-edge linear tractions, and every unfrozen cell
is then optimized independently at a fine scale under those tractions.
"""

from .grid import Grid, BoundaryConditions
from .fem import MaterialModel, FESolution, solve
from .coarse import CoarseResult, stage_loop
from .equilibrate import EdgeTractionField, equilibrate_all
from .fine import FineCellProblem, ProjectionParams, fine_cell_solve, solve_all_cells
from .pipeline import RunConfig, run_pipeline, preset_config, PRESETS

__version__ = "0.1.0"

__all__ = [
    "Grid",
    "BoundaryConditions",
    "MaterialModel",
    "FESolution",
    "solve",
    "CoarseResult",
    "stage_loop",
    "EdgeTractionField",
    "equilibrate_all",
    "FineCellProblem",
    "ProjectionParams",
    "fine_cell_solve",
    "solve_all_cells",
    "RunConfig",
    "run_pipeline",
    "preset_config",
    "PRESETS",
    "__version__",
]
