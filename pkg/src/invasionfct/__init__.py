"""Positivity-preserving FEM-FCT solver for a cancer-invasion system.

The model couples a cross-diffusion equation for the cancer cell density u
with nodal ODEs for the connective tissue c and the protease p.  Space is
discretized with bilinear (Q1) elements on uniform square meshes, time with
the theta-method; the convective haptotaxis term is stabilized by algebraic
flux correction with a Zalesak limiter, which keeps u, p non-negative and c
in [0, 1] under explicit time-step conditions.
"""

from .assembly import (
    Assembler,
    PatternMatrix,
    SparsityPattern,
    artificial_diffusion,
    assemble_mass,
    assemble_stiffness,
    assembler_for,
    low_order_operator,
    lump_mass,
)
from .fct import (
    FluxSet,
    LimiterSet,
    apply_correction,
    compute_fluxes,
    local_bounds,
    prelimit,
    zalesak,
)
from .kinetics import update_c, update_p
from .mesh import Mesh, build_uniform_mesh, neighbor_sets, shape_constant_kappa
from .stepper import (
    DiagnosticsLog,
    SchemeConfig,
    SimulationResult,
    State,
    StepDiagnostics,
    StepFailure,
    Stepper,
    fixed_point_step,
    initialize,
    linear_step,
    low_order_predictor,
    max_admissible_tau,
    run_simulation,
)

__all__ = [
    "Assembler",
    "DiagnosticsLog",
    "FluxSet",
    "LimiterSet",
    "Mesh",
    "PatternMatrix",
    "SchemeConfig",
    "SimulationResult",
    "SparsityPattern",
    "State",
    "StepDiagnostics",
    "StepFailure",
    "Stepper",
    "apply_correction",
    "artificial_diffusion",
    "assemble_mass",
    "assemble_stiffness",
    "assembler_for",
    "build_uniform_mesh",
    "compute_fluxes",
    "fixed_point_step",
    "initialize",
    "linear_step",
    "local_bounds",
    "low_order_operator",
    "low_order_predictor",
    "lump_mass",
    "max_admissible_tau",
    "neighbor_sets",
    "prelimit",
    "run_simulation",
    "shape_constant_kappa",
    "update_c",
    "update_p",
    "zalesak",
]

__version__ = "0.1.0"
