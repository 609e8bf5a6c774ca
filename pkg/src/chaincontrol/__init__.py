"""Chain control sets of linear control systems on low-dimensional Lie groups."""

from .errors import (
    BudgetExceededError,
    DefectiveClusteringError,
    IncompatibleActionError,
    NotAutomorphismError,
    NotDerivationError,
    NotHyperbolicError,
    NotNilpotentError,
    SeriesNotPreservedError,
    TauTooSmallError,
    ValidationError,
)
from .algebra import NilpotentAlgebra, bch_dynkin, preset_structure, quotient_by_central
from .spectral import (
    GradedBlocks,
    SpectralSplit,
    ad_chain_blocks,
    block_decompose,
    check_derivation,
    decay_constants,
    quotient_derivation,
)
from .group import (
    ConjugationMap,
    RhoAction,
    SemidirectGroup,
    TorusGroup,
    recurrence_time,
    validate_linear_flow,
)
from .lcs import (
    ControlFunction,
    ControlRange,
    LinearControlSystem,
    Trajectory,
    cocycle_residual,
    cross_check_residual,
    integrate,
    translation_identity_residual,
    triangular_solve,
)
from .chains import (
    ChainControlSetApprox,
    ChainGraph,
    GridWindow,
    JumpTube,
    LevelBounds,
    UniquenessReport,
    audit_edges,
    build_chain_graph,
    central_fiber_nodes,
    estimate_source_constants,
    extract_chain_sets,
    jump_and_tube_sets,
    level_extents,
    strongly_connected_components,
    theoretical_bound,
    verify_uniqueness_and_containment,
)
from .config import (
    RunConfig,
    build_system,
    build_window,
    dump_config,
    load_config,
    parse_config,
    preset_config,
    preset_names,
)
from .verify import acceptance_report, run_battery

__version__ = "0.1.0"

__all__ = [
    "NilpotentAlgebra",
    "bch_dynkin",
    "preset_structure",
    "quotient_by_central",
    "GradedBlocks",
    "SpectralSplit",
    "ad_chain_blocks",
    "block_decompose",
    "check_derivation",
    "decay_constants",
    "quotient_derivation",
    "ConjugationMap",
    "RhoAction",
    "SemidirectGroup",
    "TorusGroup",
    "recurrence_time",
    "validate_linear_flow",
    "ControlFunction",
    "ControlRange",
    "LinearControlSystem",
    "Trajectory",
    "cocycle_residual",
    "cross_check_residual",
    "integrate",
    "translation_identity_residual",
    "triangular_solve",
    "ChainControlSetApprox",
    "ChainGraph",
    "GridWindow",
    "JumpTube",
    "LevelBounds",
    "UniquenessReport",
    "audit_edges",
    "build_chain_graph",
    "central_fiber_nodes",
    "estimate_source_constants",
    "extract_chain_sets",
    "jump_and_tube_sets",
    "level_extents",
    "strongly_connected_components",
    "theoretical_bound",
    "verify_uniqueness_and_containment",
    "RunConfig",
    "build_system",
    "build_window",
    "dump_config",
    "load_config",
    "parse_config",
    "preset_config",
    "preset_names",
    "acceptance_report",
    "run_battery",
    "ValidationError",
    "NotNilpotentError",
    "NotDerivationError",
    "SeriesNotPreservedError",
    "DefectiveClusteringError",
    "NotAutomorphismError",
    "IncompatibleActionError",
    "NotHyperbolicError",
    "TauTooSmallError",
    "BudgetExceededError",
]
