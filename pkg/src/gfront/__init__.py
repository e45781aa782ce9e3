"""gfront: a simulation lab for front propagation in random incompressible winds.

Fronts move with unit speed of their own on top of a divergence-free drift
sampled from a finite-range random law.  The package builds such fields,
floods reachable sets and first-passage times on grids, classifies sites into
percolation lattices, runs the convex rearrangement and skeleton-reduction
constructions behind the passage-time concentration argument, and estimates
the limit shape, effective Hamiltonian, and homogenization error rates.
"""

from .fields import Field, FieldSpec, build_field, export_grid_csv
from .reach import (
    Box,
    BudgetError,
    GridConfig,
    GridConfigError,
    GridFront,
    PassageMap,
    WindowError,
    disc_mask,
    disc_points,
    first_passage,
    mask_to_rle,
    oracle_passage,
    passage_to_csv,
    propagate,
    rle_to_mask,
)
from .perc import (
    REFERENCE_AMPLITUDE,
    REFERENCE_THRESHOLD,
    DomainError,
    GiantClusterReport,
    SiteLattice,
    SkeletonPath,
    UnicoherenceReport,
    boundaries,
    check_unicoherence,
    cl_of,
    classify_sites,
    detour_skeleton,
    giant_cluster_event,
    random_connected_set,
    random_lattice,
    site_time_profile,
)
from .subadd import (
    GapReport,
    GoodSet,
    HullCertificate,
    LevelRecord,
    ReduceReport,
    SubadditiveOracle,
    alexander_reduce,
    alexander_step1,
    caratheodory,
    check_certificates,
    gap_from_skeleton,
    prefix_deviation,
    rearrange,
)
from .stats import (
    LineFit,
    PowerFit,
    TailFit,
    bootstrap_se,
    derive_seeds,
    fekete_violation,
    line_fit,
    loglog_fit,
    tail_fit,
)
from .homog import (
    ContinuityReport,
    FluctuationReport,
    HomogErrorReport,
    MeanPassageOracle,
    ShapeConvergenceReport,
    ShapeEstimate,
    SkeletonErrorReport,
    StarSet,
    cone_u0,
    continuity_experiment,
    effective_H,
    effective_H_dual,
    estimate_theta_bar,
    fluctuation_experiment,
    greedy_skeleton,
    hausdorff_to_shape,
    homog_error_experiment,
    linear_u0,
    passage_oracle,
    shape_convergence_experiment,
    shape_set,
    skeleton_error,
    sphere_directions,
    u_bar,
    u_eps,
    u_eps_curve,
)
from .harness import (
    ConfigError,
    ExperimentConfig,
    RunResult,
    TrialRecord,
    ValidationReport,
    config_hash,
    list_experiments,
    normalize_config,
    parse_config,
    read_config,
    run_experiment,
)

__version__ = "0.1.0"

__all__ = [
    "Field",
    "FieldSpec",
    "build_field",
    "export_grid_csv",
    "Box",
    "BudgetError",
    "GridConfig",
    "GridConfigError",
    "GridFront",
    "PassageMap",
    "WindowError",
    "disc_mask",
    "disc_points",
    "first_passage",
    "mask_to_rle",
    "oracle_passage",
    "passage_to_csv",
    "propagate",
    "rle_to_mask",
    "REFERENCE_AMPLITUDE",
    "REFERENCE_THRESHOLD",
    "DomainError",
    "GiantClusterReport",
    "SiteLattice",
    "SkeletonPath",
    "UnicoherenceReport",
    "boundaries",
    "check_unicoherence",
    "cl_of",
    "classify_sites",
    "detour_skeleton",
    "giant_cluster_event",
    "random_connected_set",
    "random_lattice",
    "site_time_profile",
    "GapReport",
    "GoodSet",
    "HullCertificate",
    "LevelRecord",
    "ReduceReport",
    "SubadditiveOracle",
    "alexander_reduce",
    "alexander_step1",
    "caratheodory",
    "check_certificates",
    "gap_from_skeleton",
    "prefix_deviation",
    "rearrange",
    "LineFit",
    "PowerFit",
    "TailFit",
    "bootstrap_se",
    "derive_seeds",
    "fekete_violation",
    "line_fit",
    "loglog_fit",
    "tail_fit",
    "ContinuityReport",
    "FluctuationReport",
    "HomogErrorReport",
    "MeanPassageOracle",
    "ShapeConvergenceReport",
    "ShapeEstimate",
    "SkeletonErrorReport",
    "StarSet",
    "cone_u0",
    "continuity_experiment",
    "effective_H",
    "effective_H_dual",
    "estimate_theta_bar",
    "fluctuation_experiment",
    "greedy_skeleton",
    "hausdorff_to_shape",
    "homog_error_experiment",
    "linear_u0",
    "passage_oracle",
    "shape_convergence_experiment",
    "shape_set",
    "skeleton_error",
    "sphere_directions",
    "u_bar",
    "u_eps",
    "u_eps_curve",
    "ConfigError",
    "ExperimentConfig",
    "RunResult",
    "TrialRecord",
    "ValidationReport",
    "config_hash",
    "list_experiments",
    "normalize_config",
    "parse_config",
    "read_config",
    "run_experiment",
    "__version__",
]
