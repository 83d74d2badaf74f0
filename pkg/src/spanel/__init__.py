"""GMM estimation for dynamic spatial panels with interactive effects.

The package simulates, estimates, and diagnoses spatial autoregressive
panel models whose networks may be endogenous: a generalized Helmert
transformation removes interactive unit effects, linear and quadratic
moment conditions identify the spatial coefficient even without strong
instruments, and a replication engine reproduces the bias/MAE and Wald
coverage experiments.
"""

__version__ = "0.1.0"

from .errors import (
    BadLagSpec,
    ConfigError,
    DegenerateFactor,
    DidNotConverge,
    IsolatedUnit,
    NoStartingValue,
    NonBinaryAdjacency,
    OutsideSufficientConditions,
    RankDeficientInstruments,
    RankDeficientJacobian,
    RankDeficientRestriction,
    SingularProjection,
    SingularSystem,
    SingularWeightMatrix,
    SpanelError,
    TooManyFactors,
)
from .estimator import (
    GmmResult,
    WaldOutcome,
    default_template,
    efficient_gmm,
    gmm_estimate,
    ols_estimate,
    sandwich_psi,
    starting_values,
    tsls_estimate,
    wald_test,
)
from .identification import IdentificationReport, compute_S, compute_projectors, diagnose
from .moments import (
    ModelDesign,
    MomentSet,
    MomentValue,
    build_instruments,
    build_quadratic_weights,
    default_moment_set,
    evaluate_moments,
    moment_jacobian,
    weight_matrix,
)
from .montecarlo import (
    McSummary,
    coverage_experiment,
    estimate_replication,
    grid_csv,
    run_design,
    run_grid,
    summarize,
)
from .netsim import (
    McDesign,
    NetworkParams,
    ZetaSpec,
    build_mstar,
    form_network,
    generate_outcomes,
    simulate_panel,
)
from .panel import (
    PanelData,
    ParamVector,
    SpatialWeightMatrix,
    read_panel_csv,
    read_weights_csv,
    row_normalize,
    write_panel_csv,
    write_weights_csv,
)
from .streams import substream
from .transform import (
    HelmertTransform,
    cochrane_orcutt,
    forward_difference,
    helmert_weights,
    multi_factor_weights,
)
from .vclq_verify import (
    InnovationModel,
    LqForm,
    predicted_moments,
    simulate_moments,
    trace_zero_pair,
    verify_configurations,
)

__all__ = [
    "__version__",
    # errors
    "SpanelError", "IsolatedUnit", "NonBinaryAdjacency", "BadLagSpec",
    "DegenerateFactor", "TooManyFactors", "RankDeficientInstruments",
    "SingularWeightMatrix", "SingularProjection", "NoStartingValue",
    "DidNotConverge", "RankDeficientJacobian", "RankDeficientRestriction",
    "SingularSystem", "OutsideSufficientConditions", "ConfigError",
    # panel containers and io
    "PanelData", "ParamVector", "SpatialWeightMatrix", "row_normalize",
    "read_panel_csv", "read_weights_csv", "write_panel_csv", "write_weights_csv",
    # transformation
    "HelmertTransform", "helmert_weights", "multi_factor_weights",
    "cochrane_orcutt", "forward_difference",
    # moments
    "ModelDesign", "MomentSet", "MomentValue", "build_instruments",
    "build_quadratic_weights", "default_moment_set", "evaluate_moments",
    "moment_jacobian", "weight_matrix",
    # estimation and inference
    "GmmResult", "WaldOutcome", "default_template", "gmm_estimate",
    "efficient_gmm", "ols_estimate", "tsls_estimate", "starting_values",
    "sandwich_psi", "wald_test",
    # identification diagnostics
    "IdentificationReport", "diagnose", "compute_projectors", "compute_S",
    # simulation
    "McDesign", "NetworkParams", "ZetaSpec", "form_network",
    "generate_outcomes", "build_mstar", "simulate_panel",
    # replication engine
    "McSummary", "run_design", "run_grid", "coverage_experiment",
    "estimate_replication", "summarize", "grid_csv",
    # covariance-formula oracle
    "LqForm", "InnovationModel", "predicted_moments", "simulate_moments",
    "verify_configurations", "trace_zero_pair",
    # streams
    "substream",
]
