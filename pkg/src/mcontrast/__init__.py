"""Minimum contrast estimation of drift parameters for small-noise
slow-fast diffusions observed discretely at low frequency, with the
simulation, averaging, flow-integration, and asymptotic-variance
machinery needed for Monte Carlo studies."""

__version__ = "0.1.0"

from .errors import (                                        # noqa: F401
    BlowUp,
    CenteringViolation,
    ConfigError,
    DivisibilityError,
    EvaluationFailure,
    GradientInconsistency,
    GridMismatch,
    IdentifiabilityFailure,
    McontrastError,
    NoDescent,
    NonErgodic,
    NonFinite,
    NormalizationFailure,
    ResidualTooLarge,
    SolvabilityViolation,
    TooManyFailures,
    WeightDegenerate,
)
from .model import (                                         # noqa: F401
    Line,
    MultiscaleModel,
    ParameterSpace,
    Periodic,
    Regime,
    RegimeKind,
    ScalePair,
    ValidationReport,
    validate_model,
)
from .quadrature import QuadratureSettings                   # noqa: F401
from .averaging import (                                     # noqa: F401
    AveragedModel,
    CellSolution,
    ClosedFormAveragedModel,
    DensityGrid,
    Generator1D,
    QuadratureAveragedModel,
    build_averaged_model,
    check_gradients,
    frozen_generator,
    invariant_density,
    solve_cell_problem,
)
from .simulate import (                                      # noqa: F401
    ObservationSet,
    Trajectory,
    replicate_seed,
    simulate_observations,
    simulate_path,
    subsample,
)
from .flow import (                                          # noqa: F401
    FlowCache,
    FlowEngine,
    FlowSettings,
    covariance_weights,
    drift_correction,
    integrate_xbar,
    propagator,
    sensitivity,
)
from .estimators import (                                    # noqa: F401
    ContrastEvaluation,
    EstimationResult,
    OptimizerSettings,
    contrast_mce,
    contrast_smce,
    estimate,
    minimize_contrast,
    residuals_full,
    residuals_simplified,
)
from .variance import (                                      # noqa: F401
    AsymptoticVariance,
    limit_variance,
    mce_variance,
    psd_gap,
    smce_variance,
    theoretical_sd,
)
from .registry import available_models, get_bundle, get_model, get_space  # noqa: F401
from .experiment import (                                    # noqa: F401
    ExperimentConfig,
    ExperimentReport,
    emit_report,
    preset_config,
    run_experiment,
)
