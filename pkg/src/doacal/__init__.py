"""Joint sensor-array calibration and DOA estimation.

Iterative maximum-likelihood estimators (joint and calibration-first) for
sparse linear arrays with unknown complex sensor gains and block-diagonal
noise covariance, plus a Cramér-Rao bound evaluator and a Monte-Carlo
MSE-vs-SNR harness.
"""

from .block_cov import (
    BlockCovariance,
    BlockFactor,
    BlockMask,
    build_default_cov,
    factor,
    identity_cov,
    mask_project,
    sample_noise,
)
from .crb import FisherBlock, crb_theta, fisher_mean_block, mean_derivatives
from .errors import (
    ConfigError,
    EstimationError,
    NotPositiveDefiniteError,
    RankDeficientError,
    SingularFisherError,
)
from .estimators import (
    EstimatorConfig,
    EstimatorState,
    Variant,
    concentrated_cost,
    cost_gradient,
    log_likelihood,
    optimize_theta,
    run_iml,
    run_miml,
    update_gains_iml,
    update_gains_miml,
    update_omega,
    update_omega_miml,
    update_signals,
)
from .harness import (
    ExperimentConfig,
    SweepResult,
    SweepRow,
    TrialResult,
    emit_csv,
    make_scenario,
    parse_config_file,
    reference_crb_deg2,
    run_sweep,
    run_trial,
    snr_to_noise_scale,
)
from .signal_model import (
    ArrayGeometry,
    Scenario,
    steering_derivative,
    steering_matrix,
    steering_vector,
    synthesize,
)

__all__ = [
    "ArrayGeometry",
    "BlockCovariance",
    "BlockFactor",
    "BlockMask",
    "ConfigError",
    "EstimationError",
    "EstimatorConfig",
    "EstimatorState",
    "ExperimentConfig",
    "FisherBlock",
    "NotPositiveDefiniteError",
    "RankDeficientError",
    "Scenario",
    "SingularFisherError",
    "SweepResult",
    "SweepRow",
    "TrialResult",
    "Variant",
    "build_default_cov",
    "concentrated_cost",
    "cost_gradient",
    "crb_theta",
    "emit_csv",
    "factor",
    "fisher_mean_block",
    "identity_cov",
    "log_likelihood",
    "make_scenario",
    "mask_project",
    "mean_derivatives",
    "optimize_theta",
    "parse_config_file",
    "reference_crb_deg2",
    "run_iml",
    "run_miml",
    "run_sweep",
    "run_trial",
    "sample_noise",
    "snr_to_noise_scale",
    "steering_derivative",
    "steering_matrix",
    "steering_vector",
    "synthesize",
    "update_gains_iml",
    "update_gains_miml",
    "update_omega",
    "update_omega_miml",
    "update_signals",
]

__version__ = "0.1.0"
