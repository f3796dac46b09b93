"""Online maximum-likelihood parameter tracking for continuously monitored quantum systems."""

__version__ = "0.1.0"

from .errors import ConfigError, DegenerateUpdateError, PositivityError, QTrackError, UsageError
from .estimator import (
    EstimateLog,
    EstimationError,
    EstimatorState,
    LearningRate,
    OnlineEstimator,
    estimator_step,
    learning_rate_at,
    run_online,
)
from .filtering import (
    FilterAudit,
    FilterState,
    advance,
    audit_filter,
    continuous_grad_increment,
    filter_step,
    grad_increment,
    innovation,
    loglik_increment,
    sensitivity_step,
)
from .model import (
    PARAM_ORDER,
    DiffusiveModel,
    KrausStep,
    ParamSpec,
    apply_partial_kraus,
    apply_partial_kraus_deriv,
    kraus_operator,
    two_level_example,
    working_point,
)
from .offline import BatchResult, finite_diff_grad, grad_total, loglik_total, offline_ascent
from .simulate import TrajectoryLog, TrajectorySimulator, TruthSchedule, simulate, step_true

