"""Deterministic simulation engine for personalized invariant federated learning."""

from .analysis import (
    ClientFeatureSpec,
    DiscreteJoint,
    best_subset_mi,
    convergence_slope,
    mutual_information_exact,
    theorem1_gap,
)
from .data import (
    ClientData,
    Environment,
    FederationSpec,
    GenParams,
    SemSpec,
    binarize_and_noise,
    build_sem_federation,
    colorize,
    downsample,
    generate_sem_env,
    invariant_bayes_accuracy,
    parse_idx,
    partition_clients,
    rotate,
)
from .federation import (
    DivergenceError,
    Hyperparams,
    TrainResult,
    aggregate,
    evaluate,
    local_global_step,
    personalized_step,
    run_baseline,
    train,
)
from .harness import ExperimentConfig, check_gradients, parse_config, run_experiment
from .metrics import MetricsLog
from .models import Batch, ModelArch, accuracy, forward, init_params, risk
from .numerics import ParamVector, Tensor, checked, finite_diff_grad, grad
from .objectives import (
    GroupWeights,
    ObjectiveConfig,
    dummy_grad,
    groupdro_loss,
    groupdro_update_q,
    irm_loss,
    local_objective,
)

__version__ = "0.1.0"
