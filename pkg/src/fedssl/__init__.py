"""Federated semi-supervised learning simulator with dual-regulator training."""

from .client import (
    ClientState,
    Hyperparams,
    LocalRoundResult,
    feddure_local_round,
    fixmatch_local_round,
    supervised_local_round,
)
from .config import ExperimentConfig, get_preset, parse_config, presets, serialize_config
from .data import (
    AugmentSpec,
    ClientData,
    Dataset,
    PartitionSpec,
    augment,
    dirichlet_partition,
    gen_synthetic,
    imbalance_report,
    load_idx,
)
from .estimator import FederatedSSLClassifier
from .harness import compare_runs, run_experiment
from .nn import MlpSpec, cross_entropy, forward, grad, gradient_check, init_params, numeric_grad
from .params import AdamState, ParamVector, adam_step, sgd_step
from .regulators import (
    FineRegulator,
    MetaGradConfig,
    RewardSignal,
    creg_one_step,
    entropy_difference,
    freg_update,
    init_fine_regulator,
    instance_weights,
    pseudo_label,
)
from .server import GlobalState, RoundReport, aggregate, evaluate, run_round, select_clients

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AugmentSpec",
    "ClientData",
    "ClientState",
    "Dataset",
    "ExperimentConfig",
    "FederatedSSLClassifier",
    "FineRegulator",
    "GlobalState",
    "Hyperparams",
    "LocalRoundResult",
    "MetaGradConfig",
    "MlpSpec",
    "ParamVector",
    "PartitionSpec",
    "RewardSignal",
    "RoundReport",
    "adam_step",
    "aggregate",
    "augment",
    "compare_runs",
    "creg_one_step",
    "cross_entropy",
    "dirichlet_partition",
    "entropy_difference",
    "evaluate",
    "feddure_local_round",
    "fixmatch_local_round",
    "forward",
    "freg_update",
    "gen_synthetic",
    "get_preset",
    "grad",
    "gradient_check",
    "imbalance_report",
    "init_fine_regulator",
    "init_params",
    "instance_weights",
    "load_idx",
    "numeric_grad",
    "parse_config",
    "presets",
    "pseudo_label",
    "run_experiment",
    "run_round",
    "select_clients",
    "serialize_config",
    "sgd_step",
    "supervised_local_round",
]
