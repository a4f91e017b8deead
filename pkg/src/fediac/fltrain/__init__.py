"""Federated training with pluggable in-network aggregation algorithms."""

from .data import ClientData, Task, dirichlet_partition, label_entropy, make_task
from .model import MLP, DivergenceError, Quadratic, learning_rate, local_train
from .rounds import (
    Algorithm,
    Network,
    RoundResult,
    bootstrap_first_round,
    run_baseline_round,
    run_dense_round,
    run_fediac_round,
)
from .trainer import METRIC_COLUMNS, FederatedClassifier, Federation, MetricsRow

__all__ = [
    "Algorithm",
    "ClientData",
    "DivergenceError",
    "FederatedClassifier",
    "Federation",
    "METRIC_COLUMNS",
    "MLP",
    "MetricsRow",
    "Network",
    "Quadratic",
    "RoundResult",
    "Task",
    "bootstrap_first_round",
    "dirichlet_partition",
    "label_entropy",
    "learning_rate",
    "local_train",
    "make_task",
    "run_baseline_round",
    "run_dense_round",
    "run_fediac_round",
]
