"""Desk-scale federated learning simulator built around CEPAM."""

from .data import Dataset, load_dataset, load_mnist, partition_clients, read_idx, synthetic_clusters, write_idx
from .mlp import MlpArchitecture, GlobalModel, accuracy, forward, init_params, loss_and_grad
from .sim import (
    SCHEMES,
    ClientState,
    ClientUpload,
    ExperimentResult,
    RoundMetrics,
    TrainingConfig,
    clip_update,
    client_round,
    local_sgd,
    make_clients,
    partition,
    run_experiment,
    server_aggregate,
    summarize,
    unpartition,
    write_metrics_csv,
)
