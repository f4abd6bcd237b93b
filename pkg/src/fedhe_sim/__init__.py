"""Deterministic simulator of logit-exchange federated learning (FedHe) with
weight-averaging (FedAvg), public-distillation (FedMD), and isolated
(Private) baselines, plus an exact communication-cost ledger."""

from .data import Dataset, Partition, gen_synthetic, load_idx, partition_iid, sample_batch
from .nn import (
    Activation,
    ForwardTrace,
    Gradients,
    Model,
    ModelSpec,
    backward,
    cross_entropy,
    forward,
    init_model,
    logit_loss,
    optimizer_step,
    param_count,
    predict,
    softmax,
)
from .orchestrator import (
    ConfigError,
    DatasetConfig,
    ExperimentConfig,
    MetricsRow,
    RunResult,
    evaluate,
    run_experiment,
    run_fedavg,
    run_fedhe,
    run_fedmd_lite,
    run_private,
)
from .protocol import (
    AverageLogits,
    ClassLogitAccumulator,
    CommLedger,
    LogitUpdate,
    Method,
    ServerLogitStore,
    comm_cost,
    reduced_rate,
)
from .trainer import ClientState, TrainReport, client_round, train_combined_batch, train_private_batch

__version__ = "0.1.0"
