"""Client-side training: private cross-entropy steps, combined
private-plus-distillation steps against server-averaged logits, and the full
per-round client procedure (train, collect logits, emit an update).

Logits are collected from the same training-mode forward passes used for the
optimizer steps, so dropout noise ends up in the transmitted averages; that is
accepted and keeps each batch to a single forward.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, sample_batch
from .nn import Model, backward, cross_entropy, forward, logit_loss, optimizer_step
from .protocol import AverageLogits, ClassLogitAccumulator, LogitUpdate


@dataclass
class ClientState:
    """Everything one client owns: its model, private data, logit accumulator,
    the latest averages received from the server, its RNG stream, and its
    simulated seconds per round."""

    id: int
    model: Model
    dataset: Dataset
    accumulator: ClassLogitAccumulator
    avg_logits: AverageLogits | None
    rng: np.random.Generator
    speed: float

    def __post_init__(self):
        if self.speed <= 0:
            raise ValueError(f"client {self.id}: speed must be positive, got {self.speed}")
        if self.model.spec.class_count != self.dataset.class_count:
            raise ValueError(
                f"client {self.id}: model has {self.model.spec.class_count} classes, "
                f"dataset has {self.dataset.class_count}"
            )


@dataclass
class TrainReport:
    round_index: int
    mean_private_loss: float
    mean_logit_loss: float
    batches: int
    logits_transmitted: bool


def train_private_batch(
    cs: ClientState, batch: tuple[np.ndarray, np.ndarray], lr: float = 0.001
) -> tuple[float, float]:
    """One Adam step on the mean cross-entropy of the batch. The batch's
    training logits are folded into the client's accumulator as a side effect.
    Returns (mean private loss, 0.0)."""
    xs, ys = batch
    trace = forward(cs.model, xs, train_mode=True, rng=cs.rng)
    cs.accumulator.accumulate(trace.logits, ys)
    losses, grads = cross_entropy(trace, ys)
    params = backward(cs.model, trace, grads / len(ys))
    optimizer_step(cs.model, params, lr)
    return float(losses.mean()), 0.0


def train_combined_batch(
    cs: ClientState,
    batch: tuple[np.ndarray, np.ndarray],
    alpha: float,
    lr: float = 0.001,
) -> tuple[float, float]:
    """One Adam step on mean(cross-entropy + alpha * logit-matching) over the
    batch, matching each instance against the server average for its class.
    Instances whose class has no server average contribute cross-entropy only.
    Returns (mean private loss, mean logit loss)."""
    xs, ys = batch
    trace = forward(cs.model, xs, train_mode=True, rng=cs.rng)
    cs.accumulator.accumulate(trace.logits, ys)
    ce_losses, grads = cross_entropy(trace, ys)

    mean_logit = 0.0
    if alpha != 0.0 and cs.avg_logits:
        have = np.array([int(y) in cs.avg_logits for y in ys])
        if have.any():
            targets = np.stack([cs.avg_logits[int(y)] for y in ys[have]])
            ll, lg = logit_loss(trace.logits[have], targets)
            grads[have] += alpha * lg
            logit_losses = np.zeros(len(ys))
            logit_losses[have] = ll
            mean_logit = float(logit_losses.mean())

    params = backward(cs.model, trace, grads / len(ys))
    optimizer_step(cs.model, params, lr)
    return float(ce_losses.mean()), mean_logit


def client_round(
    cs: ClientState,
    avg: AverageLogits | None,
    inner_epochs: int,
    batch_size: int,
    alpha: float,
    lr: float = 0.001,
    round_index: int = 0,
    transmit: bool = True,
) -> tuple[LogitUpdate, TrainReport]:
    """One client round: train on inner_epochs sampled batches (combined steps
    once averages exist, private-only before that), then finalize the
    accumulator into a LogitUpdate. The accumulator is left empty."""
    if inner_epochs < 1:
        raise ValueError(f"inner_epochs must be >= 1, got {inner_epochs}")
    cs.avg_logits = avg
    private_losses, logit_losses = [], []
    for _ in range(inner_epochs):
        batch = sample_batch(cs.dataset, batch_size, cs.rng)
        if avg is not None:
            p, l = train_combined_batch(cs, batch, alpha, lr)
        else:
            p, l = train_private_batch(cs, batch, lr)
        private_losses.append(p)
        logit_losses.append(l)
    update = cs.accumulator.finalize()
    report = TrainReport(
        round_index=round_index,
        mean_private_loss=float(np.mean(private_losses)),
        mean_logit_loss=float(np.mean(logit_losses)),
        batches=inner_epochs,
        logits_transmitted=transmit,
    )
    return update, report
