"""End-to-end experiment runs.

The logit-exchange method runs under a deterministic event-driven scheduler:
each client completes a training round every `speed` simulated seconds, and
the server handles one completion at a time (receive update, recompute
averages, reply to that client). Fast clients never wait for stragglers.
The weight-averaging and public-distillation baselines run in synchronous
rounds paced by the slowest client; the isolated baseline shares the
asynchronous loop with exchange switched off.
"""
from __future__ import annotations

import csv
import heapq
import io
from dataclasses import dataclass, field

import numpy as np

from .data import (
    Dataset,
    Partition,
    gen_synthetic,
    load_idx,
    partition_iid,
    sample_batch,
    subtract_mean,
)
from .nn import (
    AdamState,
    Model,
    ModelSpec,
    cross_entropy,
    forward,
    init_model,
    logit_loss,
    backward,
    optimizer_step,
    param_count,
    predict,
)
from .protocol import (
    ClassLogitAccumulator,
    CommLedger,
    Method,
    ServerLogitStore,
    comm_cost,
)
from .seeds import derive_rng, derive_seed
from .trainer import ClientState, client_round, train_private_batch

EVENT_CLIENT_FINISHES = 0
EVENT_EVALUATE = 1


class ConfigError(ValueError):
    """Invalid experiment configuration; raised before any training starts."""


@dataclass
class SimEvent:
    """Queue entry; events pop in (time, sequence) order so simultaneous
    completions resolve deterministically in scheduling order."""

    time: float
    seq: int
    kind: int
    client: int = -1


class EventQueue:
    def __init__(self):
        self._heap: list[tuple[float, int, SimEvent]] = []
        self._next_seq = 0

    def schedule(self, time: float, kind: int, client: int = -1) -> None:
        ev = SimEvent(time=time, seq=self._next_seq, kind=kind, client=client)
        self._next_seq += 1
        heapq.heappush(self._heap, (ev.time, ev.seq, ev))

    def pop(self) -> SimEvent:
        return heapq.heappop(self._heap)[2]

    def __len__(self) -> int:
        return len(self._heap)


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # "synthetic" or "idx"
    class_count: int = 10
    input_dim: int = 784
    n_per_class: int = 100
    synthetic_std: float = 0.1
    test_fraction: float = 0.2
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    limit: int | None = None
    subtract_mean: bool = True


@dataclass
class ExperimentConfig:
    method: Method
    seed: int
    rounds: int
    client_specs: list[ModelSpec]
    client_speeds: list[float]
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    batch_size: int = 32
    inner_epochs: int = 3
    alpha: float = 1.0
    lr: float = 0.001
    eval_every: float = 10.0
    store_mode: str = "latest"
    n_public: int = 10

    @property
    def num_clients(self) -> int:
        return len(self.client_specs)

    def validate(self) -> None:
        self.method = Method(self.method)
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if not self.client_specs:
            raise ConfigError("at least one client spec is required")
        if len(self.client_specs) != len(self.client_speeds):
            raise ConfigError(
                f"{len(self.client_specs)} client specs but {len(self.client_speeds)} speeds"
            )
        if any(s <= 0 for s in self.client_speeds):
            raise ConfigError(f"client speeds must be positive, got {self.client_speeds}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.inner_epochs < 1:
            raise ConfigError(f"inner_epochs must be >= 1, got {self.inner_epochs}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.eval_every <= 0:
            raise ConfigError(f"eval_every must be positive, got {self.eval_every}")
        if self.store_mode not in ("latest", "append"):
            raise ConfigError(f"store_mode must be 'latest' or 'append', got {self.store_mode!r}")
        ds = self.dataset
        if ds.kind not in ("synthetic", "idx"):
            raise ConfigError(f"dataset.kind must be 'synthetic' or 'idx', got {ds.kind!r}")
        if ds.kind == "idx" and (not ds.images or not ds.labels):
            raise ConfigError("dataset.kind 'idx' requires dataset.images and dataset.labels")
        if ds.class_count < 2:
            raise ConfigError(f"dataset.class_count must be >= 2, got {ds.class_count}")
        if not 0.0 < ds.test_fraction < 1.0 and not (ds.test_images and ds.test_labels):
            raise ConfigError(
                f"dataset.test_fraction must be in (0, 1) unless test files are given, "
                f"got {ds.test_fraction}"
            )
        for k, spec in enumerate(self.client_specs):
            if spec.class_count != ds.class_count:
                raise ConfigError(
                    f"client {k}: spec has {spec.class_count} classes, "
                    f"dataset has {ds.class_count}"
                )
            if spec.input_dim != ds.input_dim:
                raise ConfigError(
                    f"client {k}: spec input width {spec.input_dim} != "
                    f"dataset input_dim {ds.input_dim}"
                )
        if self.method is Method.FEDAVG:
            offenders = [
                k for k, spec in enumerate(self.client_specs) if spec != self.client_specs[0]
            ]
            if offenders:
                raise ConfigError(
                    "fedavg requires homogeneous model specs; "
                    f"clients {offenders} differ from client 0"
                )
        if self.method is Method.FEDMD and self.n_public < 1:
            raise ConfigError(f"n_public must be >= 1, got {self.n_public}")


@dataclass
class MetricsRow:
    """One evaluation snapshot; also the CSV row schema (in field order)."""

    time: float
    round: int
    accuracies: list[float]
    mean_accuracy: float
    losses: list[float]
    comm_per_client: list[int]
    comm_total: int

    @staticmethod
    def csv_header(num_clients: int) -> list[str]:
        return (
            ["time", "round"]
            + [f"acc_{k}" for k in range(num_clients)]
            + ["mean_acc"]
            + [f"loss_{k}" for k in range(num_clients)]
            + [f"comm_{k}" for k in range(num_clients)]
            + ["comm_total"]
        )

    def to_csv_row(self) -> list:
        return (
            [self.time, self.round]
            + list(self.accuracies)
            + [self.mean_accuracy]
            + list(self.losses)
            + list(self.comm_per_client)
            + [self.comm_total]
        )


@dataclass
class RunResult:
    method: Method
    rows: list[MetricsRow]
    ledger: CommLedger
    clients: list[ClientState]
    per_client_rounds: list[int]
    test: Dataset
    train_loss_curve: list[float] = field(default_factory=list)  # fedavg only

    @property
    def final_accuracies(self) -> list[float]:
        return self.rows[-1].accuracies

    @property
    def final_mean_accuracy(self) -> float:
        return self.rows[-1].mean_accuracy


def metrics_to_csv(rows: list[MetricsRow], num_clients: int) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MetricsRow.csv_header(num_clients))
    for row in rows:
        writer.writerow(row.to_csv_row())
    return buf.getvalue()


def evaluate(models: list[Model], test: Dataset) -> np.ndarray:
    """Fraction of correct argmax predictions per model, dropout off."""
    accs = np.empty(len(models))
    for i, model in enumerate(models):
        preds = predict(forward(model, test.xs, train_mode=False))
        accs[i] = float(np.mean(preds == test.ys))
    return accs


def prepare_data(cfg: ExperimentConfig) -> tuple[Partition, Dataset, Dataset | None]:
    """Build (per-client training partition, test set, public set).

    The public set (10% of the training pool, only for the public-distillation
    baseline) is held out before mean subtraction and partitioning; the
    feature mean is computed on the remaining training pool and applied to
    every split."""
    ds = cfg.dataset
    root = cfg.seed
    if ds.kind == "synthetic":
        n_test = max(1, round(ds.n_per_class * ds.test_fraction))
        train = gen_synthetic(
            ds.class_count, ds.input_dim, ds.n_per_class,
            derive_seed(root, "data"), std=ds.synthetic_std,
        )
        test = gen_synthetic(
            ds.class_count, ds.input_dim, n_test,
            derive_seed(root, "data-test"), std=ds.synthetic_std,
        )
    else:
        train = load_idx(ds.images, ds.labels, class_count=ds.class_count)
        if train.input_dim != ds.input_dim:
            raise ConfigError(
                f"dataset.input_dim is {ds.input_dim} but {ds.images} has {train.input_dim}"
            )
        if ds.test_images and ds.test_labels:
            test = load_idx(ds.test_images, ds.test_labels, class_count=ds.class_count)
        else:
            perm = derive_rng(root, "test-split").permutation(len(train))
            n_test = round(len(train) * ds.test_fraction)
            test = train.subset(perm[:n_test])
            train = train.subset(perm[n_test:])

    if ds.limit is not None and len(train) > ds.limit:
        perm = derive_rng(root, "subset").permutation(len(train))
        train = train.subset(perm[: ds.limit])

    public = None
    if cfg.method is Method.FEDMD:
        n_pub = max(1, len(train) // 10)
        perm = derive_rng(root, "public-split").permutation(len(train))
        public = train.subset(perm[:n_pub])
        train = train.subset(perm[n_pub:])
        if cfg.n_public > len(public):
            raise ConfigError(
                f"n_public {cfg.n_public} exceeds public set size {len(public)}"
            )

    if ds.subtract_mean:
        others = [test] + ([public] if public is not None else [])
        train, centered, _ = subtract_mean(train, others)
        test = centered[0]
        if public is not None:
            public = centered[1]

    partition = partition_iid(train, cfg.num_clients, derive_seed(root, "partition"))
    if cfg.batch_size > min(partition.sizes):
        raise ConfigError(
            f"batch_size {cfg.batch_size} exceeds smallest client dataset "
            f"({min(partition.sizes)} samples)"
        )
    return partition, test, public


def make_clients(cfg: ExperimentConfig, partition: Partition) -> list[ClientState]:
    clients = []
    for k, spec in enumerate(cfg.client_specs):
        clients.append(
            ClientState(
                id=k,
                model=init_model(spec, derive_rng(cfg.seed, "init", k)),
                dataset=partition.clients[k],
                accumulator=ClassLogitAccumulator(k, spec.class_count),
                avg_logits=None,
                rng=derive_rng(cfg.seed, "client-train", k),
                speed=cfg.client_speeds[k],
            )
        )
    return clients


def _snapshot_row(
    t: float,
    round_index: int,
    clients: list[ClientState],
    test: Dataset,
    ledger: CommLedger,
    last_losses: list[float],
) -> MetricsRow:
    accs = evaluate([cs.model for cs in clients], test)
    comm = [ledger.client_total(cs.id) for cs in clients]
    return MetricsRow(
        time=t,
        round=round_index,
        accuracies=[float(a) for a in accs],
        mean_accuracy=float(accs.mean()),
        losses=list(last_losses),
        comm_per_client=comm,
        comm_total=sum(comm),
    )


def _run_async(cfg: ExperimentConfig, exchange: bool) -> RunResult:
    """Event loop shared by the logit-exchange method and the isolated
    baseline (exchange off). Processes exactly cfg.rounds client completions;
    the completion handler uploads the client's update, refreshes the served
    averages, and replies to that same client."""
    partition, test, _ = prepare_data(cfg)
    clients = make_clients(cfg, partition)
    C = cfg.dataset.class_count
    store = ServerLogitStore(C, cfg.store_mode)
    ledger = CommLedger(cfg.method)
    queue = EventQueue()
    for cs in clients:
        queue.schedule(cs.speed, EVENT_CLIENT_FINISHES, cs.id)
    queue.schedule(cfg.eval_every, EVENT_EVALUATE)

    rows: list[MetricsRow] = []
    per_client_rounds = [0] * cfg.num_clients
    last_losses = [0.0] * cfg.num_clients
    events_done = 0
    t = 0.0
    while events_done < cfg.rounds:
        ev = queue.pop()
        t = ev.time
        if ev.kind == EVENT_EVALUATE:
            rows.append(_snapshot_row(t, events_done, clients, test, ledger, last_losses))
            queue.schedule(t + cfg.eval_every, EVENT_EVALUATE)
            continue
        cs = clients[ev.client]
        rnd = per_client_rounds[cs.id]
        update, report = client_round(
            cs,
            cs.avg_logits if exchange else None,
            cfg.inner_epochs,
            cfg.batch_size,
            cfg.alpha,
            lr=cfg.lr,
            round_index=rnd,
            transmit=exchange,
        )
        per_client_rounds[cs.id] += 1
        last_losses[cs.id] = report.mean_private_loss + cfg.alpha * report.mean_logit_loss
        if exchange:
            store.receive(update)
            ledger.charge(cs.id, rnd, "logits_up", update.wire_floats)
            averages = store.average()
            cs.avg_logits = averages
            ledger.charge(cs.id, rnd, "logits_down", len(averages) * (C + 1))
        events_done += 1
        queue.schedule(t + cs.speed, EVENT_CLIENT_FINISHES, cs.id)

    rows.append(_snapshot_row(t, events_done, clients, test, ledger, last_losses))
    return RunResult(cfg.method, rows, ledger, clients, per_client_rounds, test)


def run_fedhe(cfg: ExperimentConfig) -> RunResult:
    """Asynchronous logit exchange. With alpha == 0 the distillation term has
    zero weight, so the exchange is elided entirely and the run degenerates to
    the isolated baseline, ledger included."""
    cfg.validate()
    if cfg.method is not Method.FEDHE:
        raise ConfigError(f"run_fedhe called with method {cfg.method}")
    return _run_async(cfg, exchange=cfg.alpha != 0.0)


def run_private(cfg: ExperimentConfig) -> RunResult:
    """Isolated training: same event loop, no server interaction, zero ledger."""
    cfg.validate()
    if cfg.method is not Method.PRIVATE:
        raise ConfigError(f"run_private called with method {cfg.method}")
    return _run_async(cfg, exchange=False)


def aggregate_weighted(
    models: list[Model], sizes: list[int]
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Dataset-size-weighted mean of client parameters: sum_k (n_k / N) w_k,
    accumulated in client order."""
    total = sum(sizes)
    ws = [np.zeros_like(w) for w in models[0].weights]
    bs = [np.zeros_like(b) for b in models[0].biases]
    for model, n in zip(models, sizes):
        frac = n / total
        for i, w in enumerate(model.weights):
            ws[i] += frac * w
        for i, b in enumerate(model.biases):
            bs[i] += frac * b
    return ws, bs


def _model_from_params(
    spec: ModelSpec, weights: list[np.ndarray], biases: list[np.ndarray]
) -> Model:
    # fresh optimizer state: local moments are meaningless after a broadcast
    return Model(
        spec=spec,
        weights=[w.copy() for w in weights],
        biases=[b.copy() for b in biases],
        opt=AdamState(
            m_w=[np.zeros_like(w) for w in weights],
            v_w=[np.zeros_like(w) for w in weights],
            m_b=[np.zeros_like(b) for b in biases],
            v_b=[np.zeros_like(b) for b in biases],
        ),
    )


def _global_train_loss(model: Model, partition: Partition) -> float:
    """Size-weighted mean cross-entropy over the whole training pool."""
    total_loss = 0.0
    total_n = 0
    for d in partition.clients:
        losses, _ = cross_entropy(forward(model, d.xs), d.ys)
        total_loss += float(losses.sum())
        total_n += len(d)
    return total_loss / total_n


def run_fedavg(cfg: ExperimentConfig) -> RunResult:
    """Synchronous weight averaging: broadcast the global model, let every
    client train locally, replace the global weights with the size-weighted
    mean. Rounds are paced by the slowest client."""
    cfg.validate()
    if cfg.method is not Method.FEDAVG:
        raise ConfigError(f"run_fedavg called with method {cfg.method}")
    partition, test, _ = prepare_data(cfg)
    clients = make_clients(cfg, partition)
    spec = cfg.client_specs[0]
    cost = param_count(spec)
    global_model = init_model(spec, derive_rng(cfg.seed, "init-global"))
    ledger = CommLedger(cfg.method)
    sizes = partition.sizes

    rows: list[MetricsRow] = []
    last_losses = [0.0] * cfg.num_clients
    loss_curve = [_global_train_loss(global_model, partition)]
    round_time = max(cfg.client_speeds)
    t = 0.0
    next_eval = cfg.eval_every
    for r in range(cfg.rounds):
        for cs in clients:
            cs.model = _model_from_params(spec, global_model.weights, global_model.biases)
            ledger.charge(cs.id, r, "weights_down", cost)
            batch_losses = []
            for _ in range(cfg.inner_epochs):
                batch = sample_batch(cs.dataset, cfg.batch_size, cs.rng)
                loss, _ = train_private_batch(cs, batch, lr=cfg.lr)
                batch_losses.append(loss)
            last_losses[cs.id] = float(np.mean(batch_losses))
            ledger.charge(cs.id, r, "weights_up", cost)
        ws, bs = aggregate_weighted([cs.model for cs in clients], sizes)
        global_model = _model_from_params(spec, ws, bs)
        # every client ends the round holding the aggregate
        for cs in clients:
            cs.model = _model_from_params(spec, ws, bs)
        loss_curve.append(_global_train_loss(global_model, partition))
        t += round_time
        if t >= next_eval:
            rows.append(_snapshot_row(t, r + 1, clients, test, ledger, last_losses))
            while next_eval <= t:
                next_eval += cfg.eval_every

    rows.append(_snapshot_row(t, cfg.rounds, clients, test, ledger, last_losses))
    return RunResult(
        cfg.method, rows, ledger, clients, [cfg.rounds] * cfg.num_clients, test, loss_curve
    )


def public_consensus(models: list[Model], xs_public: np.ndarray):
    """Eval-mode logits of every model on the shared public instances, plus
    their per-instance mean -- the target every client distils toward."""
    traces = [forward(m, xs_public, train_mode=False) for m in models]
    return traces, np.mean([t.logits for t in traces], axis=0)


def run_fedmd_lite(cfg: ExperimentConfig) -> RunResult:
    """Public-dataset consensus baseline, simplified: no pretraining phase.
    Each synchronous round, every client publishes eval-mode logits on the
    same sampled public instances, takes one step toward the per-instance
    consensus mean, then runs its private batches."""
    cfg.validate()
    if cfg.method is not Method.FEDMD:
        raise ConfigError(f"run_fedmd_lite called with method {cfg.method}")
    partition, test, public = prepare_data(cfg)
    clients = make_clients(cfg, partition)
    ledger = CommLedger(cfg.method)
    rng_pub = derive_rng(cfg.seed, "public-draw")
    n = cfg.n_public
    input_dim = cfg.dataset.input_dim
    C = cfg.dataset.class_count

    rows: list[MetricsRow] = []
    last_losses = [0.0] * cfg.num_clients
    round_time = max(cfg.client_speeds)
    t = 0.0
    next_eval = cfg.eval_every
    for r in range(cfg.rounds):
        idx = rng_pub.choice(len(public), size=n, replace=False)
        traces, consensus = public_consensus([cs.model for cs in clients], public.xs[idx])
        for cs, trace in zip(clients, traces):
            ledger.charge(cs.id, r, "public_fetch", n * input_dim)
            ledger.charge(cs.id, r, "logits_up", n * C)
            _, grads = logit_loss(trace.logits, consensus)
            params = backward(cs.model, trace, grads / n)
            optimizer_step(cs.model, params, cfg.lr)
            batch_losses = []
            for _ in range(cfg.inner_epochs):
                batch = sample_batch(cs.dataset, cfg.batch_size, cs.rng)
                loss, _ = train_private_batch(cs, batch, lr=cfg.lr)
                batch_losses.append(loss)
            last_losses[cs.id] = float(np.mean(batch_losses))
        t += round_time
        if t >= next_eval:
            rows.append(_snapshot_row(t, r + 1, clients, test, ledger, last_losses))
            while next_eval <= t:
                next_eval += cfg.eval_every

    rows.append(_snapshot_row(t, cfg.rounds, clients, test, ledger, last_losses))
    return RunResult(
        cfg.method, rows, ledger, clients, [cfg.rounds] * cfg.num_clients, test
    )


RUNNERS = {
    Method.FEDHE: run_fedhe,
    Method.FEDAVG: run_fedavg,
    Method.FEDMD: run_fedmd_lite,
    Method.PRIVATE: run_private,
}


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    cfg.validate()
    return RUNNERS[cfg.method](cfg)


def tabulated_cost(cfg: ExperimentConfig) -> int:
    """Per-client per-round floats for this config, as tabulated per method."""
    if cfg.method is Method.FEDAVG:
        return comm_cost(cfg.method, param_count=param_count(cfg.client_specs[0]))
    return comm_cost(
        cfg.method,
        class_count=cfg.dataset.class_count,
        input_dim=cfg.dataset.input_dim,
        n_public=cfg.n_public,
    )
