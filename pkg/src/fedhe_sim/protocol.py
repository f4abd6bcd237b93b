"""Knowledge-exchange protocol: client-side per-class logit accumulation,
the server's per-class logit store and averaging, and the communication-cost
ledger.

Wire unit: a client sends, per class, the pair (logit vector, class label) --
C+1 floats. A full update covering all C classes is C*(C+1) floats, which is
what makes the method cheap next to shipping model weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class Method(str, Enum):
    FEDHE = "fedhe"
    FEDAVG = "fedavg"
    FEDMD = "fedmd"
    PRIVATE = "private"


class AccumulatorConsumedError(RuntimeError):
    """finalize() called twice without new logits in between."""


@dataclass
class LogitUpdate:
    """One client's transmission: per class, the averaged logit vector, plus
    the instance counts behind each average (diagnostic, not on the wire)."""

    client_id: int
    class_count: int
    labels: np.ndarray  # (m,) class indices present in this update
    values: np.ndarray  # (m, class_count) one logit vector per label
    counts: np.ndarray  # (m,) instances that contributed to each vector

    @property
    def wire_floats(self) -> int:
        # each (vector, label) pair costs class_count + 1 floats
        return len(self.labels) * (self.class_count + 1)

    def to_csv_rows(self, round_index: int) -> list[list]:
        """One row per class: round, client, y, V, then the logit values."""
        return [
            [round_index, self.client_id, int(y), int(v), *map(float, vec)]
            for y, v, vec in zip(self.labels, self.counts, self.values)
        ]


class ClassLogitAccumulator:
    """Running per-class sums of training logits on one client.

    accumulate() adds a batch; finalize() divides each class sum by
    (count + 1) -- the +1 keeps classes the client never saw well-defined,
    they simply come out as zero vectors -- then resets the sums. A second
    finalize() without fresh data raises.
    """

    def __init__(self, client_id: int, class_count: int):
        self.client_id = client_id
        self.class_count = class_count
        self._sums = np.zeros((class_count, class_count))
        self._counts = np.zeros(class_count, dtype=np.int64)
        self._consumed = False

    @property
    def counts(self) -> np.ndarray:
        return self._counts.copy()

    @property
    def sums(self) -> np.ndarray:
        return self._sums.copy()

    def accumulate(self, logits: np.ndarray, labels: np.ndarray) -> None:
        logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
        labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
        if len(labels) == 0:
            return
        if logits.shape != (len(labels), self.class_count):
            raise ValueError(
                f"expected logits ({len(labels)}, {self.class_count}), got {logits.shape}"
            )
        if ((labels < 0) | (labels >= self.class_count)).any():
            raise ValueError(f"labels out of range [0, {self.class_count})")
        np.add.at(self._sums, labels, logits)
        np.add.at(self._counts, labels, 1)
        self._consumed = False

    def finalize(self) -> LogitUpdate:
        if self._consumed:
            raise AccumulatorConsumedError(
                f"client {self.client_id}: accumulator already finalized"
            )
        values = self._sums / (self._counts + 1)[:, None]
        update = LogitUpdate(
            client_id=self.client_id,
            class_count=self.class_count,
            labels=np.arange(self.class_count),
            values=values,
            counts=self._counts.copy(),
        )
        self._sums = np.zeros_like(self._sums)
        self._counts = np.zeros_like(self._counts)
        self._consumed = True
        return update


# Per-class average logits served by the store; classes with no entries are absent.
AverageLogits = dict[int, np.ndarray]


class ServerLogitStore:
    """The server's per-class memory of client logit vectors.

    "latest" mode (default) keeps one vector per (client, class) and replaces
    it on each new update, so memory is bounded and every client weighs
    equally. "append" mode keeps every received vector.

    receive() and average() may be interleaved in any serialized order; each
    call is atomic with respect to the store (receive validates everything
    before mutating), and no ordering between clients is assumed.
    """

    def __init__(self, class_count: int, mode: str = "latest"):
        if mode not in ("latest", "append"):
            raise ValueError(f"store mode must be 'latest' or 'append', got {mode!r}")
        self.class_count = class_count
        self.mode = mode
        self._latest: list[dict[int, np.ndarray]] = [dict() for _ in range(class_count)]
        self._appended: list[list[np.ndarray]] = [[] for _ in range(class_count)]

    def receive(self, update: LogitUpdate) -> None:
        """Store an update; validates fully before touching state."""
        labels = np.asarray(update.labels)
        values = np.asarray(update.values, dtype=np.float64)
        if values.shape != (len(labels), self.class_count):
            raise ValueError(
                f"update values shape {values.shape} != ({len(labels)}, {self.class_count})"
            )
        if len(labels) and ((labels < 0) | (labels >= self.class_count)).any():
            raise ValueError(f"update labels out of range [0, {self.class_count})")
        if len(np.unique(labels)) != len(labels):
            raise ValueError("update repeats a class label")
        if not np.isfinite(values).all():
            raise ValueError("update contains non-finite logits")
        for y, vec in zip(labels, values):
            if self.mode == "latest":
                self._latest[int(y)][update.client_id] = vec.copy()
            else:
                self._appended[int(y)].append(vec.copy())

    def entries(self, y: int) -> list[np.ndarray]:
        """Stored vectors for class y (client-id order in latest mode)."""
        if self.mode == "latest":
            return [self._latest[y][k] for k in sorted(self._latest[y])]
        return list(self._appended[y])

    def average(self) -> AverageLogits:
        """Arithmetic mean per non-empty class. In latest mode the sum runs in
        client-id order, so the result is independent of arrival order."""
        out: AverageLogits = {}
        for y in range(self.class_count):
            vecs = self.entries(y)
            if vecs:
                out[y] = np.mean(vecs, axis=0)
        return out


@dataclass
class LedgerEntry:
    client: int
    round: int
    kind: str
    floats: int


@dataclass
class CommLedger:
    """Exact count of floats transmitted, per (client, round, message kind)."""

    method: Method
    entries: list[LedgerEntry] = field(default_factory=list)

    def charge(self, client: int, round_index: int, kind: str, floats: int) -> None:
        if floats < 0 or floats != int(floats):
            raise ValueError(f"floats must be a non-negative integer, got {floats}")
        self.entries.append(LedgerEntry(client, round_index, kind, int(floats)))

    def total(self) -> int:
        return sum(e.floats for e in self.entries)

    def client_total(self, client: int) -> int:
        return sum(e.floats for e in self.entries if e.client == client)

    def kind_total(self, kind: str, client: int | None = None) -> int:
        return sum(
            e.floats
            for e in self.entries
            if e.kind == kind and (client is None or e.client == client)
        )


def comm_cost(
    method: str | Method,
    *,
    class_count: int | None = None,
    input_dim: int | None = None,
    param_count: int | None = None,
    n_public: int | None = None,
) -> int:
    """Floats per client per round as tabulated for each method: the client
    upload for logit exchange and weight exchange, upload plus public-sample
    fetch for public-dataset distillation, zero for isolated training."""
    m = Method(method)
    if m is Method.FEDHE:
        _require(class_count=class_count)
        return class_count * (class_count + 1)
    if m is Method.FEDAVG:
        _require(param_count=param_count)
        return param_count
    if m is Method.FEDMD:
        _require(class_count=class_count, input_dim=input_dim, n_public=n_public)
        return n_public * (class_count + input_dim)
    return 0  # Method.PRIVATE


def _require(**kwargs) -> None:
    missing = [k for k, v in kwargs.items() if v is None]
    if missing:
        raise ValueError(f"comm_cost missing parameters: {', '.join(missing)}")


def reduced_rate(method_cost: float, fedavg_cost: float) -> float:
    """Fraction of the weight-exchange cost saved: 1 - method/baseline."""
    if fedavg_cost <= 0:
        raise ValueError(f"baseline cost must be positive, got {fedavg_cost}")
    return 1.0 - method_cost / fedavg_cost
