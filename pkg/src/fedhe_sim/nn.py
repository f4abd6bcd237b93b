"""Minimal dense-network engine: forward pass exposing pre-softmax logits,
manual backprop, cross-entropy and logit-matching losses, Adam updates.

Inputs are 1-D sample vectors or 2-D (batch, features) arrays; all math is
float64. The logit vector (input of the softmax layer) is the unit of
knowledge the rest of the simulator exchanges, so `forward` always surfaces
it alongside the probabilities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Activation(str, Enum):
    RELU = "relu"
    TANH = "tanh"


class ShapeError(ValueError):
    """Input, target, or gradient does not match the model's dimensions."""


class StaleTraceError(RuntimeError):
    """backward() was handed a trace that this model's forward did not just produce."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: layer widths (input first, classes last),
    activation for hidden layers, and inverted-dropout rate."""

    layer_widths: tuple[int, ...]
    activation: Activation = Activation.RELU
    dropout_rate: float = 0.0
    class_count: int = 0  # 0 means "take the last layer width"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activation", Activation(self.activation))
        if len(widths) < 2:
            raise ValueError(f"need at least 2 layer widths, got {widths}")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.class_count == 0:
            object.__setattr__(self, "class_count", widths[-1])
        if self.class_count != widths[-1]:
            raise ValueError(
                f"class_count {self.class_count} != last layer width {widths[-1]}"
            )

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def num_linear(self) -> int:
        return len(self.layer_widths) - 1


def param_count(spec: ModelSpec) -> int:
    """Total floats in the weight matrices and bias vectors of a spec."""
    widths = spec.layer_widths
    return sum(widths[l] * widths[l + 1] + widths[l + 1] for l in range(len(widths) - 1))


@dataclass
class AdamState:
    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    t: int = 0


@dataclass
class Model:
    """A spec plus its weight matrices (layer l: widths[l] x widths[l+1]),
    bias vectors, and optimizer moment buffers. Single-owner: never shared
    between clients."""

    spec: ModelSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    opt: AdamState
    version: int = 0  # bumped on every optimizer step; used to detect stale traces


def init_model(spec: ModelSpec, rng: np.random.Generator) -> Model:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases, zero moments."""
    weights, biases = [], []
    for l in range(spec.num_linear):
        n_in, n_out = spec.layer_widths[l], spec.layer_widths[l + 1]
        limit = math.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    opt = AdamState(
        m_w=[np.zeros_like(w) for w in weights],
        v_w=[np.zeros_like(w) for w in weights],
        m_b=[np.zeros_like(b) for b in biases],
        v_b=[np.zeros_like(b) for b in biases],
    )
    return Model(spec=spec, weights=weights, biases=biases, opt=opt)


def clone_model(model: Model) -> Model:
    """Deep copy; the clone owns fresh buffers."""
    return Model(
        spec=model.spec,
        weights=[w.copy() for w in model.weights],
        biases=[b.copy() for b in model.biases],
        opt=AdamState(
            m_w=[a.copy() for a in model.opt.m_w],
            v_w=[a.copy() for a in model.opt.v_w],
            m_b=[a.copy() for a in model.opt.m_b],
            v_b=[a.copy() for a in model.opt.v_b],
            t=model.opt.t,
        ),
        version=model.version,
    )


@dataclass
class ForwardTrace:
    """Logits and probabilities for one input (or batch), plus the cached
    activations backward() needs. Traces are tied to the producing model's
    version and go stale after an optimizer step."""

    logits: np.ndarray
    probabilities: np.ndarray
    linear_inputs: list[np.ndarray] = field(default_factory=list)
    act_outputs: list[np.ndarray] = field(default_factory=list)
    drop_scales: list[np.ndarray | None] = field(default_factory=list)
    train_mode: bool = False
    model_id: int | None = None
    model_version: int = -1
    single: bool = True

    @classmethod
    def from_logits(cls, logits) -> "ForwardTrace":
        """Loss/predict-only trace around raw logits (cannot be backpropagated)."""
        arr = np.asarray(logits, dtype=np.float64)
        if arr.ndim not in (1, 2):
            raise ShapeError(f"logits must be 1-D or 2-D, got shape {arr.shape}")
        return cls(logits=arr, probabilities=softmax(arr), single=arr.ndim == 1)

    @property
    def class_count(self) -> int:
        return self.logits.shape[-1]


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax (max subtracted before exponentiation)."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")


def _activate(spec: ModelSpec, z: np.ndarray) -> np.ndarray:
    if spec.activation is Activation.RELU:
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(spec: ModelSpec, a: np.ndarray) -> np.ndarray:
    # derivative expressed through the activation output a = act(z)
    if spec.activation is Activation.RELU:
        return (a > 0.0).astype(np.float64)
    return 1.0 - a * a


def forward(
    model: Model,
    x: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardTrace:
    """Run the network on x (shape (input_dim,) or (batch, input_dim)).

    Returns the pre-softmax logits and their softmax probabilities. Inverted
    dropout is applied to hidden activations only when train_mode is set, in
    which case an rng must be provided for any spec with dropout_rate > 0.
    """
    spec = model.spec
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if arr.ndim not in (1, 2):
        raise ShapeError(f"input must be 1-D or 2-D, got shape {arr.shape}")
    X = arr[None, :] if single else arr
    if X.shape[1] != spec.input_dim:
        raise ShapeError(f"input has {X.shape[1]} features, model expects {spec.input_dim}")
    _check_finite("input", X)

    rate = spec.dropout_rate
    if train_mode and rate > 0.0 and rng is None:
        raise ValueError("train_mode forward with dropout needs an rng")

    linear_inputs: list[np.ndarray] = []
    act_outputs: list[np.ndarray] = []
    drop_scales: list[np.ndarray | None] = []
    a = X
    for l in range(spec.num_linear - 1):
        linear_inputs.append(a)
        h = _activate(spec, a @ model.weights[l] + model.biases[l])
        act_outputs.append(h)
        if train_mode and rate > 0.0:
            keep = (rng.random(h.shape) >= rate) / (1.0 - rate)
            drop_scales.append(keep)
            a = h * keep
        else:
            drop_scales.append(None)
            a = h
    linear_inputs.append(a)
    logits = a @ model.weights[-1] + model.biases[-1]
    _check_finite("logits", logits)
    probs = softmax(logits)

    return ForwardTrace(
        logits=logits[0] if single else logits,
        probabilities=probs[0] if single else probs,
        linear_inputs=linear_inputs,
        act_outputs=act_outputs,
        drop_scales=drop_scales,
        train_mode=train_mode,
        model_id=id(model),
        model_version=model.version,
        single=single,
    )


def predict(trace: ForwardTrace):
    """Class index with the highest probability; ties go to the lowest index."""
    return int(np.argmax(trace.probabilities)) if trace.single else np.argmax(
        trace.probabilities, axis=-1
    )


def cross_entropy(trace: ForwardTrace, label):
    """-log p[label], with gradient (probabilities - onehot) w.r.t. the logits.

    For a batch trace, `label` is an int array and the returned loss/gradient
    are per-row. Computed via log-sum-exp so the loss stays finite even when
    the labelled probability underflows to zero.
    """
    logits = np.atleast_2d(trace.logits)
    C = logits.shape[-1]
    labels = np.atleast_1d(np.asarray(label, dtype=np.intp))
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {logits.shape[0]} rows")
    if ((labels < 0) | (labels >= C)).any():
        raise ValueError(f"label out of range [0, {C})")

    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(logits.shape[0])
    losses = lse - shifted[rows, labels]
    grads = np.atleast_2d(trace.probabilities).copy()
    grads[rows, labels] -= 1.0

    if trace.single:
        return float(losses[0]), grads[0]
    return losses, grads


def logit_loss(p: np.ndarray, p_target: np.ndarray):
    """Mean squared error between raw logit vectors: (1/C) sum (p - t)^2,
    gradient (2/C)(p - t) w.r.t. p. Batched row-wise when given 2-D arrays."""
    a = np.asarray(p, dtype=np.float64)
    t = np.asarray(p_target, dtype=np.float64)
    if a.shape != t.shape:
        raise ShapeError(f"logit shapes differ: {a.shape} vs {t.shape}")
    C = a.shape[-1]
    diff = a - t
    loss = (diff * diff).mean(axis=-1)
    grad = (2.0 / C) * diff
    if a.ndim == 1:
        return float(loss), grad
    return loss, grad


@dataclass
class Gradients:
    """Per-parameter gradients; shapes mirror Model.weights / Model.biases.
    backward() treats its input as d(sum of per-row losses)/d(logits), so
    mean-over-batch objectives are handled by pre-scaling that input."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]


def backward(model: Model, trace: ForwardTrace, loss_grad_at_logits: np.ndarray) -> Gradients:
    """Backpropagate a gradient at the logits through the cached trace."""
    if trace.model_id != id(model) or trace.model_version != model.version:
        raise StaleTraceError("trace was not produced by this model's current forward")
    g = np.asarray(loss_grad_at_logits, dtype=np.float64)
    if g.shape != trace.logits.shape:
        raise ShapeError(f"loss gradient shape {g.shape} != logits shape {trace.logits.shape}")

    down = np.atleast_2d(g)
    L = model.spec.num_linear
    gw: list[np.ndarray] = [None] * L  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * L  # type: ignore[list-item]
    for l in range(L - 1, -1, -1):
        gw[l] = trace.linear_inputs[l].T @ down
        gb[l] = down.sum(axis=0)
        if l > 0:
            down = down @ model.weights[l].T
            scale = trace.drop_scales[l - 1]
            if scale is not None:
                down = down * scale
            down = down * _activation_grad(model.spec, trace.act_outputs[l - 1])
    return Gradients(weights=gw, biases=gb)


def optimizer_step(model: Model, grads: Gradients, lr: float) -> Model:
    """One in-place Adam step (beta1=0.9, beta2=0.999, eps=1e-8)."""
    opt = model.opt
    if len(grads.weights) != len(model.weights) or len(grads.biases) != len(model.biases):
        raise ShapeError(
            f"gradients cover {len(grads.weights)}+{len(grads.biases)} parameter groups, "
            f"model has {len(model.weights)}+{len(model.biases)}"
        )
    for g, p in zip(grads.weights + grads.biases, model.weights + model.biases):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        _check_finite("gradient", g)
    opt.t += 1
    bc1 = 1.0 - ADAM_BETA1**opt.t
    bc2 = 1.0 - ADAM_BETA2**opt.t
    for params, gs, ms, vs in (
        (model.weights, grads.weights, opt.m_w, opt.v_w),
        (model.biases, grads.biases, opt.m_b, opt.v_b),
    ):
        for p, g, m, v in zip(params, gs, ms, vs):
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * (g * g)
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
            _check_finite("updated parameter", p)
    model.version += 1
    return model
