"""Small ReLU MLP with hand-written forward/backward and SGD-momentum.

The backbone is a stack of affine+ReLU layers; the last rectified activation
is the *feature* vector (nonnegative by construction), and a bias-free linear
map ``classifier @ z`` produces logits. Backward is exact: it accepts
upstream gradients on the logits, on the features, or both, so alignment
losses (which act on features) and classification-style losses (which act on
logits) compose by superposition.

No autograd anywhere; every gradient in this package is checked against
central finite differences in the test suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Layer",
    "ModelParams",
    "ForwardTrace",
    "Gradients",
    "OptimizerState",
    "NonFiniteGradientError",
    "forward",
    "backward",
    "sgd_step",
    "entropy_loss",
    "cross_entropy_loss",
    "init_mlp",
    "save_checkpoint",
    "load_checkpoint",
]

_LOG_FLOOR = 1e-12
_CHECKPOINT_FORMAT_VERSION = 1


class NonFiniteGradientError(ValueError):
    """A gradient tensor contained NaN or inf; names the offending tensor."""


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("layer weight must be 2-d and bias 1-d")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("bias length must match weight rows")

    def copy(self) -> "Layer":
        return Layer(self.weight.copy(), self.bias.copy())


@dataclass
class ModelParams:
    """Backbone layers plus a bias-free ``(K, d)`` linear classifier."""

    layers: list[Layer]
    classifier: np.ndarray

    def __post_init__(self):
        self.classifier = np.asarray(self.classifier, dtype=np.float64)
        if self.classifier.ndim != 2:
            raise ValueError("classifier must be a (K, d) matrix")
        if not self.layers:
            raise ValueError("need at least one backbone layer")
        if self.classifier.shape[1] != self.layers[-1].weight.shape[0]:
            raise ValueError(
                "classifier input dim must match backbone output dim "
                f"({self.classifier.shape[1]} vs {self.layers[-1].weight.shape[0]})"
            )

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.classifier.shape[1]

    @property
    def n_classes(self) -> int:
        return self.classifier.shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams([l.copy() for l in self.layers], self.classifier.copy())


@dataclass
class ForwardTrace:
    """Per-layer activations cached for the exact backward pass."""

    inputs: np.ndarray
    pre_acts: list[np.ndarray]
    acts: list[np.ndarray]
    features: np.ndarray
    logits: np.ndarray
    posteriors: np.ndarray


@dataclass
class Gradients:
    """Same tree shape as :class:`ModelParams`."""

    layers: list[Layer]
    classifier: np.ndarray

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "Gradients":
        return cls(
            [Layer(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in params.layers],
            np.zeros_like(params.classifier),
        )

    def add_(self, other: "Gradients") -> "Gradients":
        for a, b in zip(self.layers, other.layers):
            a.weight += b.weight
            a.bias += b.bias
        self.classifier += other.classifier
        return self

    def scale_(self, c: float) -> "Gradients":
        for l in self.layers:
            l.weight *= c
            l.bias *= c
        self.classifier *= c
        return self


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(params: ModelParams, inputs: np.ndarray) -> ForwardTrace:
    """Run the network, caching everything backward needs.

    ``inputs`` is ``(n, input_dim)``; raises on dimension mismatch or
    non-finite entries. Posteriors use max-subtracted softmax.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(
            f"inputs must be (n, {params.input_dim}), got shape {x.shape}"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("inputs contain non-finite values")
    pre_acts, acts = [], []
    h = x
    for layer in params.layers:
        pre = h @ layer.weight.T + layer.bias
        h = np.maximum(pre, 0.0)
        pre_acts.append(pre)
        acts.append(h)
    features = acts[-1]
    logits = features @ params.classifier.T
    return ForwardTrace(x, pre_acts, acts, features, logits, _softmax(logits))


def backward(
    params: ModelParams,
    trace: ForwardTrace,
    d_logits: np.ndarray | None = None,
    d_features: np.ndarray | None = None,
) -> Gradients:
    """Exact parameter gradients for upstream logit and/or feature grads.

    Both contributions superpose: feature gradients from alignment losses
    enter at the top of the backbone, logit gradients additionally produce
    the classifier gradient. At least one of the two must be given.
    """
    if d_logits is None and d_features is None:
        raise ValueError("need d_logits and/or d_features")
    n = trace.features.shape[0]
    d_feat = np.zeros((n, params.feature_dim))
    d_classifier = np.zeros_like(params.classifier)
    if d_logits is not None:
        d_logits = np.asarray(d_logits, dtype=np.float64)
        if d_logits.shape != trace.logits.shape:
            raise ValueError("d_logits shape mismatch")
        d_classifier = d_logits.T @ trace.features
        d_feat += d_logits @ params.classifier
    if d_features is not None:
        d_features = np.asarray(d_features, dtype=np.float64)
        if d_features.shape != trace.features.shape:
            raise ValueError("d_features shape mismatch")
        d_feat += d_features

    grads = Gradients([None] * len(params.layers), d_classifier)  # type: ignore[list-item]
    d_act = d_feat
    for i in reversed(range(len(params.layers))):
        d_pre = d_act * (trace.pre_acts[i] > 0)
        below = trace.acts[i - 1] if i > 0 else trace.inputs
        grads.layers[i] = Layer(d_pre.T @ below, d_pre.sum(axis=0))
        d_act = d_pre @ params.layers[i].weight
    return grads


@dataclass
class OptimizerState:
    """SGD with momentum; velocity buffers are lazily shaped on first step.

    Update rule per tensor: ``g += weight_decay * p`` (if set), then
    ``v = momentum * v + g`` and ``p = p - lr * v``.
    """

    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: Gradients | None = field(default=None, repr=False)


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteGradientError(f"non-finite gradient in {name}")


def sgd_step(
    params: ModelParams, grads: Gradients, state: OptimizerState
) -> tuple[ModelParams, OptimizerState]:
    """One momentum step; returns fresh params, rejects non-finite grads."""
    if state.velocity is None:
        state.velocity = Gradients.zeros_like(params)
    for i, g in enumerate(grads.layers):
        _check_finite(g.weight, f"layer {i} weight")
        _check_finite(g.bias, f"layer {i} bias")
    _check_finite(grads.classifier, "classifier")

    def step(p, g, v):
        if state.weight_decay:
            g = g + state.weight_decay * p
        v_new = state.momentum * v + g
        return p - state.lr * v_new, v_new

    new_layers, new_vel_layers = [], []
    for p, g, v in zip(params.layers, grads.layers, state.velocity.layers):
        w, vw = step(p.weight, g.weight, v.weight)
        b, vb = step(p.bias, g.bias, v.bias)
        new_layers.append(Layer(w, b))
        new_vel_layers.append(Layer(vw, vb))
    c, vc = step(params.classifier, grads.classifier, state.velocity.classifier)
    state.velocity = Gradients(new_vel_layers, vc)
    return ModelParams(new_layers, c), state


def entropy_loss(trace: ForwardTrace) -> tuple[float, np.ndarray]:
    """Mean Shannon entropy of the posteriors, with exact logit gradients.

    Returns ``(value, d_logits)``. For one sample,
    ``dH/dl_j = -q_j (log q_j + H)``. Probabilities are floored at 1e-12
    inside the log only.
    """
    q = trace.posteriors
    logq = np.log(np.maximum(q, _LOG_FLOOR))
    per_sample = -(q * logq).sum(axis=1)
    n = q.shape[0]
    d_logits = -q * (logq + per_sample[:, None]) / n
    return float(per_sample.mean()), d_logits


def cross_entropy_loss(
    trace: ForwardTrace, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy against integer labels; ``(value, d_logits)``."""
    labels = np.asarray(labels)
    n, k = trace.posteriors.shape
    if labels.shape != (n,):
        raise ValueError("labels must be (n,) integers")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("label out of range")
    q = trace.posteriors
    picked = q[np.arange(n), labels]
    loss = float(-np.log(np.maximum(picked, _LOG_FLOOR)).mean())
    d_logits = q.copy()
    d_logits[np.arange(n), labels] -= 1.0
    return loss, d_logits / n


def init_mlp(
    rng: np.random.Generator,
    input_dim: int,
    hidden: tuple[int, ...],
    feature_dim: int,
    n_classes: int,
) -> ModelParams:
    """He-initialized backbone, zero biases, unit-variance-scaled classifier."""
    widths = [input_dim, *hidden, feature_dim]
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out)))
    classifier = rng.normal(0.0, np.sqrt(1.0 / feature_dim), size=(n_classes, feature_dim))
    return ModelParams(layers, classifier)


def save_checkpoint(params: ModelParams, path) -> None:
    """JSON checkpoint: layer shapes plus row-major weights (versioned)."""
    payload = {
        "format_version": _CHECKPOINT_FORMAT_VERSION,
        "layers": [
            {"weight": l.weight.tolist(), "bias": l.bias.tolist()}
            for l in params.layers
        ],
        "classifier": params.classifier.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> ModelParams:
    with open(path) as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != _CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version: {version}")
    layers = [
        Layer(np.array(l["weight"], dtype=float), np.array(l["bias"], dtype=float))
        for l in payload["layers"]
    ]
    return ModelParams(layers, np.array(payload["classifier"], dtype=float))
