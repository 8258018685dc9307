"""Learnable feature extractor + softmax instance classifier.

The extractor is a stack of affine maps with tanh between (one affine
layer by default, so it degenerates to a linear map). All math is plain
float64 numpy with hand-written gradients; losses hand their dL/dlogits
back through `softmax_vjp` and `backward` turns batched dL/dlogits into
parameter gradients.

Logs are clamped at EPS everywhere a probability enters one, and the
matching gradient indicator ([p >= EPS]) keeps analytic gradients
consistent with the clamped forward values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import CvmimlError, DatasetMeta
from .jsonio import dump_canonical

EPS = 1e-12


class CheckpointError(CvmimlError):
    """Raised when a checkpoint file is malformed or inconsistent."""


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax; accepts 1-D or 2-D input."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_vjp(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Pull dL/dprobs back to dL/dlogits through the softmax Jacobian."""
    inner = np.sum(dprobs * probs, axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def safe_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, EPS))


def dlog(p: np.ndarray) -> np.ndarray:
    """Derivative of the clamped log: 1/p above EPS, 0 in the clamped zone."""
    p = np.asarray(p)
    return np.where(p >= EPS, 1.0 / np.maximum(p, EPS), 0.0)


@dataclass
class ModelParams:
    """Extractor layer weights/biases plus the classifier head."""

    extractor_weights: tuple[np.ndarray, ...]
    extractor_biases: tuple[np.ndarray, ...]
    classifier_weight: np.ndarray
    classifier_bias: np.ndarray

    def __post_init__(self):
        self.extractor_weights = tuple(np.asarray(w, dtype=np.float64) for w in self.extractor_weights)
        self.extractor_biases = tuple(np.asarray(b, dtype=np.float64) for b in self.extractor_biases)
        self.classifier_weight = np.asarray(self.classifier_weight, dtype=np.float64)
        self.classifier_bias = np.asarray(self.classifier_bias, dtype=np.float64)
        if len(self.extractor_weights) != len(self.extractor_biases):
            raise ValueError("extractor weights/biases length mismatch")
        if not self.extractor_weights:
            raise ValueError("need at least one extractor layer")

    @property
    def input_dim(self) -> int:
        return self.extractor_weights[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.extractor_weights[-1].shape[1]

    @property
    def num_classes(self) -> int:
        return self.classifier_weight.shape[1]

    def blocks(self) -> list[tuple[str, np.ndarray]]:
        """Named parameter blocks, a stable order shared with Gradients."""
        out = []
        for k, (w, b) in enumerate(zip(self.extractor_weights, self.extractor_biases)):
            out.append((f"theta{k}", w))
            out.append((f"theta{k}_bias", b))
        out.append(("W", self.classifier_weight))
        out.append(("W_bias", self.classifier_bias))
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            tuple(w.copy() for w in self.extractor_weights),
            tuple(b.copy() for b in self.extractor_biases),
            self.classifier_weight.copy(),
            self.classifier_bias.copy(),
        )


@dataclass
class Gradients:
    """dL/dparams, mirroring the ModelParams block layout."""

    extractor_weights: tuple[np.ndarray, ...]
    extractor_biases: tuple[np.ndarray, ...]
    classifier_weight: np.ndarray
    classifier_bias: np.ndarray

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "Gradients":
        return cls(
            tuple(np.zeros_like(w) for w in params.extractor_weights),
            tuple(np.zeros_like(b) for b in params.extractor_biases),
            np.zeros_like(params.classifier_weight),
            np.zeros_like(params.classifier_bias),
        )

    def blocks(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for k, (w, b) in enumerate(zip(self.extractor_weights, self.extractor_biases)):
            out.append((f"theta{k}", w))
            out.append((f"theta{k}_bias", b))
        out.append(("W", self.classifier_weight))
        out.append(("W_bias", self.classifier_bias))
        return out

    def add(self, other: "Gradients") -> "Gradients":
        return Gradients(
            tuple(a + b for a, b in zip(self.extractor_weights, other.extractor_weights)),
            tuple(a + b for a, b in zip(self.extractor_biases, other.extractor_biases)),
            self.classifier_weight + other.classifier_weight,
            self.classifier_bias + other.classifier_bias,
        )

    def scale(self, s: float) -> "Gradients":
        return Gradients(
            tuple(s * w for w in self.extractor_weights),
            tuple(s * b for b in self.extractor_biases),
            s * self.classifier_weight,
            s * self.classifier_bias,
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(arr)) for _, arr in self.blocks())


def init_params(
    input_dim: int,
    num_classes: int,
    rng: np.random.Generator,
    feature_dim: int | None = None,
    hidden_dim: int | None = None,
) -> ModelParams:
    """Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    if feature_dim is None:
        feature_dim = input_dim
    dims = [input_dim, feature_dim] if hidden_dim is None else [input_dim, hidden_dim, feature_dim]
    weights = []
    biases = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(d_in)
        weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    bound = 1.0 / np.sqrt(feature_dim)
    cw = rng.uniform(-bound, bound, size=(feature_dim, num_classes))
    return ModelParams(tuple(weights), tuple(biases), cw, np.zeros(num_classes))


def forward_features(params: ModelParams, raw: np.ndarray) -> np.ndarray:
    """Map raw vectors through the extractor; keeps the input's rank."""
    x = np.asarray(raw, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise ValueError(f"raw feature width {x.shape[-1]} != extractor input {params.input_dim}")
    last = len(params.extractor_weights) - 1
    for k, (w, b) in enumerate(zip(params.extractor_weights, params.extractor_biases)):
        x = x @ w + b
        if k < last:
            x = np.tanh(x)
    return x


def classifier_logits(params: ModelParams, features: np.ndarray) -> np.ndarray:
    return np.asarray(features, dtype=np.float64) @ params.classifier_weight + params.classifier_bias


def classify(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Instance label distributions for extractor features (rows on the simplex)."""
    return softmax(classifier_logits(params, features))


def backward(params: ModelParams, raw: np.ndarray, dlogits: np.ndarray) -> Gradients:
    """Turn batched dL/dlogits into parameter gradients.

    `raw` is the (n, d_in) matrix the forward pass consumed; gradients
    are sums over the batch rows, so contributions from disjoint
    batches add.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    dlogits = np.atleast_2d(np.asarray(dlogits, dtype=np.float64))
    last = len(params.extractor_weights) - 1
    acts = [raw]
    x = raw
    for k, (w, b) in enumerate(zip(params.extractor_weights, params.extractor_biases)):
        x = x @ w + b
        if k < last:
            x = np.tanh(x)
        acts.append(x)
    feats = acts[-1]
    g_cw = feats.T @ dlogits
    g_cb = dlogits.sum(axis=0)
    dx = dlogits @ params.classifier_weight.T
    g_w: list[np.ndarray] = [None] * (last + 1)
    g_b: list[np.ndarray] = [None] * (last + 1)
    for k in range(last, -1, -1):
        dz = dx if k == last else dx * (1.0 - acts[k + 1] ** 2)
        g_w[k] = acts[k].T @ dz
        g_b[k] = dz.sum(axis=0)
        dx = dz @ params.extractor_weights[k].T
    return Gradients(tuple(g_w), tuple(g_b), g_cw, g_cb)


def sgd_step(params: ModelParams, grads: Gradients, lr: float, weight_decay: float = 0.0) -> ModelParams:
    """One plain SGD update: p <- p - lr * (g + weight_decay * p)."""
    if not lr > 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    if weight_decay < 0:
        raise ValueError(f"weight_decay must be >= 0, got {weight_decay}")
    if not grads.is_finite():
        raise ValueError("non-finite gradient; step rejected")
    upd = lambda p, g: p - lr * (g + weight_decay * p)
    return ModelParams(
        tuple(upd(p, g) for p, g in zip(params.extractor_weights, grads.extractor_weights)),
        tuple(upd(p, g) for p, g in zip(params.extractor_biases, grads.extractor_biases)),
        upd(params.classifier_weight, grads.classifier_weight),
        upd(params.classifier_bias, grads.classifier_bias),
    )


@dataclass
class Checkpoint:
    params: ModelParams
    meta: DatasetMeta
    epoch: int
    rng_state: str
    prototypes: dict | None = None
    velocity: dict | None = None


def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    meta: DatasetMeta,
    epoch: int,
    rng_state: str,
    prototypes: dict | None = None,
    velocity: dict | None = None,
) -> Path:
    doc = {
        "meta": {
            "num_known_classes": meta.num_known_classes,
            "num_views": meta.num_views,
            "feature_dim": meta.feature_dim,
        },
        "theta": [w for w in params.extractor_weights],
        "W": params.classifier_weight,
        "biases": {
            "extractor": [b for b in params.extractor_biases],
            "classifier": params.classifier_bias,
        },
        "epoch": epoch,
        "rng_state": rng_state,
        "prototypes": prototypes,
        "velocity": velocity,
    }
    return dump_canonical(doc, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        meta = DatasetMeta(**doc["meta"])
        theta = tuple(np.asarray(w, dtype=np.float64) for w in doc["theta"])
        cw = np.asarray(doc["W"], dtype=np.float64)
        biases = tuple(np.asarray(b, dtype=np.float64) for b in doc["biases"]["extractor"])
        cb = np.asarray(doc["biases"]["classifier"], dtype=np.float64)
        params = ModelParams(theta, biases, cw, cb)
        epoch = int(doc["epoch"])
        rng_state = doc["rng_state"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    if params.input_dim != meta.feature_dim:
        raise CheckpointError(f"extractor input {params.input_dim} != meta feature_dim {meta.feature_dim}")
    if params.num_classes != meta.num_total_classes:
        raise CheckpointError(f"classifier width {params.num_classes} != known classes + 1 = {meta.num_total_classes}")
    return Checkpoint(
        params=params,
        meta=meta,
        epoch=epoch,
        rng_state=rng_state,
        prototypes=doc.get("prototypes"),
        velocity=doc.get("velocity"),
    )
