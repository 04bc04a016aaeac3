"""Dense numeric kernel: flat-parameter models, mini-batch loss/gradient, SGD.

Three families are supported:

``softmax-linear``
    logits = W x + b, with W of shape (C, D).
``mlp-1hidden``
    logits = W2 tanh(W1 x + b1) + b2.
``linear-regression``
    prediction = w . x (no bias), loss 0.5 * (y - w . x)^2.

Parameters are stored as one flat float64 vector so that aggregation across
clients is a plain vector mean.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import InputError, NumericError, UnsupportedOperation

Family = Literal["softmax-linear", "mlp-1hidden", "linear-regression"]
FAMILIES: tuple[str, ...] = ("softmax-linear", "mlp-1hidden", "linear-regression")

LOG_CLAMP = 1e-12
INIT_SCALE = 0.05


@dataclass(frozen=True)
class ModelSpec:
    family: Family
    input_dim: int
    num_classes: int = 1
    hidden_dim: int = 0

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise InputError(f"unknown model family {self.family!r}")
        if self.input_dim <= 0 or self.num_classes <= 0 or self.hidden_dim < 0:
            raise InputError(f"non-positive dimension in {self}")
        if self.family == "linear-regression" and self.num_classes != 1:
            raise InputError("linear-regression requires num_classes == 1")
        if self.family == "mlp-1hidden" and self.hidden_dim == 0:
            raise InputError("mlp-1hidden requires hidden_dim > 0")
        if self.family != "mlp-1hidden" and self.hidden_dim != 0:
            raise InputError(f"hidden_dim must be 0 for {self.family}")

    @property
    def is_classifier(self) -> bool:
        return self.family != "linear-regression"

    @property
    def num_params(self) -> int:
        d, c, h = self.input_dim, self.num_classes, self.hidden_dim
        if self.family == "softmax-linear":
            return c * d + c
        if self.family == "mlp-1hidden":
            return h * d + h + c * h + c
        return d

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "hidden_dim": self.hidden_dim,
        }


@dataclass(frozen=True, eq=False)
class Model:
    spec: ModelSpec
    params: np.ndarray

    def __post_init__(self) -> None:
        params = np.array(self.params, dtype=np.float64).reshape(-1)
        if params.shape[0] != self.spec.num_params:
            raise InputError(
                f"expected {self.spec.num_params} parameters, got {params.shape[0]}"
            )
        if not np.all(np.isfinite(params)):
            raise NumericError("model parameters must be finite")
        params.flags.writeable = False
        object.__setattr__(self, "params", params)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Model):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.params, other.params)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        y = np.asarray(self.labels).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise InputError(
                f"features rows ({x.shape[0]}) and labels ({y.shape[0]}) differ"
            )
        if x.shape[0] < 1:
            raise InputError("batch must contain at least one sample")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]


def init_model(spec: ModelSpec, rng: np.random.Generator) -> Model:
    """Uniform(-0.05, 0.05) initialization drawn from ``rng``."""
    return Model(spec, rng.uniform(-INIT_SCALE, INIT_SCALE, size=spec.num_params))


def zeros_model(spec: ModelSpec) -> Model:
    return Model(spec, np.zeros(spec.num_params))


def _unpack(spec: ModelSpec, params: np.ndarray) -> list[np.ndarray]:
    d, c, h = spec.input_dim, spec.num_classes, spec.hidden_dim
    if spec.family == "softmax-linear":
        return [params[: c * d].reshape(c, d), params[c * d :]]
    if spec.family == "mlp-1hidden":
        sizes = [h * d, h, c * h, c]
        w1, b1, w2, b2 = np.split(params, np.cumsum(sizes)[:-1])
        return [w1.reshape(h, d), b1, w2.reshape(c, h), b2]
    return [params]


def _check_features(spec: ModelSpec, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise InputError(
            f"feature width {x.shape[-1]} does not match input_dim {spec.input_dim}"
        )
    return x


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(spec: ModelSpec, params: np.ndarray, x: np.ndarray):
    """Return (output, hidden activations or None)."""
    parts = _unpack(spec, params)
    if spec.family == "softmax-linear":
        w, b = parts
        return x @ w.T + b, None
    if spec.family == "mlp-1hidden":
        w1, b1, w2, b2 = parts
        hidden = np.tanh(x @ w1.T + b1)
        return hidden @ w2.T + b2, hidden
    return x @ parts[0], None


def predict_proba(model: Model, features: np.ndarray) -> np.ndarray:
    """Class probabilities, one row per sample."""
    spec = model.spec
    if not spec.is_classifier:
        raise UnsupportedOperation("predict_proba is undefined for linear-regression")
    x = _check_features(spec, features)
    logits, _ = _forward(spec, model.params, x)
    return _softmax(logits)


def predict(model: Model, features: np.ndarray) -> np.ndarray:
    """Argmax class for classifiers, real prediction for regression."""
    if model.spec.is_classifier:
        return predict_proba(model, features).argmax(axis=1)
    x = _check_features(model.spec, features)
    return _forward(model.spec, model.params, x)[0]


def _check_labels(spec: ModelSpec, labels: np.ndarray) -> np.ndarray:
    if spec.is_classifier:
        y = labels.astype(np.int64)
        if y.size and (y.min() < 0 or y.max() >= spec.num_classes):
            raise InputError(f"labels outside [0, {spec.num_classes})")
        return y
    return labels.astype(np.float64)


def pointwise_loss(model: Model, batch: Batch) -> np.ndarray:
    """Per-sample loss: clamped cross-entropy or half squared error."""
    spec = model.spec
    x = _check_features(spec, batch.features)
    y = _check_labels(spec, batch.labels)
    out, _ = _forward(spec, model.params, x)
    if spec.is_classifier:
        probs = _softmax(out)
        return -np.log(np.maximum(probs[np.arange(len(y)), y], LOG_CLAMP))
    return 0.5 * (y - out) ** 2


def batch_loss(model: Model, batch: Batch) -> float:
    """Mean pointwise loss over the batch."""
    return float(pointwise_loss(model, batch).mean())


def batch_gradient(model: Model, batch: Batch) -> np.ndarray:
    """Analytic gradient of :func:`batch_loss` with respect to the flat parameters."""
    spec = model.spec
    x = _check_features(spec, batch.features)
    y = _check_labels(spec, batch.labels)
    n = x.shape[0]
    out, hidden = _forward(spec, model.params, x)

    if spec.family == "linear-regression":
        return -((y - out) @ x) / n

    # d(mean CE)/d logits
    delta = _softmax(out)
    delta[np.arange(n), y] -= 1.0
    delta /= n

    if spec.family == "softmax-linear":
        return np.concatenate([(delta.T @ x).ravel(), delta.sum(axis=0)])

    _, _, w2, _ = _unpack(spec, model.params)
    grad_w2 = delta.T @ hidden
    grad_b2 = delta.sum(axis=0)
    back = (delta @ w2) * (1.0 - hidden**2)
    grad_w1 = back.T @ x
    grad_b1 = back.sum(axis=0)
    return np.concatenate([grad_w1.ravel(), grad_b1, grad_w2.ravel(), grad_b2])


def sgd_step(model: Model, gradient: np.ndarray, learning_rate: float) -> Model:
    """One plain gradient step; returns a new model."""
    g = np.asarray(gradient, dtype=np.float64).reshape(-1)
    if g.shape[0] != model.spec.num_params:
        raise InputError(
            f"gradient length {g.shape[0]} != parameter count {model.spec.num_params}"
        )
    if not np.all(np.isfinite(g)):
        raise NumericError("gradient contains non-finite values")
    if not learning_rate > 0:
        raise InputError("learning_rate must be positive")
    return Model(model.spec, model.params - learning_rate * g)


def accuracy(model: Model, features: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(model, features) == np.asarray(labels)))
