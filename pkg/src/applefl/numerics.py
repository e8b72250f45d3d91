"""Flat parameter vectors, the small model family, cross-entropy and its gradient.

Parameter layout (row-major, concatenated):

* ``softmax_regression``: ``W`` (input_dim x num_classes), ``b`` (num_classes)
* ``mlp_1hidden``: ``W1`` (input_dim x hidden_dim), ``b1`` (hidden_dim),
  ``W2`` (hidden_dim x num_classes), ``b2`` (num_classes)

Every model handled here is a plain ``float64`` numpy vector so that mixing
several models together is ordinary vector arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericError

MODEL_KINDS = ("softmax_regression", "mlp_1hidden")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}", "/model/kind")
        if self.input_dim < 1:
            raise ConfigError("input_dim must be positive", "/model/input_dim")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2", "/model/num_classes")
        if self.kind == "mlp_1hidden" and self.hidden_dim < 1:
            raise ConfigError("mlp_1hidden needs a positive hidden_dim", "/model/hidden_dim")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}", "/model/activation")


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class GradResult:
    loss: float
    grad: np.ndarray


def param_count(spec: ModelSpec) -> int:
    d, c = spec.input_dim, spec.num_classes
    if spec.kind == "softmax_regression":
        return d * c + c
    h = spec.hidden_dim
    return d * h + h + h * c + c


def _unpack(spec: ModelSpec, params: np.ndarray) -> list[np.ndarray]:
    """Return views into ``params`` in layout order."""
    d, c, h = spec.input_dim, spec.num_classes, spec.hidden_dim
    if spec.kind == "softmax_regression":
        shapes = [(d, c), (c,)]
    else:
        shapes = [(d, h), (h,), (h, c), (c,)]
    views, offset = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        views.append(params[offset : offset + size].reshape(shape))
        offset += size
    return views


def _check(spec: ModelSpec, params: np.ndarray, batch: Batch) -> None:
    expected = param_count(spec)
    if params.ndim != 1 or params.shape[0] != expected:
        raise ConfigError(f"parameter vector has length {params.shape}, model expects {expected}")
    if batch.inputs.ndim != 2 or batch.inputs.shape[1] != spec.input_dim:
        raise ConfigError(
            f"batch inputs have shape {batch.inputs.shape}, model expects (*, {spec.input_dim})"
        )
    if batch.inputs.shape[0] != batch.labels.shape[0] or len(batch) < 1:
        raise ConfigError("batch must hold at least one sample and one label per row")


def init_params(spec: ModelSpec, rng: np.random.Generator, scale: float = 0.01) -> np.ndarray:
    """Gaussian(0, scale^2) weights, zero biases."""
    params = np.zeros(param_count(spec))
    for i, view in enumerate(_unpack(spec, params)):
        if i % 2 == 0:
            view[...] = rng.normal(0.0, scale, size=view.shape)
    return params


def logits(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    parts = _unpack(spec, params)
    if spec.kind == "softmax_regression":
        w, b = parts
        return inputs @ w + b
    w1, b1, w2, b2 = parts
    return np.maximum(inputs @ w1 + b1, 0.0) @ w2 + b2


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward_loss(spec: ModelSpec, params: np.ndarray, batch: Batch) -> float:
    """Mean cross-entropy of ``params`` on ``batch``."""
    _check(spec, params, batch)
    logp = _log_softmax(logits(spec, params, batch.inputs))
    return float(-logp[np.arange(len(batch)), batch.labels].mean())


def backward(spec: ModelSpec, params: np.ndarray, batch: Batch) -> GradResult:
    """Loss and exact gradient of the mean cross-entropy w.r.t. ``params``."""
    _check(spec, params, batch)
    x, y = batch.inputs, batch.labels
    n = len(batch)
    rows = np.arange(n)
    grad = np.zeros_like(params)
    gparts = _unpack(spec, grad)

    if spec.kind == "softmax_regression":
        w, b = _unpack(spec, params)
        z = x @ w + b
        hidden = x
    else:
        w1, b1, w2, b2 = _unpack(spec, params)
        pre = x @ w1 + b1
        hidden = np.maximum(pre, 0.0)
        z = hidden @ w2 + b2

    logp = _log_softmax(z)
    loss = float(-logp[rows, y].mean())
    dz = np.exp(logp)
    dz[rows, y] -= 1.0
    dz /= n

    if spec.kind == "softmax_regression":
        gparts[0][...] = hidden.T @ dz
        gparts[1][...] = dz.sum(axis=0)
    else:
        gparts[2][...] = hidden.T @ dz
        gparts[3][...] = dz.sum(axis=0)
        dpre = (dz @ w2.T) * (pre > 0.0)
        gparts[0][...] = x.T @ dpre
        gparts[1][...] = dpre.sum(axis=0)

    if not (np.isfinite(loss) and np.isfinite(grad).all()):
        raise NumericError("non-finite loss or gradient")
    return GradResult(loss=loss, grad=grad)


def predict(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(logits(spec, params, inputs), axis=1)


def axpy_combination(coeffs: Sequence[float], vectors: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Weighted sum ``sum_j coeffs[j] * vectors[j]``; coefficients are unconstrained reals."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    stacked = np.asarray(vectors, dtype=np.float64)
    if coeffs.ndim != 1 or stacked.ndim != 2 or coeffs.shape[0] != stacked.shape[0] or coeffs.shape[0] < 1:
        raise ConfigError(
            f"cannot combine {coeffs.shape[0] if coeffs.ndim else 0} coefficients "
            f"with vectors of shape {stacked.shape}"
        )
    out = coeffs @ stacked
    if not np.isfinite(out).all():
        raise NumericError("non-finite model combination")
    return out


def sgd_step(
    params: np.ndarray,
    grad: np.ndarray,
    lr: float,
    momentum: float,
    velocity: np.ndarray,
) -> np.ndarray:
    """Heavy-ball SGD. Updates ``velocity`` in place and returns the new params."""
    if params.shape != grad.shape or params.shape != velocity.shape:
        raise ConfigError("sgd_step: params, grad and velocity must share one shape")
    velocity *= momentum
    velocity += grad
    out = params - lr * velocity
    if not np.isfinite(out).all():
        raise NumericError("parameters diverged to non-finite values")
    return out
