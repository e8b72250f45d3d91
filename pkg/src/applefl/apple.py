"""Directed-relationship (DR) mixing: penalized objective, gradients, schedulers, local epoch.

A client's personalized model is ``dr @ cache`` where ``cache`` stacks all N
core models (row ``i`` is the client's own, trainable one; the others are
frozen downloaded copies).  Differentiating the penalized loss

    loss(dr @ cache) + lambda_r * mu / 2 * ||dr - p0||^2

through that mix gives ``dr[i] * g`` for the own core model and
``cache @ g + lambda_r * mu * (dr - p0)`` for the DR vector, with ``g`` the
model gradient evaluated at the personalized model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import ConfigError, NumericError
from .numerics import Batch, ModelSpec, axpy_combination, backward, sgd_step

if TYPE_CHECKING:
    from .federation import ClientState

SCHEDULER_KINDS = ("cosine", "exponential", "constant_zero")


@dataclass(frozen=True)
class SchedulerSpec:
    kind: str = "cosine"
    L: int = 1
    epsilon: float = 1e-3
    mu: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in SCHEDULER_KINDS:
            raise ConfigError(f"unknown scheduler kind {self.kind!r}", "/scheduler/kind")
        if self.L < 1:
            raise ConfigError("cutoff round L must be positive", "/scheduler/L_fraction")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError("epsilon must lie in (0, 1)", "/scheduler/epsilon")
        if self.mu < 0:
            raise ConfigError("mu must be nonnegative", "/scheduler/mu")


def prox_center(train_sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(train_sizes, dtype=np.float64)
    if sizes.ndim != 1 or len(sizes) < 1 or (sizes < 1).any():
        raise ConfigError("prox_center needs at least one client, each with a nonempty train set")
    return sizes / sizes.sum()


def scheduler_value(spec: SchedulerSpec, r: float) -> float:
    """Weight of the DR penalty in round ``r``; exactly 0 from round L onwards."""
    if r < 0:
        raise ValueError("round index must be nonnegative")
    if r >= spec.L or spec.kind == "constant_zero":
        return 0.0
    if spec.kind == "cosine":
        return (math.cos(r * math.pi / spec.L) + 1.0) / 2.0
    return spec.epsilon ** (r / spec.L)


def penalized_loss(base_loss: float, dr: np.ndarray, p0: np.ndarray, lambda_r: float, mu: float) -> float:
    diff = np.asarray(dr, dtype=np.float64) - np.asarray(p0, dtype=np.float64)
    return float(base_loss + lambda_r * (mu / 2.0) * (diff @ diff))


def dr_gradient(
    model_grad_at_wp: np.ndarray,
    core_models: np.ndarray | Sequence[np.ndarray],
    dr: np.ndarray,
    p0: np.ndarray,
    lambda_r: float,
    mu: float,
) -> np.ndarray:
    cores = np.asarray(core_models, dtype=np.float64)
    if cores.ndim != 2 or cores.shape[1] != model_grad_at_wp.shape[0] or cores.shape[0] != len(dr):
        raise ConfigError(
            f"dr_gradient: core models {cores.shape} do not match gradient "
            f"{model_grad_at_wp.shape} and DR length {len(dr)}"
        )
    return cores @ model_grad_at_wp + lambda_r * mu * (np.asarray(dr) - np.asarray(p0))


def core_gradient(model_grad_at_wp: np.ndarray, self_weight: float) -> np.ndarray:
    return self_weight * model_grad_at_wp


def apple_local_epoch(
    client: "ClientState",
    spec: ModelSpec,
    p0: np.ndarray,
    lr_net: float,
    lr_dr: float,
    momentum: float,
    lambda_r: float,
    mu: float,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """One pass over the client's train set; returns (mean base loss, mean penalized loss).

    Both the own core model and the DR vector step from the same backward pass
    at the pre-update personalized model. Peers' rows of ``client.cache`` are
    read-only here.
    """
    train = client.train
    order = rng.permutation(len(train))
    i = client.index
    base_losses, pen_losses = [], []
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        batch = Batch(train.inputs[idx], train.labels[idx])
        wp = axpy_combination(client.dr, client.cache)
        res = backward(spec, wp, batch)
        base_losses.append(res.loss)
        pen_losses.append(penalized_loss(res.loss, client.dr, p0, lambda_r, mu))

        g_dr = dr_gradient(res.grad, client.cache, client.dr, p0, lambda_r, mu)
        g_core = core_gradient(res.grad, client.dr[i])
        client.cache[i] = sgd_step(client.cache[i], g_core, lr_net, momentum, client.velocity)
        client.dr = client.dr - lr_dr * g_dr
        if not np.isfinite(client.dr).all():
            raise NumericError(f"client {i}: DR vector diverged")
    return float(np.mean(base_losses)), float(np.mean(pen_losses))
