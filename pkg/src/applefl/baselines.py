"""Reference algorithms: Separate, FedAvg (+ local copies), FedAvg-FT and FedProx-FT."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from . import rng as rngs
from .config import RunConfig
from .data import Dataset, FederatedSplit
from .federation import BYTES_PER_VALUE, RoundReport, map_clients
from .metrics import client_accuracy
from .numerics import Batch, ModelSpec, axpy_combination, backward, forward_loss, init_params, param_count, sgd_step

log = logging.getLogger(__name__)

BASELINES = ("separate", "fedavg", "fedavg_local", "fedavg_ft", "fedprox_ft")


@dataclass
class BaselineState:
    round: int
    global_model: np.ndarray | None
    client_models: list[np.ndarray]  # models evaluated per client


@dataclass
class BaselineResult:
    reports: list[RoundReport]
    state: BaselineState

    @property
    def personalized_models(self) -> list[np.ndarray]:
        return self.state.client_models


def prox_penalty(params: np.ndarray, center: np.ndarray, mu: float) -> tuple[float, np.ndarray]:
    """Value and gradient of ``mu / 2 * ||params - center||^2``."""
    diff = params - center
    return float(mu / 2.0 * (diff @ diff)), mu * diff


def local_sgd(
    spec: ModelSpec,
    params: np.ndarray,
    train: Dataset,
    epochs: int,
    lr: float,
    momentum: float,
    batch_size: int,
    rng: np.random.Generator,
    prox_center: np.ndarray | None = None,
    mu_prox: float = 0.0,
) -> tuple[np.ndarray, float, float]:
    """Minibatch SGD from ``params``; returns (params, mean loss, mean penalized loss) of the last epoch."""
    params = params.copy()
    velocity = np.zeros_like(params)
    if epochs == 0:
        loss = forward_loss(spec, params, Batch(train.inputs, train.labels))
        return params, loss, loss
    for _ in range(epochs):
        order = rng.permutation(len(train))
        losses, pen = [], []
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            res = backward(spec, params, Batch(train.inputs[idx], train.labels[idx]))
            grad = res.grad
            extra = 0.0
            if mu_prox:
                extra, prox_grad = prox_penalty(params, prox_center, mu_prox)
                grad = grad + prox_grad
            losses.append(res.loss)
            pen.append(res.loss + extra)
            params = sgd_step(params, grad, lr, momentum, velocity)
    return params, float(np.mean(losses)), float(np.mean(pen))


def finetune(
    spec: ModelSpec, global_model: np.ndarray, train: Dataset, epochs: int, config: RunConfig, rng: np.random.Generator
) -> np.ndarray:
    """Copy of ``global_model`` after ``epochs`` local SGD epochs on ``train``."""
    if epochs == 0:
        return global_model.copy()
    model, _, _ = local_sgd(spec, global_model, train, epochs, config.lr_net, config.momentum, config.batch_size, rng)
    return model


def _round_lr(config: RunConfig, r: int) -> float:
    return config.lr_net * config.lr_decay ** (r - 1)


def run_global(
    config: RunConfig,
    split: FederatedSplit,
    spec: ModelSpec,
    algorithm: str = "fedavg",
    mu_prox: float = 0.0,
    workers: int = 1,
    on_round: Callable[[RoundReport], None] | None = None,
    state: BaselineState | None = None,
) -> BaselineResult:
    """FedAvg-style training with full participation; FedProx when ``mu_prox > 0``.

    ``algorithm`` only decides what gets evaluated: the aggregated model
    (fedavg), each client's pre-aggregation copy (fedavg_local) or, after the
    final round, a fine-tuned copy of the aggregate (fedavg_ft / fedprox_ft).
    """
    n = split.num_clients
    dim = param_count(spec)
    trains = [split.client_train(i) for i in range(n)]
    tests = [split.client_test(i) for i in range(n)]
    sizes = np.asarray(split.train_sizes(), dtype=np.float64)
    agg_weights = sizes / sizes.sum()
    if state is None:
        g = init_params(spec, rngs.stream(config.seed, rngs.INIT, 0))
        state = BaselineState(0, g, [g.copy() for _ in range(n)])

    reports = []
    for r in range(state.round + 1, config.rounds + 1):
        start = state.global_model
        lr = _round_lr(config, r)

        def work(i: int) -> tuple[np.ndarray, float, float]:
            return local_sgd(
                spec, start, trains[i], config.local_epochs, lr, config.momentum, config.batch_size,
                rngs.stream(config.seed, rngs.SHUFFLE, i, r), prox_center=start, mu_prox=mu_prox,
            )

        results = map_clients(work, list(range(n)), workers)
        local_models = [res[0] for res in results]
        new_global = axpy_combination(agg_weights, local_models)

        if algorithm == "fedavg_local":
            evaluated = local_models
        elif algorithm in ("fedavg_ft", "fedprox_ft") and r == config.rounds:
            evaluated = map_clients(
                lambda i: finetune(spec, new_global, trains[i], config.finetune_epochs, config,
                                   rngs.stream(config.seed, rngs.FINETUNE, i)),
                list(range(n)),
                workers,
            )
        else:
            evaluated = [new_global] * n
        accs = map_clients(lambda i: client_accuracy(spec, evaluated[i], tests[i]), list(range(n)), workers)
        state.round, state.global_model = r, new_global
        state.client_models = [m.copy() for m in evaluated]

        report = RoundReport(
            round=r,
            train_loss=[res[1] for res in results],
            penalized_loss=[res[2] for res in results],
            test_accuracy=accs,
            downloads=[[] for _ in range(n)],
            bytes_up=[dim * BYTES_PER_VALUE] * n,
            bytes_down=[dim * BYTES_PER_VALUE] * n,
        )
        log.info("%s round %d: mean acc %.4f", algorithm, r, report.mean_accuracy)
        reports.append(report)
        if on_round is not None:
            on_round(report)
    return BaselineResult(reports, state)


def run_fedavg(config: RunConfig, split: FederatedSplit, spec: ModelSpec, **kwargs: Any) -> BaselineResult:
    return run_global(config, split, spec, algorithm=kwargs.pop("algorithm", "fedavg"), mu_prox=0.0, **kwargs)


def run_fedprox(
    config: RunConfig, split: FederatedSplit, spec: ModelSpec, mu_prox: float, **kwargs: Any
) -> BaselineResult:
    return run_global(config, split, spec, algorithm=kwargs.pop("algorithm", "fedprox_ft"), mu_prox=mu_prox, **kwargs)


def run_separate(
    config: RunConfig,
    split: FederatedSplit,
    spec: ModelSpec,
    workers: int = 1,
    on_round: Callable[[RoundReport], None] | None = None,
    state: BaselineState | None = None,
) -> BaselineResult:
    """Purely local training: each client runs E epochs per round and never communicates."""
    n = split.num_clients
    trains = [split.client_train(i) for i in range(n)]
    tests = [split.client_test(i) for i in range(n)]
    if state is None:
        state = BaselineState(0, None, [init_params(spec, rngs.stream(config.seed, rngs.INIT, i)) for i in range(n)])
    reports = []
    for r in range(state.round + 1, config.rounds + 1):
        lr = _round_lr(config, r)
        models = state.client_models
        results = map_clients(
            lambda i: local_sgd(spec, models[i], trains[i], config.local_epochs, lr, config.momentum,
                                config.batch_size, rngs.stream(config.seed, rngs.SHUFFLE, i, r)),
            list(range(n)),
            workers,
        )
        state.round, state.client_models = r, [res[0] for res in results]
        accs = map_clients(lambda i: client_accuracy(spec, state.client_models[i], tests[i]), list(range(n)), workers)
        report = RoundReport(
            round=r,
            train_loss=[res[1] for res in results],
            penalized_loss=[res[2] for res in results],
            test_accuracy=accs,
            downloads=[[] for _ in range(n)],
            bytes_up=[0] * n,
            bytes_down=[0] * n,
        )
        log.info("separate round %d: mean acc %.4f", r, report.mean_accuracy)
        reports.append(report)
        if on_round is not None:
            on_round(report)
    return BaselineResult(reports, state)


def run_baseline(config: RunConfig, split: FederatedSplit, spec: ModelSpec, **kwargs: Any) -> BaselineResult:
    if config.algorithm == "separate":
        return run_separate(config, split, spec, **kwargs)
    mu = config.mu_prox if config.algorithm == "fedprox_ft" else 0.0
    return run_global(config, split, spec, algorithm=config.algorithm, mu_prox=mu, **kwargs)


def state_to_dict(state: BaselineState) -> dict[str, Any]:
    return {
        "round": state.round,
        "global_model": None if state.global_model is None else state.global_model.tolist(),
        "client_models": [m.tolist() for m in state.client_models],
    }


def state_from_dict(payload: dict[str, Any]) -> BaselineState:
    g = payload["global_model"]
    return BaselineState(
        int(payload["round"]),
        None if g is None else np.asarray(g, dtype=np.float64),
        [np.asarray(m, dtype=np.float64) for m in payload["client_models"]],
    )
