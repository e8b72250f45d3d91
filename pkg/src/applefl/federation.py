"""Cross-silo round loop: server state, client caches, budgeted core-model downloads."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import rng as rngs
from .apple import apple_local_epoch, penalized_loss, prox_center, scheduler_value
from .config import RunConfig
from .data import Dataset, FederatedSplit
from .errors import ConfigError
from .metrics import client_accuracy
from .numerics import Batch, ModelSpec, axpy_combination, forward_loss, init_params, param_count

log = logging.getLogger(__name__)

BYTES_PER_VALUE = 8


@dataclass
class ServerState:
    core_models: np.ndarray  # (N, dim)
    round: int = 0
    versions: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.versions is None:
            self.versions = np.zeros(len(self.core_models), dtype=np.int64)

    def upload(self, i: int, core_model: np.ndarray) -> None:
        """The only server-bound message: one client's core model."""
        self.core_models[i] = core_model
        self.versions[i] += 1


@dataclass
class ClientState:
    index: int
    train: Dataset
    test: Dataset
    dr: np.ndarray
    velocity: np.ndarray
    cache: np.ndarray  # (N, dim); row ``index`` is the client's own core model
    cache_versions: np.ndarray
    download_count: np.ndarray

    @property
    def core_model(self) -> np.ndarray:
        return self.cache[self.index]

    def personalized_model(self) -> np.ndarray:
        return axpy_combination(self.dr, self.cache)


@dataclass
class RoundReport:
    round: int
    train_loss: list[float]
    penalized_loss: list[float]
    test_accuracy: list[float]
    downloads: list[list[int]]
    bytes_up: list[int]
    bytes_down: list[int]
    dr: list[list[float]] | None = None

    @property
    def total_bytes_down(self) -> int:
        return sum(self.bytes_down)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.test_accuracy))


@dataclass
class ExperimentResult:
    reports: list[RoundReport]
    server: ServerState
    clients: list[ClientState]
    setup_bytes_down: int = 0

    @property
    def personalized_models(self) -> list[np.ndarray]:
        return [c.personalized_model() for c in self.clients]


def init_federation(config: RunConfig, split: FederatedSplit, spec: ModelSpec) -> tuple[ServerState, list[ClientState]]:
    n = split.num_clients
    dim = param_count(spec)
    core = np.stack([init_params(spec, rngs.stream(config.seed, rngs.INIT, i)) for i in range(n)])
    server = ServerState(core_models=core)
    p0 = prox_center(split.train_sizes())
    clients = []
    for i in range(n):
        train, test = split.client_train(i), split.client_test(i)
        if train.feature_dim != spec.input_dim:
            raise ConfigError(
                f"client {i} data has {train.feature_dim} features, model expects {spec.input_dim}"
            )
        clients.append(
            ClientState(
                index=i,
                train=train,
                test=test,
                dr=p0.copy(),
                velocity=np.zeros(dim),
                # setup broadcast: every client starts with all initial core models
                cache=core.copy(),
                cache_versions=server.versions.copy(),
                download_count=np.ones(n, dtype=np.int64),
            )
        )
    return server, clients


def selection_base(r: int, M: int, N: int) -> float:
    if r < 1:
        raise ValueError("rounds are counted from 1")
    return max(1.5, r * M / N)


def weighted_sample_without_replacement(
    log_weights: np.ndarray, k: int, rng: np.random.Generator
) -> list[int]:
    """Draw ``k`` distinct positions; each draw is proportional to the remaining weights."""
    w = np.exp(log_weights - log_weights.max())
    alive = np.ones(len(w), dtype=bool)
    picked = []
    for _ in range(k):
        live = np.where(alive, w, 0.0)
        cdf = np.cumsum(live)
        j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        # guard against u * total landing on the final edge through rounding
        j = min(j, len(w) - 1)
        while not alive[j]:
            j -= 1
        picked.append(j)
        alive[j] = False
    return picked


def select_downloads(
    client: ClientState, r: int, M: int | None, N: int, rng: np.random.Generator
) -> list[int]:
    """Peer core models client ``client.index`` fetches in round ``r``.

    Never-downloaded peers come first; remaining slots are drawn without
    replacement with weights ``b(r) ** |p_ij|``.
    """
    i = client.index
    peers = [j for j in range(N) if j != i]
    if M is None or M >= N - 1:
        return peers
    if M < 1:
        raise ConfigError(f"budget M={M} must be at least 1", "/budget")
    fresh = [j for j in peers if client.download_count[j] == 0]
    if len(fresh) >= M:
        return [int(j) for j in rng.choice(fresh, size=M, replace=False)]
    rest = [j for j in peers if client.download_count[j] != 0]
    base = selection_base(r, M, N)
    log_w = np.abs(client.dr[rest]) * math.log(base)
    chosen = weighted_sample_without_replacement(log_w, M - len(fresh), rng)
    return fresh + [rest[c] for c in chosen]


def _client_round(
    client: ClientState,
    snapshot: np.ndarray,
    snapshot_versions: np.ndarray,
    config: RunConfig,
    spec: ModelSpec,
    p0: np.ndarray,
    r: int,
) -> tuple[float, float, list[int]]:
    i, n = client.index, len(snapshot)
    downloads = select_downloads(client, r, config.budget, n, rngs.stream(config.seed, rngs.SELECT, i, r))
    for j in downloads:
        client.cache[j] = snapshot[j]
        client.cache_versions[j] = snapshot_versions[j]
        client.download_count[j] += 1

    lam = scheduler_value(config.scheduler_spec(), r)
    mu = config.scheduler.mu
    lr_net = config.lr_net * config.lr_decay ** (r - 1)
    shuffle = rngs.stream(config.seed, rngs.SHUFFLE, i, r)
    client.velocity[:] = 0.0
    if config.local_epochs == 0:
        base = forward_loss(spec, client.personalized_model(), Batch(client.train.inputs, client.train.labels))
        return base, penalized_loss(base, client.dr, p0, lam, mu), downloads
    for _ in range(config.local_epochs):
        base, pen = apple_local_epoch(
            client, spec, p0, lr_net, config.lr_dr, config.momentum, lam, mu, config.batch_size, shuffle
        )
    return base, pen, downloads


def map_clients(fn: Callable[[Any], Any], items: Sequence[Any], workers: int) -> list[Any]:
    """Apply ``fn`` per client, optionally on a thread pool; results keep client order."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_round(
    server: ServerState,
    clients: list[ClientState],
    config: RunConfig,
    spec: ModelSpec,
    r: int,
    workers: int = 1,
) -> RoundReport:
    n = len(clients)
    dim = server.core_models.shape[1]
    snapshot = server.core_models.copy()
    snapshot.setflags(write=False)
    snapshot_versions = server.versions.copy()
    p0 = prox_center([len(c.train) for c in clients])

    results = map_clients(
        lambda c: _client_round(c, snapshot, snapshot_versions, config, spec, p0, r), clients, workers
    )

    for c in clients:
        server.upload(c.index, c.core_model)
        c.cache_versions[c.index] = server.versions[c.index]
    server.round = r

    accuracies = map_clients(
        lambda c: client_accuracy(spec, c.personalized_model(), c.test), clients, workers
    )
    return RoundReport(
        round=r,
        train_loss=[res[0] for res in results],
        penalized_loss=[res[1] for res in results],
        test_accuracy=accuracies,
        downloads=[res[2] for res in results],
        bytes_up=[dim * BYTES_PER_VALUE] * n,
        bytes_down=[len(res[2]) * dim * BYTES_PER_VALUE for res in results],
        dr=[c.dr.tolist() for c in clients],
    )


def run_experiment(
    config: RunConfig,
    split: FederatedSplit,
    spec: ModelSpec,
    workers: int = 1,
    on_round: Callable[[RoundReport], None] | None = None,
    state: tuple[ServerState, list[ClientState]] | None = None,
) -> ExperimentResult:
    """Run APPLE for ``config.rounds`` rounds (continuing from ``state`` if given)."""
    server, clients = state if state is not None else init_federation(config, split, spec)
    dim = server.core_models.shape[1]
    n = len(clients)
    reports = []
    for r in range(server.round + 1, config.rounds + 1):
        report = run_round(server, clients, config, spec, r, workers)
        log.info("apple round %d: mean acc %.4f", r, report.mean_accuracy)
        reports.append(report)
        if on_round is not None:
            on_round(report)
    return ExperimentResult(reports, server, clients, setup_bytes_down=n * (n - 1) * dim * BYTES_PER_VALUE)


# ---------------------------------------------------------------------------
# checkpoint payloads


def state_to_dict(server: ServerState, clients: Iterable[ClientState]) -> dict[str, Any]:
    return {
        "server": {
            "round": server.round,
            "core_models": server.core_models.tolist(),
            "versions": server.versions.tolist(),
        },
        "clients": [
            {
                "index": c.index,
                "dr": c.dr.tolist(),
                "cache": c.cache.tolist(),
                "cache_versions": c.cache_versions.tolist(),
                "download_count": c.download_count.tolist(),
            }
            for c in clients
        ],
    }


def state_from_dict(payload: dict[str, Any], split: FederatedSplit) -> tuple[ServerState, list[ClientState]]:
    s = payload["server"]
    server = ServerState(
        core_models=np.asarray(s["core_models"], dtype=np.float64),
        round=int(s["round"]),
        versions=np.asarray(s["versions"], dtype=np.int64),
    )
    clients = []
    for c in payload["clients"]:
        i = int(c["index"])
        cache = np.asarray(c["cache"], dtype=np.float64)
        clients.append(
            ClientState(
                index=i,
                train=split.client_train(i),
                test=split.client_test(i),
                dr=np.asarray(c["dr"], dtype=np.float64),
                velocity=np.zeros(cache.shape[1]),
                cache=cache,
                cache_versions=np.asarray(c["cache_versions"], dtype=np.int64),
                download_count=np.asarray(c["download_count"], dtype=np.int64),
            )
        )
    return server, clients
