"""Datasets, file ingestion and the non-IID client partitioners."""

from __future__ import annotations

import csv
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import rng as rngs
from .errors import ConfigError, DataError, IngestionError

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

DEFAULT_SHARD_FRACTIONS = (0.8, 0.1) + (0.01,) * 10
PATHOLOGICAL_FRACTION_RANGE = (0.3, 1.0)
MAX_PARTITION_RETRIES = 1000


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        if self.inputs.ndim != 2:
            raise DataError(f"inputs must be a 2-D sample matrix, got shape {self.inputs.shape}")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"{self.inputs.shape[0]} input rows but {self.labels.shape[0]} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    @property
    def feature_dim(self) -> int:
        return int(self.inputs.shape[1])

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.inputs[indices], self.labels[indices], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str = "pathological"
    num_clients: int = 12
    seed: int = 0
    classes_per_client: int = 2
    shard_fractions: tuple[float, ...] = DEFAULT_SHARD_FRACTIONS

    def __post_init__(self) -> None:
        if self.scheme not in ("pathological", "practical", "iid"):
            raise ConfigError(f"unknown partition scheme {self.scheme!r}", "/partition/scheme")
        if self.num_clients < 1:
            raise ConfigError("num_clients must be positive", "/partition/num_clients")
        if self.classes_per_client < 1:
            raise ConfigError("classes_per_client must be positive", "/partition/classes_per_client")
        if any(f <= 0 for f in self.shard_fractions) or abs(sum(self.shard_fractions) - 1.0) > 1e-9:
            raise ConfigError("shard_fractions must be positive and sum to 1", "/partition/shard_fractions")


@dataclass
class FederatedSplit:
    train: Dataset
    test: Dataset
    train_indices: list[np.ndarray]
    test_indices: list[np.ndarray]
    provenance: list[dict[str, Any]] = field(default_factory=list)

    @property
    def num_clients(self) -> int:
        return len(self.train_indices)

    def client_train(self, i: int) -> Dataset:
        return self.train.subset(self.train_indices[i])

    def client_test(self, i: int) -> Dataset:
        return self.test.subset(self.test_indices[i])

    @property
    def clients(self) -> list[tuple[Dataset, Dataset]]:
        return [(self.client_train(i), self.client_test(i)) for i in range(self.num_clients)]

    def train_sizes(self) -> list[int]:
        return [len(ix) for ix in self.train_indices]

    def manifest(self) -> dict[str, Any]:
        return {
            "clients": [
                {"train_indices": tr.tolist(), "test_indices": te.tolist()}
                for tr, te in zip(self.train_indices, self.test_indices)
            ],
            "provenance": self.provenance,
        }


# ---------------------------------------------------------------------------
# ingestion


def _read_idx(path: Path, magic: int, kind: str) -> tuple[np.ndarray, tuple[int, ...]]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IngestionError("truncated file: missing magic number", path, offset=len(raw))
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IngestionError(
            f"wrong magic 0x{found:08x} for {kind} file, expected 0x{magic:08x}", path, offset=0
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IngestionError("truncated file: incomplete dimension header", path, offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise IngestionError(
            f"truncated file: expected {size} data bytes, found {len(raw) - header}",
            path,
            offset=len(raw),
        )
    data = np.frombuffer(raw, dtype=np.uint8, count=size, offset=header)
    return data, dims


def load_idx(images_path: str | Path, labels_path: str | Path, num_classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair (e.g. MNIST) with pixels scaled to [0, 1]."""
    pixels, idims = _read_idx(Path(images_path), IDX_IMAGES_MAGIC, "images")
    labels, ldims = _read_idx(Path(labels_path), IDX_LABELS_MAGIC, "labels")
    if idims[0] != ldims[0]:
        raise IngestionError(
            f"count mismatch: {idims[0]} images but {ldims[0]} labels", labels_path, offset=4
        )
    inputs = pixels.reshape(idims[0], idims[1] * idims[2]).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(inputs, labels, num_classes)


def load_csv(path: str | Path, label_column: str, num_classes: int | None = None) -> Dataset:
    """Load a headed numeric CSV; every column except ``label_column`` is a feature."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError("empty file, expected a header row", path, line=1) from None
        if label_column not in header:
            raise IngestionError(f"label column {label_column!r} not found in header", path, line=1)
        label_at = header.index(label_column)
        features, labels = [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(
                    f"ragged row: {len(row)} cells, header has {len(header)}", path, line=line
                )
            if not all(_is_float(c) for c in row):
                bad = next(c for c in row if not _is_float(c))
                raise IngestionError(f"non-numeric cell {bad!r}", path, line=line)
            values = [float(cell) for cell in row]
            label = values.pop(label_at)
            if label != int(label) or label < 0:
                raise IngestionError(f"label {row[label_at]!r} is not a class index", path, line=line)
            labels.append(int(label))
            features.append(values)
    if not labels:
        raise IngestionError("no data rows", path, line=2)
    if num_classes is None:
        num_classes = max(labels) + 1
    return Dataset(np.asarray(features, dtype=np.float64), np.asarray(labels, dtype=np.int64), num_classes)


def _is_float(cell: str) -> bool:
    try:
        return math.isfinite(float(cell))
    except ValueError:
        return False


def synth_clusters(
    num_classes: int,
    feature_dim: int,
    samples_per_class: int,
    class_center_scale: float,
    noise_sigma: float,
    seed: int,
) -> Dataset:
    """Gaussian blobs: one random centre per class, isotropic noise around it.

    Samples are ordered class by class.
    """
    gen = rngs.stream(seed, rngs.DATA)
    centers = gen.normal(0.0, class_center_scale, size=(num_classes, feature_dim))
    noise = gen.normal(0.0, 1.0, size=(num_classes, samples_per_class, feature_dim))
    inputs = (centers[:, None, :] + noise_sigma * noise).reshape(-1, feature_dim)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), samples_per_class)
    return Dataset(inputs, labels, num_classes)


def split_per_class(ds: Dataset, train_per_class: int) -> tuple[Dataset, Dataset]:
    """First ``train_per_class`` samples of every class go to train, the rest to test."""
    train_ix, test_ix = [], []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        train_ix.append(idx[:train_per_class])
        test_ix.append(idx[train_per_class:])
    return ds.subset(np.concatenate(train_ix)), ds.subset(np.concatenate(test_ix))


# ---------------------------------------------------------------------------
# partitioning


def largest_remainder(total: int, fractions: Sequence[float]) -> np.ndarray:
    """Integer sizes proportional to ``fractions`` that sum exactly to ``total``."""
    quotas = np.asarray(fractions, dtype=np.float64) * total
    sizes = np.floor(quotas).astype(np.int64)
    short = total - int(sizes.sum())
    # stable sort: equal remainders go to the earlier shard
    order = np.argsort(-(quotas - sizes), kind="stable")
    sizes[order[:short]] += 1
    return sizes


def _class_pools(ds: Dataset, gen: np.random.Generator) -> list[np.ndarray]:
    return [gen.permutation(np.flatnonzero(ds.labels == c)) for c in range(ds.num_classes)]


def _slice_sizes(pool_size: int, fractions: Sequence[float]) -> list[int] | None:
    """Successive slices of a class pool; the last taker gets the remainder.

    Returns None when the pool cannot give every taker at least one sample.
    """
    takers = len(fractions)
    if pool_size < takers:
        return None
    sizes, remaining = [], pool_size
    for k, frac in enumerate(fractions):
        still_waiting = takers - k - 1
        if still_waiting == 0:
            take = remaining
        else:
            take = min(max(1, int(np.floor(frac * remaining))), remaining - still_waiting)
        sizes.append(take)
        remaining -= take
    return sizes


def partition_pathological(train: Dataset, test: Dataset, spec: PartitionSpec) -> FederatedSplit:
    if spec.scheme != "pathological":
        raise ConfigError(f"expected scheme 'pathological', got {spec.scheme!r}", "/partition/scheme")
    n_classes, n_clients, k = train.num_classes, spec.num_clients, spec.classes_per_client
    if k > n_classes:
        raise ConfigError(
            f"classes_per_client={k} exceeds the {n_classes} available classes",
            "/partition/classes_per_client",
        )
    train_counts, test_counts = train.class_counts(), test.class_counts()
    present = [c for c in range(n_classes) if train_counts[c] > 0 or test_counts[c] > 0]
    if k > len(present):
        raise DataError(f"classes_per_client={k} exceeds the {len(present)} classes present in the data")
    if k * n_clients < len(present):
        raise DataError(f"{n_clients} clients x {k} classes cannot cover {len(present)} classes")

    gen = rngs.stream(spec.seed, rngs.PARTITION)
    low, high = PATHOLOGICAL_FRACTION_RANGE
    for _ in range(MAX_PARTITION_RETRIES):
        assigned = [sorted(gen.choice(present, size=k, replace=False).tolist()) for _ in range(n_clients)]
        takers: dict[int, list[int]] = {c: [] for c in range(n_classes)}
        for i, classes in enumerate(assigned):
            for c in classes:
                takers[c].append(i)
        fractions = {c: gen.uniform(low, high, size=len(takers[c])).tolist() for c in range(n_classes)}
        if any(not takers[c] for c in present):
            continue
        train_sizes = {c: _slice_sizes(int(train_counts[c]), fractions[c]) for c in range(n_classes) if takers[c]}
        test_sizes = {c: _slice_sizes(int(test_counts[c]), fractions[c]) for c in range(n_classes) if takers[c]}
        if any(s is None for s in train_sizes.values()) or any(s is None for s in test_sizes.values()):
            continue
        break
    else:
        raise DataError(
            f"could not draw a pathological assignment in {MAX_PARTITION_RETRIES} attempts; "
            "class pools are too small for the requested clients"
        )

    train_pools, test_pools = _class_pools(train, gen), _class_pools(test, gen)
    train_parts: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    test_parts: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    provenance: list[dict[str, Any]] = [{"classes": assigned[i], "fractions": {}} for i in range(n_clients)]
    for c, clients in takers.items():
        if not clients:
            continue
        for pools, sizes, parts in ((train_pools, train_sizes, train_parts), (test_pools, test_sizes, test_parts)):
            start = 0
            for i, size in zip(clients, sizes[c]):
                parts[i].append(pools[c][start : start + size])
                start += size
        for i, frac in zip(clients, fractions[c]):
            provenance[i]["fractions"][str(c)] = frac
    return FederatedSplit(
        train,
        test,
        [np.sort(np.concatenate(p)) for p in train_parts],
        [np.sort(np.concatenate(p)) for p in test_parts],
        provenance,
    )


def partition_practical(train: Dataset, test: Dataset, spec: PartitionSpec) -> FederatedSplit:
    if spec.scheme != "practical":
        raise ConfigError(f"expected scheme 'practical', got {spec.scheme!r}", "/partition/scheme")
    n_clients = spec.num_clients
    if len(spec.shard_fractions) != n_clients:
        raise ConfigError(
            f"{len(spec.shard_fractions)} shard fractions for {n_clients} clients",
            "/partition/shard_fractions",
        )
    gen = rngs.stream(spec.seed, rngs.PARTITION)
    # perms[c][s] is the client receiving shard s of class c
    perms = [gen.permutation(n_clients) for _ in range(train.num_classes)]
    train_pools, test_pools = _class_pools(train, gen), _class_pools(test, gen)

    train_parts: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    test_parts: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in range(train.num_classes):
        for pools, parts in ((train_pools, train_parts), (test_pools, test_parts)):
            pool = pools[c]
            sizes = largest_remainder(len(pool), spec.shard_fractions)
            if len(pool) and (sizes == 0).any():
                warnings.warn(
                    f"class {c} has only {len(pool)} samples; some practical shards are empty",
                    stacklevel=2,
                )
            bounds = np.concatenate([[0], np.cumsum(sizes)])
            for s, client in enumerate(perms[c]):
                parts[client].append(pool[bounds[s] : bounds[s + 1]])
    provenance = [
        {"shard_fraction_per_class": [spec.shard_fractions[int(np.flatnonzero(perms[c] == i)[0])]
                                      for c in range(train.num_classes)]}
        for i in range(n_clients)
    ]
    return FederatedSplit(
        train,
        test,
        [np.sort(np.concatenate(p)) for p in train_parts],
        [np.sort(np.concatenate(p)) for p in test_parts],
        provenance,
    )


def partition_iid(train: Dataset, test: Dataset, spec: PartitionSpec) -> FederatedSplit:
    gen = rngs.stream(spec.seed, rngs.PARTITION)
    tr = np.array_split(gen.permutation(len(train)), spec.num_clients)
    te = np.array_split(gen.permutation(len(test)), spec.num_clients)
    return FederatedSplit(
        train, test, [np.sort(ix) for ix in tr], [np.sort(ix) for ix in te],
        [{"scheme": "iid"} for _ in range(spec.num_clients)],
    )


def partition(train: Dataset, test: Dataset, spec: PartitionSpec) -> FederatedSplit:
    fn = {
        "pathological": partition_pathological,
        "practical": partition_practical,
        "iid": partition_iid,
    }[spec.scheme]
    split = fn(train, test, spec)
    for i, (tr, te) in enumerate(zip(split.train_indices, split.test_indices)):
        if len(tr) == 0 or len(te) == 0:
            raise DataError(f"client {i} received an empty train or test set")
    return split


def split_from_manifest(train: Dataset, test: Dataset, manifest: dict[str, Any]) -> FederatedSplit:
    try:
        clients = manifest["clients"]
        return FederatedSplit(
            train,
            test,
            [np.asarray(c["train_indices"], dtype=np.int64) for c in clients],
            [np.asarray(c["test_indices"], dtype=np.int64) for c in clients],
            manifest.get("provenance", []),
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed split manifest: {exc}") from exc
