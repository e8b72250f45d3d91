"""Experiment configuration: one JSON document describes a whole run."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema

from .apple import SchedulerSpec
from .data import DEFAULT_SHARD_FRACTIONS, PartitionSpec
from .errors import ConfigError
from .numerics import ModelSpec

ALGORITHMS = ("apple", "fedavg", "fedavg_local", "fedavg_ft", "fedprox_ft", "separate")
OUTPUT_DIR_ENV = "APPLEFL_OUTPUT_DIR"

_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}
_pos_num = {"type": "number", "exclusiveMinimum": 0}
_nonneg_num = {"type": "number", "minimum": 0}

SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["data"],
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["softmax_regression", "mlp_1hidden"]},
                "hidden_dim": _pos_int,
                "input_dim": _pos_int,
                "num_classes": {"type": "integer", "minimum": 2},
                "activation": {"enum": ["relu"]},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["source"],
            "properties": {
                "source": {"enum": ["synthetic", "idx", "csv"]},
                "num_classes": {"type": "integer", "minimum": 2},
                "feature_dim": _pos_int,
                "train_per_class": _pos_int,
                "test_per_class": _pos_int,
                "class_center_scale": _pos_num,
                "noise_sigma": _nonneg_num,
                "train_images": {"type": "string"},
                "train_labels": {"type": "string"},
                "test_images": {"type": "string"},
                "test_labels": {"type": "string"},
                "train_path": {"type": "string"},
                "test_path": {"type": "string"},
                "label_column": {"type": "string"},
            },
        },
        "partition": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "scheme": {"enum": ["pathological", "practical", "iid"]},
                "num_clients": _pos_int,
                "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
                "classes_per_client": _pos_int,
                "shard_fractions": {"type": "array", "items": _pos_num, "minItems": 1},
                "manifest": {"type": "string"},
            },
        },
        "algorithm": {"enum": list(ALGORITHMS)},
        "rounds": _nonneg_int,
        "local_epochs": _nonneg_int,
        "batch_size": _pos_int,
        "lr_net": _nonneg_num,
        "lr_dr": _nonneg_num,
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "lr_decay": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "scheduler": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["cosine", "exponential", "constant_zero"]},
                "mu": _nonneg_num,
                "L_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "epsilon": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "budget": {"oneOf": [{"type": "null"}, _pos_int]},
        "mu_prox": _nonneg_num,
        "finetune_epochs": _nonneg_int,
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "workers": _pos_int,
        "checkpoint_every": _nonneg_int,
        "output_dir": {"type": "string"},
    },
}

DEFAULTS: dict[str, Any] = {
    "model": {"kind": "softmax_regression", "activation": "relu"},
    "partition": {"scheme": "pathological", "num_clients": 12, "classes_per_client": 2,
                  "shard_fractions": list(DEFAULT_SHARD_FRACTIONS)},
    "algorithm": "apple",
    "rounds": 160,
    "local_epochs": 5,
    "batch_size": 256,
    "lr_net": 0.01,
    "lr_dr": 0.001,
    "momentum": 0.9,
    "lr_decay": 1.0,
    "scheduler": {"kind": "cosine", "mu": 0.1, "L_fraction": 0.3, "epsilon": 1e-3},
    "budget": None,
    "mu_prox": 0.01,
    "finetune_epochs": 5,
    "seed": 0,
    "workers": 1,
    "checkpoint_every": 0,
    "output_dir": "runs/default",
}

SYNTHETIC_DEFAULTS = {
    "num_classes": 10,
    "feature_dim": 20,
    "train_per_class": 500,
    "test_per_class": 100,
    "class_center_scale": 1.0,
    "noise_sigma": 1.0,
}

_REQUIRED_DATA_KEYS = {
    "synthetic": (),
    "idx": ("train_images", "train_labels", "test_images", "test_labels"),
    "csv": ("train_path", "test_path", "label_column"),
}


@dataclass(frozen=True)
class SchedulerConfig:
    kind: str
    mu: float
    L_fraction: float
    epsilon: float


@dataclass
class RunConfig:
    model: dict[str, Any]
    data: dict[str, Any]
    partition: PartitionSpec
    algorithm: str
    rounds: int
    local_epochs: int
    batch_size: int
    lr_net: float
    lr_dr: float
    momentum: float
    lr_decay: float
    scheduler: SchedulerConfig
    budget: int | None
    mu_prox: float
    finetune_epochs: int
    seed: int
    workers: int
    checkpoint_every: int
    output_dir: str
    manifest: str | None = None
    document: dict[str, Any] = field(default_factory=dict)
    base_dir: Path = Path(".")

    def scheduler_spec(self) -> SchedulerSpec:
        return SchedulerSpec(
            kind=self.scheduler.kind,
            L=max(1, round(self.scheduler.L_fraction * self.rounds)),
            epsilon=self.scheduler.epsilon,
            mu=self.scheduler.mu,
        )

    def model_spec(self, input_dim: int, num_classes: int) -> ModelSpec:
        m = self.model
        if m.get("input_dim", input_dim) != input_dim:
            raise ConfigError(f"model expects {m['input_dim']} inputs, data has {input_dim}", "/model/input_dim")
        if m.get("num_classes", num_classes) != num_classes:
            raise ConfigError(f"model expects {m['num_classes']} classes, data has {num_classes}", "/model/num_classes")
        return ModelSpec(
            kind=m["kind"],
            input_dim=input_dim,
            num_classes=num_classes,
            hidden_dim=m.get("hidden_dim", 0),
            activation=m.get("activation", "relu"),
        )

    def resolve_path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        doc = copy.deepcopy(self.document)
        for key, value in overrides.items():
            if value is not None:
                doc[key] = value
        cfg = parse_config(doc, base_dir=self.base_dir)
        # an explicit output directory beats the environment variable
        if overrides.get("output_dir") is not None:
            cfg.output_dir = overrides["output_dir"]
        return cfg


def _pointer(path: Any) -> str:
    # JSON pointer (RFC 6901); the document root is the empty string
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in path)


def _merged(defaults: dict[str, Any], given: dict[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merged(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_config(source: str | Path | dict[str, Any], base_dir: str | Path | None = None) -> RunConfig:
    """Validate a JSON config (path, JSON text or dict) and apply defaults."""
    if isinstance(source, dict):
        raw = source
        base = Path(base_dir) if base_dir is not None else Path(".")
    else:
        path = Path(source)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from exc
        base = Path(base_dir) if base_dir is not None else path.parent
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", "")

    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(err.message, _pointer(err.absolute_path))

    doc = _merged(DEFAULTS, raw)
    data = doc["data"]
    if data["source"] == "synthetic":
        doc["data"] = data = _merged(SYNTHETIC_DEFAULTS, data)
    for key in _REQUIRED_DATA_KEYS[data["source"]]:
        if key not in data:
            raise ConfigError(f"data source {data['source']!r} requires {key!r}", f"/data/{key}")

    if doc["model"]["kind"] == "mlp_1hidden" and "hidden_dim" not in doc["model"]:
        raise ConfigError("mlp_1hidden requires hidden_dim", "/model/hidden_dim")
    if doc["algorithm"] == "fedprox_ft" and doc["mu_prox"] <= 0:
        raise ConfigError("fedprox_ft requires mu_prox > 0", "/mu_prox")

    part = doc["partition"]
    part_seed = part.get("seed", doc["seed"])
    partition = PartitionSpec(
        scheme=part["scheme"],
        num_clients=part["num_clients"],
        seed=part_seed,
        classes_per_client=part["classes_per_client"],
        shard_fractions=tuple(part["shard_fractions"]),
    )
    if partition.scheme == "practical" and len(partition.shard_fractions) != partition.num_clients:
        raise ConfigError(
            f"{len(partition.shard_fractions)} shard fractions for {partition.num_clients} clients",
            "/partition/shard_fractions",
        )
    budget = doc["budget"]
    if budget is not None and budget > partition.num_clients - 1:
        raise ConfigError(f"budget M={budget} exceeds N-1={partition.num_clients - 1}", "/budget")

    sched = doc["scheduler"]
    output_dir = os.environ.get(OUTPUT_DIR_ENV) or doc["output_dir"]
    cfg = RunConfig(
        model=doc["model"],
        data=data,
        partition=partition,
        algorithm=doc["algorithm"],
        rounds=doc["rounds"],
        local_epochs=doc["local_epochs"],
        batch_size=doc["batch_size"],
        lr_net=float(doc["lr_net"]),
        lr_dr=float(doc["lr_dr"]),
        momentum=float(doc["momentum"]),
        lr_decay=float(doc["lr_decay"]),
        scheduler=SchedulerConfig(sched["kind"], float(sched["mu"]), float(sched["L_fraction"]), float(sched["epsilon"])),
        budget=budget,
        mu_prox=float(doc["mu_prox"]),
        finetune_epochs=doc["finetune_epochs"],
        seed=doc["seed"],
        workers=doc["workers"],
        checkpoint_every=doc["checkpoint_every"],
        output_dir=output_dir,
        manifest=part.get("manifest"),
        document=doc,
        base_dir=base,
    )
    cfg.scheduler_spec()
    return cfg
