"""Glue between a RunConfig and the algorithms: data preparation, outputs, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from . import baselines, federation
from . import rng as rngs
from .config import RunConfig, parse_config
from .data import FederatedSplit, load_csv, load_idx, partition, split_from_manifest, split_per_class, synth_clusters
from .errors import DataError
from .federation import RoundReport
from .metrics import METRIC_COLUMNS, DRTrace, MetricRow, _fmt, client_accuracy, read_dr_csv, read_metrics_csv
from .numerics import ModelSpec, init_params

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "applefl-checkpoint"
CHECKPOINT_VERSION = 1

# execution knobs that never change results and are kept out of provenance headers
_EXECUTION_KEYS = ("workers", "output_dir", "checkpoint_every")


def provenance(config: RunConfig) -> dict[str, Any]:
    return {k: v for k, v in config.document.items() if k not in _EXECUTION_KEYS}


def load_datasets(config: RunConfig):
    d = config.data
    if d["source"] == "synthetic":
        full = synth_clusters(
            d["num_classes"], d["feature_dim"], d["train_per_class"] + d["test_per_class"],
            d["class_center_scale"], d["noise_sigma"], config.seed,
        )
        return split_per_class(full, d["train_per_class"])
    if d["source"] == "idx":
        train = load_idx(config.resolve_path(d["train_images"]), config.resolve_path(d["train_labels"]))
        test = load_idx(config.resolve_path(d["test_images"]), config.resolve_path(d["test_labels"]))
    else:
        train = load_csv(config.resolve_path(d["train_path"]), d["label_column"])
        test = load_csv(config.resolve_path(d["test_path"]), d["label_column"])
    if train.feature_dim != test.feature_dim:
        raise DataError(f"train has {train.feature_dim} features but test has {test.feature_dim}")
    k = max(train.num_classes, test.num_classes)
    return (type(train)(train.inputs, train.labels, k), type(test)(test.inputs, test.labels, k))


def prepare(config: RunConfig) -> tuple[FederatedSplit, ModelSpec]:
    train, test = load_datasets(config)
    if config.manifest:
        path = config.resolve_path(config.manifest)
        try:
            manifest = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: cannot read split manifest: {exc}") from exc
        split = split_from_manifest(train, test, manifest)
    else:
        split = partition(train, test, config.partition)
    return split, config.model_spec(train.feature_dim, train.num_classes)


class CsvSink:
    """Append-only CSV writer; each call flushes so partial runs leave valid files."""

    def __init__(self, path: Path, header: list[str] | tuple[str, ...], config: dict[str, Any] | None):
        self.path = path
        with path.open("w", newline="") as fh:
            if config is not None:
                fh.write("# config: " + json.dumps(config, sort_keys=True, separators=(",", ":")) + "\r\n")
            csv.writer(fh, lineterminator="\r\n").writerow(header)

    def append(self, rows: list[list[Any]]) -> None:
        with self.path.open("a", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            for row in rows:
                writer.writerow([_fmt(v) for v in row])


def report_rows(report: RoundReport, algorithm: str) -> list[MetricRow]:
    return [
        MetricRow(
            round=report.round,
            client=i,
            algorithm=algorithm,
            train_loss=report.train_loss[i],
            penalized_loss=report.penalized_loss[i],
            test_accuracy=report.test_accuracy[i],
            bytes_up=report.bytes_up[i],
            bytes_down=report.bytes_down[i],
        )
        for i in range(len(report.test_accuracy))
    ]


def report_traces(report: RoundReport) -> list[DRTrace]:
    if report.dr is None:
        return []
    return [DRTrace(report.round, i, tuple(w)) for i, w in enumerate(report.dr)]


def write_checkpoint(path: Path, config: RunConfig, state: dict[str, Any], round_: int) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "algorithm": config.algorithm,
        "round": round_,
        "config": provenance(config),
        "base_dir": str(config.base_dir.resolve()),
        "state": state,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")))
    os.replace(tmp, path)


def read_checkpoint(path: str | Path) -> dict[str, Any]:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a JSON checkpoint: {exc.msg}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format")
    return payload


@dataclass
class TrainOutcome:
    rows: list[MetricRow]
    traces: list[DRTrace]
    output_dir: Path
    result: Any


def _state_dict(config: RunConfig, result: Any) -> dict[str, Any]:
    if config.algorithm == "apple":
        return federation.state_to_dict(result.server, result.clients)
    return baselines.state_to_dict(result.state)


def train(config: RunConfig, workers: int | None = None, resume: str | Path | None = None) -> TrainOutcome:
    """Run the configured algorithm, writing metrics.csv, dr_trace.csv and checkpoint.json."""
    workers = workers or config.workers
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    split, spec = prepare(config)
    prov = provenance(config)

    apple_state = baseline_state = None
    prior_rows: list[MetricRow] = []
    prior_traces: list[DRTrace] = []
    if resume is not None:
        ckpt = read_checkpoint(resume)
        if ckpt["algorithm"] != config.algorithm:
            raise DataError(f"checkpoint is for {ckpt['algorithm']!r}, config runs {config.algorithm!r}")
        if config.algorithm == "apple":
            apple_state = federation.state_from_dict(ckpt["state"], split)
        else:
            baseline_state = baselines.state_from_dict(ckpt["state"])
        prior_rows = [r for r in read_metrics_csv(out / "metrics.csv") if r.round <= ckpt["round"]]
        if config.algorithm == "apple" and (out / "dr_trace.csv").exists():
            prior_traces = [t for t in read_dr_csv(out / "dr_trace.csv") if t.round <= ckpt["round"]]

    metrics_sink = CsvSink(out / "metrics.csv", METRIC_COLUMNS, prov)
    metrics_sink.append([[getattr(r, c) for c in METRIC_COLUMNS] for r in prior_rows])
    n = split.num_clients
    trace_sink = None
    if config.algorithm == "apple":
        trace_sink = CsvSink(out / "dr_trace.csv", ["round", "client"] + [f"p_{j + 1}" for j in range(n)], prov)
        trace_sink.append([[t.round, t.client, *t.weights] for t in prior_traces])

    rows, traces = list(prior_rows), list(prior_traces)
    ckpt_path = out / "checkpoint.json"
    live: dict[str, Any] = {}

    def on_round(report: RoundReport) -> None:
        new_rows = report_rows(report, config.algorithm)
        rows.extend(new_rows)
        metrics_sink.append([[getattr(r, c) for c in METRIC_COLUMNS] for r in new_rows])
        if trace_sink is not None:
            new_traces = report_traces(report)
            traces.extend(new_traces)
            trace_sink.append([[t.round, t.client, *t.weights] for t in new_traces])
        every = config.checkpoint_every
        if every and report.round % every == 0 and report.round != config.rounds and "state" in live:
            write_checkpoint(ckpt_path, config, live["state"](), report.round)

    if config.algorithm == "apple":
        if apple_state is None:
            apple_state = federation.init_federation(config, split, spec)
        live["state"] = lambda: federation.state_to_dict(*apple_state)
        result = federation.run_experiment(config, split, spec, workers=workers, on_round=on_round, state=apple_state)
        final_round = result.server.round
    else:
        if baseline_state is None:
            baseline_state = _initial_baseline_state(config, split, spec)
        live["state"] = lambda: baselines.state_to_dict(baseline_state)
        result = baselines.run_baseline(config, split, spec, workers=workers, on_round=on_round, state=baseline_state)
        final_round = result.state.round
    write_checkpoint(ckpt_path, config, _state_dict(config, result), final_round)
    return TrainOutcome(rows, traces, out, result)


def _initial_baseline_state(config: RunConfig, split: FederatedSplit, spec: ModelSpec) -> baselines.BaselineState:
    n = split.num_clients
    if config.algorithm == "separate":
        return baselines.BaselineState(0, None, [init_params(spec, rngs.stream(config.seed, rngs.INIT, i)) for i in range(n)])
    g = init_params(spec, rngs.stream(config.seed, rngs.INIT, 0))
    return baselines.BaselineState(0, g, [g.copy() for _ in range(n)])


def evaluate_checkpoint(path: str | Path, config_override: RunConfig | None = None) -> list[float]:
    """Per-client test accuracy of the models stored in a checkpoint."""
    ckpt = read_checkpoint(path)
    config = config_override or parse_config(ckpt["config"], base_dir=ckpt["base_dir"])
    split, spec = prepare(config)
    if ckpt["algorithm"] == "apple":
        _, clients = federation.state_from_dict(ckpt["state"], split)
        models = [c.personalized_model() for c in clients]
    else:
        models = baselines.state_from_dict(ckpt["state"]).client_models
    return [client_accuracy(spec, m, split.client_test(i)) for i, m in enumerate(models)]
