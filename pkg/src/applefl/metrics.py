"""Per-client accuracy, BMCTA, CSV export and a tiny SVG line-chart writer."""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .data import Dataset
from .errors import ConfigError, DataError
from .numerics import ModelSpec, predict

METRIC_COLUMNS = (
    "round",
    "client",
    "algorithm",
    "train_loss",
    "penalized_loss",
    "test_accuracy",
    "bytes_up",
    "bytes_down",
)


@dataclass(frozen=True)
class MetricRow:
    round: int
    client: int
    algorithm: str
    train_loss: float
    penalized_loss: float
    test_accuracy: float
    bytes_up: int = 0
    bytes_down: int = 0


@dataclass(frozen=True)
class DRTrace:
    round: int
    client: int
    weights: tuple[float, ...]


def client_accuracy(spec: ModelSpec, params: np.ndarray, test: Dataset) -> float:
    if len(test) == 0:
        raise ConfigError("cannot compute accuracy on an empty test set")
    correct = int((predict(spec, params, test.inputs) == test.labels).sum())
    return correct / len(test)


def bmcta(rows: Iterable[MetricRow], weights: Sequence[float] | None = None) -> float:
    """Best (over rounds) mean (over clients) client test accuracy.

    The mean is unweighted unless per-client ``weights`` are given.
    """
    by_round: dict[int, dict[int, float]] = defaultdict(dict)
    for row in rows:
        by_round[row.round][row.client] = row.test_accuracy
    if not by_round:
        raise DataError("bmcta needs at least one metric row")
    clients = sorted(set().union(*(set(v) for v in by_round.values())))
    best = -np.inf
    for rnd in sorted(by_round):
        missing = [c for c in clients if c not in by_round[rnd]]
        if missing:
            raise DataError(f"no test accuracy for round {rnd}, client {missing[0]}")
        accs = np.array([by_round[rnd][c] for c in clients])
        mean = float(accs.mean()) if weights is None else float(np.average(accs, weights=weights))
        best = max(best, mean)
    return best


def round_means(rows: Iterable[MetricRow]) -> dict[int, float]:
    by_round: dict[int, list[float]] = defaultdict(list)
    for row in rows:
        by_round[row.round].append(row.test_accuracy)
    return {r: float(np.mean(v)) for r, v in sorted(by_round.items())}


# ---------------------------------------------------------------------------
# CSV


def _fmt(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def _write(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]], config: dict | None) -> None:
    buf = io.StringIO()
    if config is not None:
        buf.write("# config: " + json.dumps(config, sort_keys=True, separators=(",", ":")) + "\r\n")
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    try:
        Path(path).write_text(buf.getvalue(), newline="")
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def export_metrics_csv(rows: Iterable[MetricRow], path: str | Path, config: dict | None = None) -> None:
    _write(Path(path), METRIC_COLUMNS, ([getattr(r, c) for c in METRIC_COLUMNS] for r in rows), config)


def export_dr_csv(traces: Sequence[DRTrace], path: str | Path, num_clients: int, config: dict | None = None) -> None:
    header = ["round", "client"] + [f"p_{j + 1}" for j in range(num_clients)]
    _write(Path(path), header, ([t.round, t.client, *t.weights] for t in traces), config)


def _read(path: Path) -> tuple[list[str], list[list[str]]]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    records = list(csv.reader(lines))
    if not records:
        raise DataError(f"{path}: empty CSV, no header row")
    return records[0], records[1:]


def read_metrics_csv(path: str | Path) -> list[MetricRow]:
    header, records = _read(Path(path))
    if tuple(header) != METRIC_COLUMNS:
        raise DataError(f"{path}: unexpected metrics header {header}")
    return [
        MetricRow(int(r[0]), int(r[1]), r[2], float(r[3]), float(r[4]), float(r[5]), int(r[6]), int(r[7]))
        for r in records
    ]


def read_dr_csv(path: str | Path) -> list[DRTrace]:
    header, records = _read(Path(path))
    if header[:2] != ["round", "client"]:
        raise DataError(f"{path}: unexpected DR trace header {header}")
    return [DRTrace(int(r[0]), int(r[1]), tuple(float(v) for v in r[2:])) for r in records]


def read_config_header(path: str | Path) -> dict | None:
    with open(path) as fh:
        first = fh.readline()
    if first.startswith("# config: "):
        return json.loads(first[len("# config: "):])
    return None


# ---------------------------------------------------------------------------
# SVG


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
            "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939")


def line_chart_svg(
    series: dict[str, Sequence[tuple[float, float]]],
    title: str,
    xlabel: str = "round",
    ylabel: str = "",
    width: int = 640,
    height: int = 400,
) -> str:
    points = [p for pts in series.values() for p in pts]
    if not points:
        raise DataError(f"nothing to plot for {title!r}")
    xs, ys = [p[0] for p in points], [p[1] for p in points]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    left, right, top, bottom = 60, 150, 30, 40
    pw, ph = width - left - right, height - top - bottom

    def sx(x: float) -> float:
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y: float) -> float:
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{title}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{xlabel}</text>',
        f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" transform="rotate(-90 14 {top + ph / 2:.1f})">{ylabel}</text>',
    ]
    for k in range(5):
        yv = y0 + (y1 - y0) * k / 4
        out.append(f'<text x="{left - 4}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
        xv = x0 + (x1 - x0) * k / 4
        out.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 14}" text-anchor="middle">{xv:.3g}</text>')
    for n, (name, pts) in enumerate(series.items()):
        color = _PALETTE[n % len(_PALETTE)]
        path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        ly = top + 12 + 14 * n
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 28}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 32}" y="{ly + 4}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
