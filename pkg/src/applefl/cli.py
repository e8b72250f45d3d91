"""Command-line driver: ``applefl partition|train|eval|export``.

Exit codes: 0 ok, 1 config error, 2 data error, 3 numeric error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ALGORITHMS, parse_config
from .errors import AppleFLError, DataError
from .experiment import evaluate_checkpoint, prepare, provenance, train
from .metrics import bmcta, line_chart_svg, read_dr_csv, read_metrics_csv

log = logging.getLogger("applefl")

EXIT_IO = 4


def _load(args: argparse.Namespace):
    config = parse_config(args.config)
    overrides = {
        "rounds": getattr(args, "rounds", None),
        "seed": getattr(args, "seed", None),
        "algorithm": getattr(args, "algorithm", None),
        "budget": getattr(args, "budget", None),
        "workers": getattr(args, "workers", None),
        "output_dir": getattr(args, "output_dir", None),
    }
    if any(v is not None for v in overrides.values()):
        config = config.with_overrides(**overrides)
    return config


def cmd_partition(args: argparse.Namespace) -> int:
    config = _load(args)
    split, _ = prepare(config)
    manifest = {"config": provenance(config), **split.manifest()}
    out = Path(args.out) if args.out else Path(config.output_dir) / "split.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(manifest, sort_keys=True, separators=(",", ":")))
    sizes = split.train_sizes()
    print(f"wrote {out}: {split.num_clients} clients, train sizes {sizes}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _load(args)
    outcome = train(config, workers=args.workers, resume=args.resume)
    if outcome.rows:
        print(f"{config.algorithm}: BMCTA {bmcta(outcome.rows):.4f} over {config.rounds} rounds -> {outcome.output_dir}")
    else:
        print(f"{config.algorithm}: no rounds run -> {outcome.output_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load(args) if args.config else None
    accs = evaluate_checkpoint(args.checkpoint, config)
    for i, acc in enumerate(accs):
        print(f"client {i}: {acc:.6f}")
    print(f"mean: {float(np.mean(accs)):.6f}")
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    rows = read_metrics_csv(run_dir / "metrics.csv")
    if not rows:
        raise DataError(f"{run_dir / 'metrics.csv'}: no metric rows to export")
    acc, loss = defaultdict(list), defaultdict(list)
    for row in rows:
        acc[row.round].append(row.test_accuracy)
        loss[row.round].append(row.train_loss)
    tag = rows[0].algorithm
    (out / "accuracy.svg").write_text(line_chart_svg(
        {tag: [(r, float(np.mean(v))) for r, v in sorted(acc.items())]}, "mean client test accuracy", ylabel="accuracy"))
    (out / "loss.svg").write_text(line_chart_svg(
        {tag: [(r, float(np.mean(v))) for r, v in sorted(loss.items())]}, "mean client training loss", ylabel="loss"))
    written = ["accuracy.svg", "loss.svg"]

    dr_path = run_dir / "dr_trace.csv"
    if dr_path.exists():
        traces = read_dr_csv(dr_path)
        if traces:
            n = len(traces[0].weights)
            first = [t for t in traces if t.client == args.client]
            (out / "dr_client.svg").write_text(line_chart_svg(
                {f"p_{args.client + 1},{j + 1}": [(t.round, t.weights[j]) for t in first] for j in range(n)},
                f"DR vector of client {args.client + 1}", ylabel="weight"))
            (out / "dr_self.svg").write_text(line_chart_svg(
                {f"p_{i + 1},{i + 1}": [(t.round, t.weights[i]) for t in traces if t.client == i] for i in range(n)},
                "self-relationships", ylabel="weight"))
            written += ["dr_client.svg", "dr_self.svg"]
    print(f"wrote {', '.join(written)} to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="applefl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_overrides(p: argparse.ArgumentParser) -> None:
        p.add_argument("--rounds", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--algorithm", choices=ALGORITHMS)
        p.add_argument("--budget", type=int, help="max peer core models downloaded per client per round")
        p.add_argument("--output-dir", dest="output_dir")

    p = sub.add_parser("partition", help="partition the data and write a split manifest")
    p.add_argument("config")
    p.add_argument("--out", help="manifest path (default <output_dir>/split.json)")
    add_overrides(p)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", help="run an experiment")
    p.add_argument("config")
    p.add_argument("--workers", type=int, help="client threads per round (results do not depend on it)")
    p.add_argument("--resume", help="continue from a checkpoint.json")
    add_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="recompute per-client accuracy from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--config", help="config to use instead of the one embedded in the checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="render SVG curves from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out")
    p.add_argument("--client", type=int, default=0, help="client whose DR vector is plotted")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except AppleFLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        code = EXIT_IO if isinstance(exc, OSError) else 2
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
