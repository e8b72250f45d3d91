"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in pytest's terminal summary (see conftest.py) and
also when this file is run directly: ``python -m tests.test_acceptance``.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from applefl import baselines, federation
from applefl import rng as rngs
from applefl.apple import SchedulerSpec, core_gradient, dr_gradient, penalized_loss, prox_center, scheduler_value
from applefl.baselines import prox_penalty
from applefl.cli import main as cli_main
from applefl.config import parse_config
from applefl.data import FederatedSplit, PartitionSpec, partition_pathological, partition_practical
from applefl.data import split_per_class, synth_clusters
from applefl.experiment import prepare, report_rows
from applefl.federation import BYTES_PER_VALUE, ClientState, select_downloads
from applefl.metrics import bmcta
from applefl.numerics import axpy_combination, backward, forward_loss, param_count

from .oracles import central_difference, max_rel_error, random_instance

RESULTS: dict[int, str] = {}

SEEDS = (1, 2, 3, 4, 5)

# Criterion-6 setup: 12 silos, practical non-IID split of noisy Gaussian clusters.
ORDERING_CONFIG = {
    "data": {
        "source": "synthetic",
        "num_classes": 10,
        "feature_dim": 20,
        "train_per_class": 500,
        "test_per_class": 100,
        "class_center_scale": 1.0,
        "noise_sigma": 2.0,
    },
    "partition": {"scheme": "practical", "num_clients": 12},
    "model": {"kind": "softmax_regression"},
    "rounds": 40,
    "local_epochs": 5,
    "batch_size": 256,
    "lr_net": 0.01,
    "lr_dr": 0.001,
    "scheduler": {"kind": "cosine", "mu": 0.1, "L_fraction": 0.3},
}


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    RESULTS[number] = line
    print(line, flush=True)
    assert ok, line


def run_algorithm(doc: dict, seed: int, algorithm: str, split_and_spec=None):
    config = parse_config(dict(doc, seed=seed, algorithm=algorithm))
    split, spec = split_and_spec or prepare(config)
    if algorithm == "apple":
        result = federation.run_experiment(config, split, spec)
    else:
        result = baselines.run_baseline(config, split, spec)
    rows = [row for rep in result.reports for row in report_rows(rep, algorithm)]
    return bmcta(rows), result


# ---------------------------------------------------------------------------


def test_criterion_1_gradient_oracles():
    start = time.perf_counter()
    worst = {"forward/backward": 0.0, "dr_gradient": 0.0, "core_gradient": 0.0, "prox_gradient": 0.0}
    counts = dict.fromkeys(worst, 0)

    for seed in range(50):
        spec, params, batch = random_instance(seed)
        numeric = central_difference(lambda p: forward_loss(spec, p, batch), params)
        worst["forward/backward"] = max(worst["forward/backward"], max_rel_error(backward(spec, params, batch).grad, numeric))
        counts["forward/backward"] += 1

    seed = 0
    while counts["dr_gradient"] < 50:
        seed += 1
        spec, _, batch = random_instance(10_000 + seed)
        gen = np.random.default_rng(seed)
        n = int(gen.integers(1, 6))
        cores = gen.normal(0.0, 0.5, size=(n, param_count(spec)))
        dr = gen.normal(0.5, 0.4, size=n)
        p0 = prox_center(gen.integers(1, 100, size=n))
        lam, mu = float(gen.uniform()), float(gen.uniform(0, 2))
        i = int(gen.integers(0, n))
        wp = axpy_combination(dr, cores)
        if spec.kind == "mlp_1hidden":
            hidden = batch.inputs @ wp[: spec.input_dim * spec.hidden_dim].reshape(spec.input_dim, spec.hidden_dim)
            hidden += wp[spec.input_dim * spec.hidden_dim : spec.input_dim * spec.hidden_dim + spec.hidden_dim]
            if np.abs(hidden).min() < 1e-3:  # skip instances sitting on a ReLU kink
                continue
        g = backward(spec, wp, batch).grad

        def objective(d, c=cores):
            return penalized_loss(forward_loss(spec, axpy_combination(d, c), batch), d, p0, lam, mu)

        numeric = central_difference(objective, dr)
        worst["dr_gradient"] = max(worst["dr_gradient"], max_rel_error(dr_gradient(g, cores, dr, p0, lam, mu), numeric))

        def wrt_core(w):
            c = cores.copy()
            c[i] = w
            return objective(dr, c)

        numeric = central_difference(wrt_core, cores[i])
        worst["core_gradient"] = max(worst["core_gradient"], max_rel_error(core_gradient(g, dr[i]), numeric))
        counts["dr_gradient"] += 1
        counts["core_gradient"] += 1

    for seed in range(50):
        gen = np.random.default_rng(20_000 + seed)
        dim = int(gen.integers(1, 40))
        w, center = gen.normal(size=dim), gen.normal(size=dim)
        mu = float(gen.uniform(1e-3, 10))
        numeric = central_difference(lambda x: prox_penalty(x, center, mu)[0], w)
        worst["prox_gradient"] = max(worst["prox_gradient"], max_rel_error(prox_penalty(w, center, mu)[1], numeric))
        counts["prox_gradient"] += 1

    elapsed = time.perf_counter() - start
    ok = all(v <= 1e-4 for v in worst.values()) and all(c == 50 for c in counts.values()) and elapsed < 10
    detail = ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items())
    record(1, "gradient oracles on 50 instances each", ok, f"{detail}; {elapsed:.1f}s")


def test_criterion_2_schedulers():
    start = time.perf_counter()
    failures = []
    for L in (1, 4, 10, 16, 48):
        cos = SchedulerSpec("cosine", L=L)
        exp = SchedulerSpec("exponential", L=L, epsilon=1e-3)
        if scheduler_value(cos, 0) != 1.0 or scheduler_value(exp, 0) != 1.0:
            failures.append(f"lambda(0) != 1 at L={L}")
        if abs(scheduler_value(cos, L / 2) - 0.5) > 1e-12:
            failures.append(f"cosine lambda(L/2) at L={L}")
        below = math.nextafter(float(L), 0.0)
        if abs(scheduler_value(exp, below) - 1e-3) > 1e-9:
            failures.append(f"exponential just below L={L}")
        for spec in (cos, exp):
            if any(scheduler_value(spec, r) != 0.0 for r in (L, L + 0.5, L + 1, 10 * L)):
                failures.append(f"{spec.kind} nonzero at/after L={L}")
            grid = np.linspace(0.0, 2.0 * L, 1000)
            values = np.array([scheduler_value(spec, r) for r in grid])
            if np.any(np.diff(values) > 0):
                failures.append(f"{spec.kind} not monotone for L={L}")
    elapsed = time.perf_counter() - start
    record(2, "cosine and exponential loss schedulers", not failures and elapsed < 1,
           f"{'; '.join(failures) or 'all checks hold'}; {elapsed:.2f}s")


def _selection_client(dr, index=0, counts=None):
    n = len(dr)
    return ClientState(
        index=index,
        train=None,
        test=None,
        dr=np.asarray(dr, dtype=np.float64),
        velocity=np.zeros(1),
        cache=np.zeros((n, 1)),
        cache_versions=np.zeros(n, dtype=np.int64),
        download_count=np.ones(n, dtype=np.int64) if counts is None else np.asarray(counts, dtype=np.int64),
    )


def test_criterion_3_selection_probabilities():
    start = time.perf_counter()
    draws = 100_000

    # all |p_ij| equal, N = 12, M = 3: each peer w.p. M / (N - 1)
    n, m = 12, 3
    client = _selection_client(np.full(n, 1 / n))
    gen = rngs.stream(1, rngs.SELECT, 0, 0)
    hits = np.zeros(n)
    for _ in range(draws):
        hits[select_downloads(client, 5, m, n, gen)] += 1
    uniform_err = float(np.abs(hits[1:] / draws - m / (n - 1)).max())

    # peers with |p| = 0 and |p| = 1, b = 6 * 1 / 3 = 2, M = 1: probabilities 1/3 and 2/3
    client = _selection_client([0.5, 0.0, 1.0])
    gen = rngs.stream(2, rngs.SELECT, 0, 0)
    second = sum(select_downloads(client, 6, 1, 3, gen)[0] == 2 for _ in range(draws))
    weighted_err = max(abs(second / draws - 2 / 3), abs((draws - second) / draws - 1 / 3))

    # never-downloaded peers first, exhaustively over N <= 6, clients, masks and budgets
    violations = checked = 0
    gen = np.random.default_rng(3)
    for n in range(2, 7):
        for i in range(n):
            peers = [j for j in range(n) if j != i]
            for mask in itertools.product((0, 1), repeat=n - 1):
                counts = np.ones(n, dtype=np.int64)
                counts[peers] = mask
                fresh = {j for j, seen in zip(peers, mask) if not seen}
                for budget in range(1, n):
                    picked = select_downloads(_selection_client(gen.normal(size=n), i, counts), 3, budget, n, gen)
                    checked += 1
                    valid = len(picked) == len(set(picked)) == budget and i not in picked
                    valid &= set(picked) <= fresh if len(fresh) >= budget else fresh <= set(picked)
                    violations += not valid

    elapsed = time.perf_counter() - start
    ok = uniform_err <= 0.01 and weighted_err <= 0.01 and violations == 0 and elapsed < 30
    record(3, "budgeted selection probabilities", ok,
           f"uniform err {uniform_err:.4f}, 1/3-2/3 err {weighted_err:.4f}, "
           f"{violations}/{checked} rule violations; {elapsed:.1f}s")


def test_criterion_4_partitioners():
    start = time.perf_counter()
    full = synth_clusters(10, 3, 300, 1.0, 1.0, seed=0)
    train, test = split_per_class(full, 200)
    problems = []
    for seed in range(20):
        split = partition_pathological(train, test, PartitionSpec("pathological", num_clients=12, seed=seed))
        for i in range(12):
            if len(set(split.client_train(i).labels.tolist())) != 2:
                problems.append(f"pathological seed {seed} client {i}")
        for idx, ds in ((split.train_indices, train), (split.test_indices, test)):
            if not np.array_equal(np.sort(np.concatenate(idx)), np.arange(len(ds))):
                problems.append(f"pathological seed {seed} loses samples")

        split = partition_practical(train, test, PartitionSpec("practical", num_clients=12, seed=seed))
        for i in range(12):
            if set(split.client_train(i).labels.tolist()) != set(range(10)):
                problems.append(f"practical seed {seed} client {i} lacks a class")
        counts = np.array([np.bincount(split.client_train(i).labels, minlength=10) for i in range(12)])
        if not np.array_equal(counts.sum(axis=0), np.bincount(train.labels)):
            problems.append(f"practical seed {seed} shard sizes do not sum")
        shares = counts / counts.sum(axis=0)
        if not np.all(np.sum(np.abs(shares - 0.8) <= 0.05, axis=0) == 1):
            problems.append(f"practical seed {seed} lacks a unique 80% shard")
    elapsed = time.perf_counter() - start
    record(4, "pathological and practical partitioners over 20 seeds", not problems and elapsed < 10,
           f"{'; '.join(problems[:3]) or 'all invariants hold'}; {elapsed:.1f}s")


def test_criterion_5_degenerate_equivalences(tiny_synthetic_config):
    start = time.perf_counter()
    checks = {}

    # N = 1: APPLE with mu = 0 and a frozen DR (p = [1]) is Separate
    doc = dict(tiny_synthetic_config, partition={"scheme": "iid", "num_clients": 1}, lr_dr=0.0,
               scheduler={"kind": "cosine", "mu": 0.0, "L_fraction": 0.5})
    config = parse_config(doc)
    split, spec = prepare(config)
    apple = federation.run_experiment(config, split, spec)
    separate = baselines.run_separate(config, split, spec)
    checks["N=1 APPLE == Separate"] = (
        np.array_equal(apple.server.core_models[0], separate.state.client_models[0])
        and [r.test_accuracy for r in apple.reports] == [r.test_accuracy for r in separate.reports]
        and [r.train_loss for r in apple.reports] == [r.train_loss for r in separate.reports]
    )

    # FedProx with mu = 0 is FedAvg
    config = parse_config(tiny_synthetic_config)
    split, spec = prepare(config)
    fedavg = baselines.run_fedavg(config, split, spec)
    fedprox = baselines.run_fedprox(config, split, spec, mu_prox=0.0, algorithm="fedavg")
    checks["FedProx(0) == FedAvg"] = np.array_equal(fedavg.state.global_model, fedprox.state.global_model) and [
        r.test_accuracy for r in fedavg.reports
    ] == [r.test_accuracy for r in fedprox.reports]

    # both learning rates zero: nothing moves
    frozen = config.with_overrides(lr_net=0.0, lr_dr=0.0)
    server, clients = federation.init_federation(frozen, split, spec)
    before = (server.core_models.copy(), [c.dr.copy() for c in clients], [c.cache.copy() for c in clients])
    federation.run_experiment(frozen, split, spec, state=(server, clients))
    checks["zero learning rates freeze state"] = (
        np.array_equal(server.core_models, before[0])
        and all(np.array_equal(c.dr, d) for c, d in zip(clients, before[1]))
        and all(np.array_equal(c.cache, k) for c, k in zip(clients, before[2]))
    )
    elapsed = time.perf_counter() - start
    failed = [k for k, v in checks.items() if not v]
    record(5, "degenerate equivalences", not failed and elapsed < 10,
           f"{'failed: ' + ', '.join(failed) if failed else ', '.join(checks)}; {elapsed:.1f}s")


@pytest.mark.slow
def test_criterion_6_desk_scale_ordering():
    start = time.perf_counter()
    table = {}
    for seed in SEEDS:
        config = parse_config(dict(ORDERING_CONFIG, seed=seed))
        prepared = prepare(config)
        table[seed] = {
            alg: run_algorithm(ORDERING_CONFIG, seed, alg, prepared)[0]
            for alg in ("apple", "fedavg", "separate", "fedavg_local")
        }
    beats = {
        other: sum(table[s]["apple"] >= table[s][other] for s in SEEDS)
        for other in ("fedavg", "separate", "fedavg_local")
    }
    elapsed = time.perf_counter() - start
    ok = beats["fedavg"] >= 4 and beats["separate"] >= 4 and beats["fedavg_local"] >= 3 and elapsed < 300
    summary = "; ".join(
        f"seed {s}: " + " ".join(f"{a}={v:.3f}" for a, v in table[s].items()) for s in SEEDS
    )
    record(6, "APPLE BMCTA ordering vs FedAvg / Separate / FedAvg-local", ok,
           f"wins {beats['fedavg']}/5, {beats['separate']}/5, {beats['fedavg_local']}/5; {summary}; {elapsed:.0f}s")


def paired_split(seed: int, major_share: float = 0.7) -> FederatedSplit:
    """Four clients in two pairs: clients 0/1 share classes {0, 1}, clients 2/3 share {2, 3}.

    Inside a pair each class is split ``major_share`` / ``1 - major_share``,
    with the larger part going to a different client for each class.
    """
    full = synth_clusters(4, 10, 250, 1.0, 1.0, seed)
    train, test = split_per_class(full, 200)
    gen = np.random.default_rng(seed)
    parts: dict[str, list[list[np.ndarray]]] = {"train": [[] for _ in range(4)], "test": [[] for _ in range(4)]}
    for name, ds in (("train", train), ("test", test)):
        for c in range(4):
            idx = gen.permutation(np.flatnonzero(ds.labels == c))
            owners = (0, 1) if c < 2 else (2, 3)
            major, minor = owners[c % 2], owners[1 - c % 2]
            cut = int(round(major_share * len(idx)))
            parts[name][major].append(idx[:cut])
            parts[name][minor].append(idx[cut:])
    merge = lambda lists: [np.sort(np.concatenate(p)) for p in lists]  # noqa: E731
    return FederatedSplit(train, test, merge(parts["train"]), merge(parts["test"]))


@pytest.mark.slow
def test_criterion_7_dr_structure():
    start = time.perf_counter()
    doc = dict(ORDERING_CONFIG, partition={"scheme": "iid", "num_clients": 4})
    passed, notes = 0, []
    for seed in SEEDS:
        config = parse_config(dict(doc, seed=seed))
        split = paired_split(seed)
        spec = config.model_spec(split.train.feature_dim, split.train.num_classes)
        result = federation.run_experiment(config, split, spec)
        weights = np.abs(np.array([c.dr for c in result.clients]))
        good = True
        for i in range(4):
            pair = i ^ 1
            cross = [j for j in range(4) if j not in (i, pair)]
            good &= int(np.argmax(weights[i])) == i and weights[i, pair] > weights[i, cross].mean()
        passed += bool(good)
        notes.append(f"seed {seed} {'ok' if good else 'no'}")
    elapsed = time.perf_counter() - start
    record(7, "learned DR vectors reflect the client pairing", passed >= 4 and elapsed < 120,
           f"{passed}/5 seeds ({', '.join(notes)}); {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_8_budget_robustness():
    start = time.perf_counter()
    ratios, accounting_ok = {}, True
    for seed in SEEDS:
        config = parse_config(dict(ORDERING_CONFIG, seed=seed))
        prepared = prepare(config)
        dim = param_count(prepared[1])
        scores = {}
        for m in (1, 5, 11):
            score, result = run_algorithm(dict(ORDERING_CONFIG, budget=m), seed, "apple", prepared)
            scores[m] = score
            accounting_ok &= all(
                rep.bytes_down == [m * dim * BYTES_PER_VALUE] * 12 and all(len(d) == m for d in rep.downloads)
                for rep in result.reports
            )
        ratios[seed] = scores[1] / scores[11]
    elapsed = time.perf_counter() - start
    ok = all(r >= 0.9 for r in ratios.values()) and accounting_ok and elapsed < 600
    record(8, "budget M=1 keeps >= 90% of unbudgeted BMCTA", ok,
           "ratios " + ", ".join(f"{s}:{r:.3f}" for s, r in ratios.items())
           + f"; byte accounting {'exact' if accounting_ok else 'WRONG'}; {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_9_determinism(tmp_path):
    start = time.perf_counter()
    config_path = tmp_path / "ordering.json"
    config_path.write_text(json.dumps(dict(ORDERING_CONFIG, seed=1)))
    runs = {}
    for name, workers in (("first", 1), ("again", 1), ("threads", 8)):
        out = tmp_path / name
        code = cli_main(["train", str(config_path), "--output-dir", str(out), "--workers", str(workers)])
        assert code == 0
        runs[name] = {f: (out / f).read_bytes() for f in ("metrics.csv", "dr_trace.csv", "checkpoint.json")}
    same_repeat = runs["first"] == runs["again"]
    same_workers = runs["first"] == runs["threads"]
    elapsed = time.perf_counter() - start
    record(9, "byte-identical outputs across repeats and worker counts", same_repeat and same_workers and elapsed < 600,
           f"repeat {'identical' if same_repeat else 'DIFFERS'}, workers 1 vs 8 "
           f"{'identical' if same_workers else 'DIFFERS'}; {elapsed:.0f}s")


MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


@pytest.mark.slow
def test_criterion_10_mnist_optional(tmp_path):
    root = os.environ.get("APPLEFL_MNIST_DIR")
    if not root or not all((Path(root) / f).exists() for f in MNIST_FILES):
        RESULTS[10] = "criterion 10 SKIP: set APPLEFL_MNIST_DIR to a directory with the four MNIST IDX files"
        pytest.skip(RESULTS[10])
    start = time.perf_counter()
    doc = {
        "data": dict(zip(("source", "train_images", "train_labels", "test_images", "test_labels"),
                         ("idx", *(str(Path(root) / f) for f in MNIST_FILES)))),
        "partition": {"scheme": "pathological", "num_clients": 12},
        "rounds": 40,
        "lr_net": 0.01,
        "lr_dr": 0.001,
        "scheduler": {"kind": "cosine", "mu": 0.1, "L_fraction": 0.3},
        "seed": 1,
    }
    score, _ = run_algorithm(doc, 1, "apple")
    elapsed = time.perf_counter() - start
    record(10, "MNIST pathological APPLE BMCTA >= 0.95 (optional)", score >= 0.95, f"BMCTA {score:.4f}; {elapsed:.0f}s")


if __name__ == "__main__":
    import sys

    raise SystemExit(pytest.main([__file__, "-q", "-s", *sys.argv[1:]]))
