"""Acceptance criteria, one test per criterion.

Each test prints a single ``[PASS]`` / ``[FAIL]`` line before asserting.
Run ``pytest tests/test_acceptance.py -v -s`` to see the lines inline, or
``python tests/test_acceptance.py`` for the plain report.

The learning smoke test needs a trained desk-scale run. It trains one
(tens of minutes on one CPU core) into ``$ARROWCD_ACCEPTANCE_RUN``
(default ``runs/desk`` under the repository) unless a finished run with
the same configuration is already there, then recomputes every number it
checks from the saved checkpoint.
"""

from __future__ import annotations

import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import binomtest

sys.path.insert(0, str(Path(__file__).parent))
from conftest import brute_ap, brute_f1, brute_force_dags, brute_shd, is_acyclic_dfs  # noqa: E402

from arrowcd import autodiff as ad  # noqa: E402
from arrowcd.encoder import EncoderConfig, count_params, forward, forward_batch, init_params, load_checkpoint  # noqa: E402
from arrowcd.factorized import (  # noqa: E402
    DirectedMarginals,
    EdgeBeliefs,
    all_orders,
    all_skeletons,
    composite_nll,
    consistency_residuals,
    directed_marginals,
    exact_log_likelihood,
    map_prediction,
    recover_beliefs,
)
from arrowcd.graphs import DirectedGraph, compose, skeleton_of, topological_orders  # noqa: E402
from arrowcd.metrics import average_precision, f1, nshd, shd  # noqa: E402
from arrowcd.taskgen import (  # noqa: E402
    GRAPH_FAMILIES,
    TaskConfig,
    max_edges,
    sample_skeleton,
    sample_task,
    task_rng,
)
from arrowcd.trainer import (  # noqa: E402
    TrainConfig,
    composite_loss,
    edge_frequencies,
    minimize_composite_risk,
    train_stream,
    validation_set,
)

REPO = Path(__file__).resolve().parents[1]
RUN_DIR = Path(os.environ.get("ARROWCD_ACCEPTANCE_RUN", REPO / "runs" / "desk"))


@pytest.fixture
def say(capsys):
    """Print one PASS/FAIL line past pytest's capture, then assert."""

    def report(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title} -- {detail}"
        with capsys.disabled():
            print("\n" + line, flush=True)
        assert ok, line

    return report


def _random_beliefs(rng, p, scale=2.0):
    a = rng.normal(scale=scale, size=(p, p))
    return EdgeBeliefs(np.triu(a, 1) + np.triu(a, 1).T, rng.normal(scale=scale, size=p))


# -- 1 ------------------------------------------------------------------------------------

def test_criterion_01_factorization_oracle(say):
    t0 = time.perf_counter()
    failures = checked = 0
    for p in range(1, 5):
        dags = brute_force_dags(p)
        dag_set = set(dags)
        # forward: every DAG is recovered from its skeleton and each of its orders
        for g in dags:
            orders, overflow = topological_orders(g)
            failures += overflow
            for o in orders:
                checked += 1
                failures += compose(skeleton_of(g), o) != g
        # converse: every (A, pi) lands on a DAG whose skeleton is A and whose
        # topological orders contain pi
        tops = {g: set(topological_orders(g).orders) for g in dags}
        for a in all_skeletons(p):
            for o in all_orders(p):
                g = compose(a, o)
                checked += 1
                failures += g not in dag_set or skeleton_of(g) != a or o not in tops[g]
    elapsed = time.perf_counter() - t0
    say(1, "factorization oracle", failures == 0 and elapsed < 10,
        f"{failures} failures in {checked} checks over all DAGs with p<=4, {elapsed:.2f}s (limit 10s)")


# -- 2 ------------------------------------------------------------------------------------

def test_criterion_02_likelihood_normalization(say):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for p in (3, 4):
        dags = {compose(a, o) for a in all_skeletons(p) for o in all_orders(p)}
        for _ in range(20):
            b = _random_beliefs(rng, p, 1.5)
            total = math.fsum(math.exp(exact_log_likelihood(b, g)) for g in dags)
            worst = max(worst, abs(total - 1.0))
    elapsed = time.perf_counter() - t0
    say(2, "likelihood normalization", worst <= 1e-8 and elapsed < 30,
        f"max |sum - 1| = {worst:.2e} over 40 beliefs at p=3,4, {elapsed:.2f}s (limit 30s)")


# -- 3 ------------------------------------------------------------------------------------

def test_criterion_03_marginal_round_trip(say):
    rng = np.random.default_rng(3)
    worst_nu = worst_ds = worst_res = 0.0
    for _ in range(1000):
        p = int(rng.integers(2, 51))
        b = _random_beliefs(rng, p)
        r = directed_marginals(b)
        back = recover_beliefs(r)
        off = ~np.eye(p, dtype=bool)
        worst_nu = max(worst_nu, float(np.max(np.abs(back.nu - b.nu)[off])))
        ds = (back.s[:, None] - back.s[None, :]) - (b.s[:, None] - b.s[None, :])
        worst_ds = max(worst_ds, float(np.max(np.abs(ds))))
        worst_res = max(worst_res, consistency_residuals(r))
    # nu = r_jk + r_kj is an exact identity; the floating sum can differ by an ulp
    ok = worst_nu <= 1e-15 and worst_ds <= 1e-10 and worst_res <= 1e-10
    say(3, "marginal round trip", ok,
        f"nu err {worst_nu:.1e} (<=1e-15), score-difference err {worst_ds:.1e}, residual {worst_res:.1e}")


# -- 4 ------------------------------------------------------------------------------------

def test_criterion_04_consistency_separation(say):
    r = np.zeros((3, 3))
    r[0, 1] = r[1, 2] = r[2, 0] = 0.3
    r[1, 0] = r[2, 1] = r[0, 2] = 0.1
    cyc = consistency_residuals(DirectedMarginals(r))
    rng = np.random.default_rng(4)
    worst = max(consistency_residuals(directed_marginals(_random_beliefs(rng, int(rng.integers(3, 40)))))
                for _ in range(500))
    ok = abs(cyc - 3 * math.log(3)) <= 1e-9 and worst <= 1e-10
    say(4, "consistency separation", ok,
        f"cyclic residual {cyc:.12f} vs 3 log 3 = {3 * math.log(3):.12f}; model marginals max {worst:.1e}")


# -- 5 ------------------------------------------------------------------------------------

def test_criterion_05_risk_minimizer(say):
    dags = [DirectedGraph.from_edges(3, [(0, 1), (1, 2)]), DirectedGraph.from_edges(3, [(1, 0), (0, 2)])]
    r = minimize_composite_risk(dags)
    eta = edge_frequencies(dags)
    off = ~np.eye(3, dtype=bool)
    err = float(np.max(np.abs(r - eta)[off]))
    say(5, "composite risk minimizer", err <= 1e-3, f"max |r - eta| = {err:.2e} (limit 1e-3)")


# -- 6 ------------------------------------------------------------------------------------

def test_criterion_06_gradient_fidelity(say):
    cfg = EncoderConfig(d=8, blocks=1, heads=2, ffn_mult=2, m=2)
    params = init_params(cfg, np.random.default_rng(6))
    X = np.random.default_rng(60).normal(size=(6, 3))
    g = DirectedGraph.from_edges(3, [(0, 1), (0, 2)])
    P = {k: ad.Tensor(v) for k, v in params.arrays.items()}
    with ad.Tape() as tape:
        lg, s = forward_batch(X[None], P, cfg)
        loss = composite_loss(lg, s, g.adj[None])
    names = params.names()
    grads = dict(zip(names, ad.backward(tape, loss, [P[k] for k in names])))
    h = 1e-5
    worst, zero_groups = 0.0, []
    for k in names:
        arr = params.arrays[k]
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = composite_nll(forward(X, params), g)
            arr[idx] = old - h
            down = composite_nll(forward(X, params), g)
            arr[idx] = old
            num[idx] = (up - down) / (2 * h)
        scale = max(np.linalg.norm(num), np.linalg.norm(grads[k]))
        if scale < 1e-8:
            # groups with an identically zero gradient (attention key biases)
            zero_groups.append(k)
            worst = max(worst, 0.0 if np.max(np.abs(num - grads[k])) < 1e-8 else np.inf)
            continue
        worst = max(worst, float(np.linalg.norm(num - grads[k]) / scale))
    say(6, "gradient fidelity", worst <= 1e-4,
        f"max per-group relative error {worst:.2e} over {len(names)} groups "
        f"({len(zero_groups)} zero-gradient groups compared absolutely)")


# -- 7 ------------------------------------------------------------------------------------

def test_criterion_07_symmetry_suite(say):
    params = init_params(EncoderConfig(), np.random.default_rng(7))
    rng = np.random.default_rng(70)
    row = col = 0.0
    symmetric = True
    for _ in range(5):
        n, p = int(rng.integers(10, 60)), int(rng.integers(2, 9))
        X = rng.normal(size=(n, p))
        a = forward(X, params)
        b = forward(X[rng.permutation(n)], params)
        tau = rng.permutation(p)
        c = forward(X[:, tau], params)
        row = max(row, np.max(np.abs(a.nu - b.nu)), np.max(np.abs(a.s - b.s)))
        col = max(col, np.max(np.abs(a.nu[np.ix_(tau, tau)] - c.nu)), np.max(np.abs(a.s[tau] - c.s)))
        symmetric &= bool(np.array_equal(a.nu, a.nu.T))
    cyclic = 0
    for _ in range(10_000):
        b = _random_beliefs(rng, int(rng.integers(1, 15)))
        cyclic += not is_acyclic_dfs(map_prediction(b).adj)
    ok = row <= 1e-10 and col <= 1e-10 and symmetric and cyclic == 0
    say(7, "symmetry suite", ok,
        f"row {row:.1e}, column {col:.1e}, exact skeleton symmetry {symmetric}, "
        f"{cyclic} cyclic MAP graphs in 10000")


# -- 8 ------------------------------------------------------------------------------------

def test_criterion_08_generator_statistics(say):
    base = TaskConfig()
    worst = 0.0
    for i in range(100):
        X = sample_task(base, i).X
        worst = max(worst, float(np.max(np.abs(X.mean(0)))), float(np.max(np.abs(X.std(0) - 1.0))))

    lin = TaskConfig(n_range=(1000, 1000), p_range=(2, 20), sem_families={"linear": 1.0})
    hits = total = 0
    for i in range(60):
        task = sample_task(lin, i)
        for j, target in enumerate(task.meta["r2_targets"]):
            parents = np.flatnonzero(task.gstar.adj[:, j])
            if target is None:
                continue
            Z = np.column_stack([np.ones(task.n), task.X[:, parents]])
            beta, *_ = np.linalg.lstsq(Z, task.X[:, j], rcond=None)
            r2 = 1 - np.var(task.X[:, j] - Z @ beta) / np.var(task.X[:, j])
            hits += abs(r2 - target) <= 0.05
            total += 1
    frac = hits / total

    # one edge per task keeps the binomial draws independent
    small = TaskConfig(n_range=(10, 10), p_range=(2, 8))
    forward_count = trials = 0
    for i in range(2000):
        g = sample_task(small, i).gstar
        edges = np.argwhere(g.adj | g.adj.T)
        if len(edges) == 0:
            continue
        j, k = min((int(a), int(b)) for a, b in edges if a < b)
        forward_count += int(g.adj[j, k])
        trials += 1
    pval = binomtest(forward_count, trials, 0.5).pvalue

    wrong = 0
    for fam in GRAPH_FAMILIES:
        for i in range(200):
            rng = task_rng(8, i)
            p = int(rng.integers(2, 40))
            s = int(rng.integers(0, max_edges(p) + 1))
            wrong += sample_skeleton(fam, p, s, rng).n_links != s
    ok = worst <= 1e-6 and frac >= 0.95 and pval > 0.01 and wrong == 0
    say(8, "generator statistics", ok,
        f"standardization {worst:.1e}; R^2 within 0.05 for {hits}/{total} ({frac:.1%}); "
        f"orientation {forward_count}/{trials} p={pval:.3f}; {wrong} wrong edge counts")


# -- 9 ------------------------------------------------------------------------------------

def test_criterion_09_parameter_count(say):
    n = count_params(EncoderConfig.paper_scale())
    rel = abs(n - 37e6) / 37e6
    say(9, "parameter count", rel <= 0.10, f"{n:,} trainable parameters ({rel:.1%} from 37M)")


# -- 10 -----------------------------------------------------------------------------------

ACCEPTANCE_TRAIN = TrainConfig(dtype="float32")


def baseline_f1(truth: DirectedGraph, rng, draws: int = 200) -> float:
    """Expected F1 of a random DAG with the truth's edge count.

    Links are a uniform random subset of the pairs, oriented along a
    uniform random order.
    """
    p, s = truth.p, truth.n_edges
    pairs = np.array(np.triu_indices(p, 1)).T
    total = 0.0
    for _ in range(draws):
        pick = pairs[rng.choice(len(pairs), size=s, replace=False)]
        pos = np.empty(p, dtype=int)
        pos[rng.permutation(p)] = np.arange(p)
        a = np.zeros((p, p), dtype=np.uint8)
        for j, k in pick:
            if pos[j] < pos[k]:
                a[j, k] = 1
            else:
                a[k, j] = 1
        total += f1(DirectedGraph(a), truth)
    return total / draws


def _finished_run(run: Path, cfg: TrainConfig) -> bool:
    path = run / "train_config.json"
    return (run / "final.bin").exists() and path.exists() and json.loads(path.read_text()) == json.loads(
        json.dumps(cfg.to_dict()))


def test_criterion_10_learning_smoke(say):
    cfg = ACCEPTANCE_TRAIN
    if not _finished_run(RUN_DIR, cfg):
        train_stream(cfg, RUN_DIR, resume=True, progress_every=250)
    tasks = validation_set(cfg)
    init = init_params(cfg.encoder, np.random.default_rng(cfg.seed), dtype=np.float32).astype(np.float64)
    final = load_checkpoint(RUN_DIR / "final.bin", dtype=np.float64)
    rng = np.random.default_rng(10)
    nll0, nll1, wins, empty = [], [], 0, 0
    for t in tasks:
        nll0.append(composite_nll(forward(t.X, init), t.gstar))
        beliefs = forward(t.X, final)
        nll1.append(composite_nll(beliefs, t.gstar))
        wins += f1(map_prediction(beliefs), t.gstar) > baseline_f1(t.gstar, rng)
        empty += t.gstar.n_edges == 0
    v0, v1 = float(np.mean(nll0)), float(np.mean(nll1))
    drop = 1 - v1 / v0
    frac = wins / len(tasks)
    ok = drop >= 0.20 and frac >= 0.90
    say(10, "learning smoke test", ok,
        f"validation NLL {v0:.3f} -> {v1:.3f} ({drop:.1%} drop, need >=20%); F1 above baseline on "
        f"{wins}/{len(tasks)} tasks ({frac:.1%}, need >=90%; {empty} tasks have empty truth)")


# -- 11 -----------------------------------------------------------------------------------

def test_criterion_11_metric_oracles(say):
    mismatches = checked = 0
    for p in range(1, 5):
        dags = brute_force_dags(p)
        for truth in dags:
            for pred in dags:
                checked += 1
                mismatches += shd(pred, truth) != brute_shd(pred, truth)
                mismatches += abs(f1(pred, truth) - brute_f1(pred, truth)) > 1e-12
                denom = max(brute_shd(DirectedGraph.empty(p), truth), 1)
                mismatches += abs(nshd(pred, truth) - brute_shd(pred, truth) / denom) > 1e-12
    rng = np.random.default_rng(11)
    dags = {p: brute_force_dags(p) for p in range(2, 5)}
    for i in range(1000):
        p = int(rng.integers(2, 5))
        truth = dags[p][int(rng.integers(len(dags[p])))]
        # half the rankings use coarse scores to exercise ties
        r = rng.random((p, p)) if i % 2 else rng.integers(0, 5, size=(p, p)) / 5
        mismatches += abs(average_precision(r, truth) - brute_ap(r, truth)) > 1e-12
    empty_ok = all(nshd(DirectedGraph.empty(p), g) == 1.0 for p in dags for g in dags[p] if g.n_edges)
    say(11, "metric oracles", mismatches == 0 and empty_ok,
        f"{mismatches} mismatches over {checked} graph pairs and 1000 rankings; "
        f"nshd(empty, truth) == 1 for all nonempty truths: {empty_ok}")


# -- 12 -----------------------------------------------------------------------------------

def test_criterion_12_complexity_trend(say):
    params = init_params(EncoderConfig(), np.random.default_rng(12))
    rng = np.random.default_rng(120)
    ns = np.array([100, 500, 2000])
    times = []
    for n in ns:
        X = rng.normal(size=(n, 20))
        forward(X, params)
        reps = []
        for _ in range(5):
            t0 = time.perf_counter()
            forward(X, params)
            reps.append(time.perf_counter() - t0)
        times.append(float(np.median(reps)))
    slope = float(np.polyfit(np.log(ns), np.log(times), 1)[0])
    say(12, "complexity trend", slope <= 1.3,
        f"forward times {', '.join(f'{t * 1e3:.1f}ms' for t in times)} at n=100,500,2000, p=20; "
        f"fitted exponent {slope:.3f} (limit 1.3)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
