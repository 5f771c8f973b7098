"""Self-contained invariant suites behind ``arrowcd check``.

Each check returns a :class:`CheckResult`; ``run_suite`` collects them.
The suites are quick versions of the properties exercised by the test
suite, runnable from an installed package without pytest.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .encoder import EncoderConfig, count_params, forward, forward_batch, init_params
from .factorized import (
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
from .graphs import DirectedGraph, compose, is_acyclic, skeleton_of, topological_orders
from .metrics import average_precision, f1, nshd, shd
from .taskgen import GRAPH_FAMILIES, TaskConfig, max_edges, sample_skeleton, sample_task, task_rng
from .trainer import composite_loss, edge_frequencies, minimize_composite_risk

SUITES = ("factorization", "likelihood", "generator", "encoder", "metrics")


@dataclass
class CheckResult:
    suite: str
    invariant: str
    anchor: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _random_beliefs(rng, p, scale=2.0) -> EdgeBeliefs:
    a = rng.normal(scale=scale, size=(p, p))
    logits = np.triu(a, 1) + np.triu(a, 1).T
    return EdgeBeliefs(logits, rng.normal(scale=scale, size=p))


def _dags(p):
    """All DAGs on p nodes by filtering every zero-diagonal 0/1 matrix."""
    cells = [(j, k) for j in range(p) for k in range(p) if j != k]
    out = []
    for bits in itertools.product((0, 1), repeat=len(cells)):
        a = np.zeros((p, p), dtype=np.uint8)
        for (j, k), b in zip(cells, bits):
            a[j, k] = b
        if is_acyclic(a):
            out.append(DirectedGraph(a))
    return out


# -- factorization ------------------------------------------------------------------

def check_round_trip(p_max=4):
    bad = 0
    for p in range(1, p_max + 1):
        for g in _dags(p):
            orders, _ = topological_orders(g)
            bad += sum(compose(skeleton_of(g), o) != g for o in orders)
    return bad == 0, f"{bad} failures over all DAGs with p <= {p_max}"


def check_preimage(p_max=4):
    bad = 0
    for p in range(1, p_max + 1):
        tops = {}
        for a in all_skeletons(p):
            for o in all_orders(p):
                g = compose(a, o)
                if g not in tops:
                    tops[g] = set(topological_orders(g).orders)
                if skeleton_of(g) != a or o not in tops[g]:
                    bad += 1
        if len(tops) != len(_dags(p)):
            bad += 1
    return bad == 0, f"{bad} failures over all (skeleton, order) pairs with p <= {p_max}"


def check_compose_acyclic(trials=2000):
    rng = np.random.default_rng(0)
    bad = 0
    for _ in range(trials):
        p = int(rng.integers(1, 12))
        bad += not is_acyclic(map_prediction(_random_beliefs(rng, p)))
    return bad == 0, f"{bad} cyclic MAP graphs in {trials} random beliefs"


# -- likelihood ---------------------------------------------------------------------

def check_normalization():
    rng = np.random.default_rng(1)
    worst = 0.0
    for p in (3, 4):
        dags = _dags(p)
        for _ in range(3):
            b = _random_beliefs(rng, p, 1.0)
            total = math.fsum(math.exp(exact_log_likelihood(b, g)) for g in dags)
            worst = max(worst, abs(total - 1.0))
    return worst <= 1e-8, f"max |sum - 1| = {worst:.3e}"


def check_marginal_recovery():
    rng = np.random.default_rng(2)
    worst_nu = worst_s = worst_res = 0.0
    for _ in range(100):
        p = int(rng.integers(2, 20))
        b = _random_beliefs(rng, p)
        rec = recover_beliefs(directed_marginals(b))
        off = ~np.eye(p, dtype=bool)
        worst_nu = max(worst_nu, float(np.max(np.abs(rec.nu - b.nu)[off])))
        ds = (rec.s[:, None] - rec.s[None, :]) - (b.s[:, None] - b.s[None, :])
        worst_s = max(worst_s, float(np.max(np.abs(ds))))
        worst_res = max(worst_res, consistency_residuals(directed_marginals(b)))
    ok = worst_nu <= 1e-12 and worst_s <= 1e-10 and worst_res <= 1e-10
    return ok, f"nu err {worst_nu:.2e}, score-difference err {worst_s:.2e}, residual {worst_res:.2e}"


def check_cyclic_residual():
    r = np.full((3, 3), 0.1)
    np.fill_diagonal(r, 0.0)
    r[0, 1] = r[1, 2] = r[2, 0] = 0.3
    res = consistency_residuals(DirectedMarginals(r))
    return abs(res - 3 * math.log(3)) <= 1e-9, f"residual {res:.12f} (expected {3 * math.log(3):.12f})"


def check_risk_minimizer():
    dags = [DirectedGraph.from_edges(3, [(0, 1), (1, 2)]), DirectedGraph.from_edges(3, [(1, 0), (0, 2)])]
    r = minimize_composite_risk(dags)
    off = ~np.eye(3, dtype=bool)
    err = float(np.max(np.abs(r - edge_frequencies(dags))[off]))
    return err <= 1e-3, f"max |r - eta| = {err:.2e}"


# -- generator ----------------------------------------------------------------------

def check_standardization():
    cfg = TaskConfig(n_range=(200, 400), p_range=(2, 12))
    worst = 0.0
    for i in range(30):
        X = sample_task(cfg, i).X
        worst = max(worst, float(np.max(np.abs(X.mean(0)))), float(np.max(np.abs(X.std(0) - 1))))
    return worst <= 1e-6, f"max moment deviation {worst:.2e}"


def check_edge_counts():
    bad = 0
    for fam in GRAPH_FAMILIES:
        for i in range(60):
            rng = task_rng(5, i)
            p = int(rng.integers(2, 15))
            s = int(rng.integers(0, max_edges(p) + 1))
            bad += sample_skeleton(fam, p, s, rng).n_links != s
    return bad == 0, f"{bad} skeletons with the wrong link count"


def check_r2_targeting():
    cfg = TaskConfig(n_range=(1000, 1000), p_range=(3, 10), sem_families={"linear": 1.0})
    hits = total = 0
    for i in range(20):
        task = sample_task(cfg, i)
        X, a = task.X, task.gstar.adj
        for j, target in enumerate(task.meta["r2_targets"]):
            parents = np.flatnonzero(a[:, j])
            if target is None or parents.size == 0:
                continue
            Z = np.column_stack([np.ones(len(X)), X[:, parents]])
            coef, *_ = np.linalg.lstsq(Z, X[:, j], rcond=None)
            resid = X[:, j] - Z @ coef
            r2 = 1 - resid.var() / X[:, j].var()
            hits += abs(r2 - target) <= 0.05
            total += 1
    frac = hits / max(total, 1)
    return frac >= 0.95, f"{hits}/{total} non-root nodes within 0.05 of the target R^2"


# -- encoder ------------------------------------------------------------------------

def check_permutations():
    params = init_params(EncoderConfig(), np.random.default_rng(3))
    rng = np.random.default_rng(4)
    X = rng.normal(size=(40, 6))
    a = forward(X, params)
    b = forward(X[rng.permutation(40)], params)
    tau = rng.permutation(6)
    c = forward(X[:, tau], params)
    row = max(np.max(np.abs(a.nu - b.nu)), np.max(np.abs(a.s - b.s)))
    col = max(np.max(np.abs(a.nu[np.ix_(tau, tau)] - c.nu)), np.max(np.abs(a.s[tau] - c.s)))
    sym = np.array_equal(a.nu, a.nu.T)
    return row <= 1e-10 and col <= 1e-10 and sym, f"row {row:.1e}, column {col:.1e}, exact symmetry {sym}"


def check_param_count():
    n = count_params(EncoderConfig.paper_scale())
    return abs(n - 37e6) / 37e6 <= 0.10, f"{n:,} parameters at d=512, 3 blocks, 8 heads, m=16"


def check_gradients():
    cfg = EncoderConfig(d=8, blocks=1, heads=2, ffn_mult=2, m=2)
    params = init_params(cfg, np.random.default_rng(5))
    X = np.random.default_rng(6).normal(size=(6, 3))
    g = DirectedGraph.from_edges(3, [(0, 1), (2, 1)])
    P = {k: ad.Tensor(v) for k, v in params.arrays.items()}
    with ad.Tape() as tape:
        lg, s = forward_batch(X[None], P, cfg)
        loss = composite_loss(lg, s, g.adj[None])
    names = params.names()
    grads = dict(zip(names, ad.backward(tape, loss, [P[k] for k in names])))
    rng = np.random.default_rng(7)
    worst = 0.0
    h = 1e-5
    for k in names:
        arr = params.arrays[k]
        # a few coordinates per group keeps the CLI check fast
        for flat in rng.choice(arr.size, size=min(arr.size, 3), replace=False):
            idx = np.unravel_index(flat, arr.shape)
            old = arr[idx]
            arr[idx] = old + h
            up = composite_nll(forward(X, params), g)
            arr[idx] = old - h
            down = composite_nll(forward(X, params), g)
            arr[idx] = old
            num, ana = (up - down) / (2 * h), grads[k][idx]
            if max(abs(num), abs(ana)) > 1e-6:
                worst = max(worst, abs(num - ana) / max(abs(num), abs(ana)))
    return worst <= 1e-4, f"max relative error {worst:.2e}"


# -- metrics ------------------------------------------------------------------------

def check_metric_examples():
    t = DirectedGraph.from_edges(3, [(0, 1)])
    rev = np.full((3, 3), 0.9)
    rev[0, 1] = 0.1
    plus = DirectedGraph.from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)])
    truth = DirectedGraph.from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)])
    checks = [
        shd(DirectedGraph.from_edges(2, [(1, 0)]), DirectedGraph.from_edges(2, [(0, 1)])) == 1,
        nshd(DirectedGraph.empty(5), truth) == 1.0,
        abs(f1(plus, truth) - 8 / 9) < 1e-15,
        abs(average_precision(rev, t) - 1 / 6) < 1e-15,
    ]
    return all(checks), f"{sum(checks)}/{len(checks)} hand-computed values reproduced"


def check_empty_prediction_nshd():
    bad = 0
    for g in _dags(4):
        if g.n_edges:
            bad += nshd(DirectedGraph.empty(4), g) != 1.0
    return bad == 0, f"{bad} nonempty p=4 DAGs where nshd(empty) != 1"


REGISTRY: dict[str, list[tuple[str, str, Callable]]] = {
    "factorization": [
        ("round_trip", "compose(skeleton_of(G), pi) = G for every topological order", check_round_trip),
        ("preimage", "compose(A, pi) = G implies A = skeleton_of(G) and pi in Top(G)", check_preimage),
        ("map_acyclic", "the MAP graph is acyclic by construction", check_compose_acyclic),
    ],
    "likelihood": [
        ("normalization", "exact likelihood sums to one over all DAGs", check_normalization),
        ("marginal_recovery", "directed marginals identify nu and score differences", check_marginal_recovery),
        ("cyclic_residual", "cyclic preferences violate the curl-free condition", check_cyclic_residual),
        ("risk_minimizer", "composite risk is minimized by edge frequencies", check_risk_minimizer),
    ],
    "generator": [
        ("standardization", "every column has zero mean and unit variance", check_standardization),
        ("edge_counts", "graph samplers hit the requested link count", check_edge_counts),
        ("r2_targeting", "linear SEM nodes match their target local R^2", check_r2_targeting),
    ],
    "encoder": [
        ("permutations", "row invariance, column equivariance, symmetric skeleton", check_permutations),
        ("param_count", "paper-scale configuration has about 37M parameters", check_param_count),
        ("gradients", "tape gradients match central differences", check_gradients),
    ],
    "metrics": [
        ("examples", "SHD, nSHD, F1 and AP on hand-computed cases", check_metric_examples),
        ("empty_nshd", "nSHD of the empty prediction is one", check_empty_prediction_nshd),
    ],
}


def run_suite(name: str) -> list[CheckResult]:
    if name != "all" and name not in REGISTRY:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(SUITES + ('all',))}")
    names = SUITES if name == "all" else (name,)
    results = []
    for suite in names:
        for inv, anchor, fn in REGISTRY[suite]:
            t0 = time.perf_counter()
            try:
                ok, detail = fn()
            except Exception as e:  # a crashing check is a failing check
                ok, detail = False, f"{type(e).__name__}: {e}"
            results.append(CheckResult(suite, inv, anchor, bool(ok), detail, time.perf_counter() - t0))
    return results
