import itertools

import numpy as np
import pytest

from arrowcd.graphs import DirectedGraph


def brute_force_dags(p):
    """Every DAG on p nodes, by filtering all zero-diagonal binary matrices."""
    cells = [(j, k) for j in range(p) for k in range(p) if j != k]
    out = []
    for bits in itertools.product((0, 1), repeat=len(cells)):
        a = np.zeros((p, p), dtype=np.uint8)
        for (j, k), b in zip(cells, bits):
            a[j, k] = b
        if is_acyclic_dfs(a):
            out.append(DirectedGraph(a))
    return out


def is_acyclic_dfs(adj):
    """Three-colour DFS; independent of the Kahn peeling in the package."""
    p = adj.shape[0]
    colour = [0] * p

    def visit(v):
        colour[v] = 1
        for c in range(p):
            if adj[v, c]:
                if colour[c] == 1:
                    return False
                if colour[c] == 0 and not visit(c):
                    return False
        colour[v] = 2
        return True

    return all(colour[v] != 0 or visit(v) for v in range(p))


def brute_force_top_orders(g):
    adj = g.adj
    return [
        perm
        for perm in itertools.permutations(range(g.p))
        if all(perm.index(j) < perm.index(k) for j, k in zip(*np.nonzero(adj)))
    ]


def random_dag(rng, p, density=0.5):
    a = np.triu(rng.random((p, p)) < density, 1).astype(np.uint8)
    perm = rng.permutation(p)
    return DirectedGraph(a[np.ix_(perm, perm)])


@pytest.fixture
def rng():
    return np.random.default_rng(20261019)


@pytest.fixture(scope="session")
def dags_up_to_4():
    return {p: brute_force_dags(p) for p in range(1, 5)}



# -- metric oracles: plain loops over pairs and thresholds -------------------

def brute_shd(a, b):
    p = a.p
    errors = 0
    for j in range(p):
        for k in range(j + 1, p):
            if (a.adj[j, k], a.adj[k, j]) != (b.adj[j, k], b.adj[k, j]):
                errors += 1
    return errors


def brute_f1(pred, truth):
    P = {(j, k) for j in range(pred.p) for k in range(pred.p) if pred.adj[j, k]}
    T = {(j, k) for j in range(truth.p) for k in range(truth.p) if truth.adj[j, k]}
    if not P and not T:
        return 1.0
    if not P or not T:
        return 0.0
    tp = len(P & T)
    if tp == 0:
        return 0.0
    prec, rec = tp / len(P), tp / len(T)
    return 2 * prec * rec / (prec + rec)


def brute_ap(scores, truth):
    """Sweep every distinct threshold from high to low; tied pairs enter together."""
    p = truth.p
    pairs = [(j, k) for j in range(p) for k in range(p) if j != k]
    positives = {pk for pk in pairs if truth.adj[pk]}
    if not positives:
        return 1.0
    ap, prev_recall = 0.0, 0.0
    for t in sorted({scores[pk] for pk in pairs}, reverse=True):
        retrieved = [pk for pk in pairs if scores[pk] >= t]
        hits = sum(pk in positives for pk in retrieved)
        recall = hits / len(positives)
        ap += (recall - prev_recall) * hits / len(retrieved)
        prev_recall = recall
    return ap
