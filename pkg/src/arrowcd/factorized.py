"""Product-Bernoulli skeleton x Plackett-Luce order distribution over DAGs.

Beliefs are kept as edge logits so that the likelihood terms stay finite
for confident predictions; ``nu`` is derived from them on demand.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .graphs import (
    DimensionMismatchError,
    DirectedGraph,
    NodeOrder,
    SkeletonGraph,
    compose,
    skeleton_of,
    topological_orders,
)

PROB_CLAMP = 1e-7


class NumericDomainError(ArithmeticError):
    pass


class EnumerationOverflowError(RuntimeError):
    pass


def _log1mexp(a: np.ndarray) -> np.ndarray:
    """log(1 - exp(a)) for a <= 0, accurate on both ends."""
    a = np.asarray(a, dtype=np.float64)
    return np.where(a > -np.log(2.0), np.log(-np.expm1(a)), np.log1p(-np.exp(a)))


@dataclass(frozen=True, eq=False)
class EdgeBeliefs:
    """Symmetric edge logits (zero diagonal) and per-node order scores."""

    logits: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        lg = np.array(self.logits, dtype=np.float64)
        s = np.array(self.s, dtype=np.float64).reshape(-1)
        if lg.shape != (s.size, s.size):
            raise DimensionMismatchError(
                f"logits shape {lg.shape} does not match {s.size} scores"
            )
        if not np.array_equal(lg, lg.T):
            raise ValueError("edge logits must be symmetric")
        if not (np.all(np.isfinite(lg)) and np.all(np.isfinite(s))):
            raise NumericDomainError("beliefs must be finite")
        np.fill_diagonal(lg, 0.0)
        lg.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "logits", lg)
        object.__setattr__(self, "s", s)

    @classmethod
    def from_probs(cls, nu, s) -> "EdgeBeliefs":
        nu = np.asarray(nu, dtype=np.float64)
        off = ~np.eye(nu.shape[0], dtype=bool)
        if np.any(nu[off] <= 0.0) or np.any(nu[off] >= 1.0):
            raise NumericDomainError("edge probabilities must lie strictly in (0, 1)")
        lg = np.zeros_like(nu)
        lg[off] = np.log(nu[off]) - np.log1p(-nu[off])
        # symmetrize exactly; logit(nu) and logit(nu.T) can differ in the last bit
        lg = np.triu(lg, 1) + np.triu(lg, 1).T
        return cls(lg, s)

    @property
    def p(self) -> int:
        return self.s.size

    @property
    def nu(self) -> np.ndarray:
        out = expit(self.logits)
        np.fill_diagonal(out, 0.0)
        return out

    def to_json(self) -> str:
        iu = np.triu_indices(self.p, 1)
        return json.dumps(
            {"p": self.p, "nu": self.nu[iu].tolist(), "s": self.s.tolist()}
        )

    @classmethod
    def from_json(cls, text: str) -> "EdgeBeliefs":
        obj = json.loads(text)
        p = int(obj["p"])
        nu = np.zeros((p, p))
        iu = np.triu_indices(p, 1)
        nu[iu] = obj["nu"]
        nu = nu + nu.T
        return cls.from_probs(nu, obj["s"])


@dataclass(frozen=True, eq=False)
class DirectedMarginals:
    """``r[j, k]`` is the probability of the directed edge ``j -> k``."""

    r: np.ndarray

    def __post_init__(self):
        r = np.array(self.r, dtype=np.float64)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise DimensionMismatchError(f"marginals must be square, got {r.shape}")
        if np.any(np.diag(r) != 0):
            raise ValueError("marginals must have zero diagonal")
        r.setflags(write=False)
        object.__setattr__(self, "r", r)

    @property
    def p(self) -> int:
        return self.r.shape[0]

    def to_csv(self) -> str:
        return "\n".join(",".join(repr(float(v)) for v in row) for row in self.r) + "\n"


def _check_p(beliefs: EdgeBeliefs, p: int):
    if beliefs.p != p:
        raise DimensionMismatchError(f"beliefs have p={beliefs.p}, graph has p={p}")


def skeleton_log_prob(beliefs: EdgeBeliefs, a: SkeletonGraph) -> float:
    _check_p(beliefs, a.p)
    iu = np.triu_indices(beliefs.p, 1)
    lg = beliefs.logits[iu]
    present = a.adj[iu].astype(bool)
    return float(np.sum(np.where(present, log_expit(lg), log_expit(-lg))))


def order_log_prob(beliefs: EdgeBeliefs, order: NodeOrder) -> float:
    if not isinstance(order, NodeOrder):
        order = NodeOrder(tuple(order))
    _check_p(beliefs, order.p)
    ranked = beliefs.s[list(order.perm)]
    # logsumexp over each suffix, accumulated from the back
    suffix = np.logaddexp.accumulate(ranked[::-1])[::-1]
    return float(np.sum(ranked - suffix))


def precedence_prob(beliefs: EdgeBeliefs, j: int, k: int) -> float:
    if j == k:
        raise ValueError("precedence probability needs two distinct nodes")
    return float(expit(beliefs.s[j] - beliefs.s[k]))


def _log_directed(beliefs: EdgeBeliefs) -> np.ndarray:
    diff = beliefs.s[:, None] - beliefs.s[None, :]
    return log_expit(beliefs.logits) + log_expit(diff)


def directed_marginals(beliefs: EdgeBeliefs) -> DirectedMarginals:
    nu = beliefs.nu
    q = expit(beliefs.s[:, None] - beliefs.s[None, :])
    r = nu * q
    np.fill_diagonal(r, 0.0)
    return DirectedMarginals(r)


def composite_nll(beliefs: EdgeBeliefs, gstar: DirectedGraph) -> float:
    """Negative directed-edge composite log-likelihood over ordered pairs."""
    _check_p(beliefs, gstar.p)
    lo, hi = np.log(PROB_CLAMP), np.log1p(-PROB_CLAMP)
    log_r = np.clip(_log_directed(beliefs), lo, hi)
    off = ~np.eye(beliefs.p, dtype=bool)
    g = gstar.adj.astype(bool)
    terms = np.where(g, log_r, _log1mexp(log_r))[off]
    total = -float(np.sum(terms))
    if not np.isfinite(total):
        raise NumericDomainError("composite NLL is not finite")
    return total


def exact_log_likelihood(beliefs: EdgeBeliefs, gstar: DirectedGraph, cap: int = 10_000) -> float:
    _check_p(beliefs, gstar.p)
    orders, overflow = topological_orders(gstar, cap=cap)
    if overflow:
        raise EnumerationOverflowError(
            f"more than {cap} topological orders; exact likelihood not enumerable"
        )
    order_terms = [order_log_prob(beliefs, o) for o in orders]
    return skeleton_log_prob(beliefs, skeleton_of(gstar)) + float(logsumexp(order_terms))


def _log_ratio(r: DirectedMarginals) -> np.ndarray:
    off = ~np.eye(r.p, dtype=bool)
    if np.any(r.r[off] <= 0):
        raise NumericDomainError("directed marginals must be strictly positive off the diagonal")
    rho = np.zeros_like(r.r)
    rho[off] = np.log(r.r[off]) - np.log(r.r.T[off])
    return rho


def recover_beliefs(r: DirectedMarginals) -> EdgeBeliefs:
    """Invert ``directed_marginals``; scores are anchored so that ``s[0] = 0``.

    When ``r`` is not globally consistent the scores are read off the log
    ratios against node 0 only.
    """
    rho = _log_ratio(r)
    nu = r.r + r.r.T
    s = rho[:, 0].copy()
    s[0] = 0.0
    return EdgeBeliefs.from_probs(nu, s)


def consistency_residuals(r: DirectedMarginals) -> float:
    """Largest |rho_ij + rho_jk + rho_ki| over node triples (0 if p < 3)."""
    rho = _log_ratio(r)
    p = r.p
    if p < 3:
        return 0.0
    cyc = rho[:, :, None] + rho[None, :, :] + rho.T[:, None, :]
    idx = np.arange(p)
    distinct = (
        (idx[:, None, None] != idx[None, :, None])
        & (idx[None, :, None] != idx[None, None, :])
        & (idx[:, None, None] != idx[None, None, :])
    )
    return float(np.max(np.abs(cyc[distinct])))


def map_order(beliefs: EdgeBeliefs) -> NodeOrder:
    """Scores sorted descending; equal scores keep ascending node index."""
    return NodeOrder(tuple(np.argsort(-beliefs.s, kind="stable")))


def map_skeleton(beliefs: EdgeBeliefs) -> SkeletonGraph:
    return SkeletonGraph(beliefs.logits > 0.0)


def map_prediction(beliefs: EdgeBeliefs) -> DirectedGraph:
    return compose(map_skeleton(beliefs), map_order(beliefs))


def all_skeletons(p: int):
    pairs = list(itertools.combinations(range(p), 2))
    for bits in itertools.product((0, 1), repeat=len(pairs)):
        yield SkeletonGraph.from_links(p, [pr for pr, b in zip(pairs, bits) if b])


def all_orders(p: int):
    for perm in itertools.permutations(range(p)):
        yield NodeOrder(perm)
