"""Synthetic causal-discovery tasks: random DAG, random SEM, standardized data.

Every task is a pure function of ``(config.seed, index)``. The per-task
generator is numpy's Philox-4x64-10 counter-based bit generator keyed from
``SeedSequence([seed, stream, index])``, so any task can be replayed in
isolation and workers can split the index space freely.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import expit

from .graphs import (
    DirectedGraph,
    SkeletonGraph,
    compose,
    graph_from_json,
    graph_to_json,
    is_acyclic,
    topological_sort,
)

GRAPH_FAMILIES = ("er", "scale-free", "small-world")
SEM_FAMILIES = ("linear", "mlp", "spline")
NOISE_FAMILIES = ("normal", "uniform", "beta", "gamma")
ACTIVATIONS = ("tanh", "hardtanh", "sigmoid", "hardsigmoid")

TRAIN_STREAM = 0
VALIDATION_STREAM = 1

SMALL_WORLD_REWIRE = 0.25
SPLINE_KNOTS = np.linspace(-2.0, 2.0, 5)


class ConfigError(ValueError):
    """Bad task configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def task_rng(seed: int, index: int, stream: int = TRAIN_STREAM) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream), int(index)])
    return np.random.Generator(np.random.Philox(ss))


# -- configuration -------------------------------------------------------------

def _normalized(weights: Mapping[str, float], allowed, name) -> dict[str, float]:
    if not weights:
        raise ConfigError(name, "must name at least one family")
    out = {}
    for k, v in weights.items():
        if k not in allowed:
            raise ConfigError(name, f"unknown family {k!r}; expected one of {allowed}")
        if v < 0:
            raise ConfigError(name, f"negative weight for {k!r}")
        out[k] = float(v)
    total = sum(out.values())
    if not math.isclose(total, 1.0, rel_tol=0, abs_tol=1e-9):
        raise ConfigError(name, f"weights must sum to 1, got {total}")
    return out


@dataclass(frozen=True)
class TaskConfig:
    n_range: tuple[int, int] = (100, 2000)
    p_range: tuple[int, int] = (2, 100)
    graph_families: dict = field(default_factory=lambda: {"er": 0.5, "scale-free": 0.5})
    sem_families: dict = field(default_factory=lambda: {"linear": 0.5, "mlp": 0.5})
    noise_families: dict = field(
        default_factory=lambda: {"normal": 1 / 3, "uniform": 1 / 3, "beta": 1 / 3}
    )
    edge_multiplier_max: int = 4
    r2_range: tuple[float, float] = (0.1, 0.9)
    weight_magnitude_halfwidth_max: float = 0.9
    seed: int = 0

    def __post_init__(self):
        n_lo, n_hi = (int(v) for v in self.n_range)
        p_lo, p_hi = (int(v) for v in self.p_range)
        if not 2 <= n_lo <= n_hi:
            raise ConfigError("n_range", f"need 2 <= lo <= hi, got {self.n_range}")
        if not 2 <= p_lo <= p_hi:
            raise ConfigError("p_range", f"need 2 <= lo <= hi, got {self.p_range}")
        r_lo, r_hi = (float(v) for v in self.r2_range)
        if not 0 < r_lo <= r_hi < 1:
            raise ConfigError("r2_range", f"need 0 < lo <= hi < 1, got {self.r2_range}")
        if self.edge_multiplier_max < 0:
            raise ConfigError("edge_multiplier_max", "must be nonnegative")
        if not 0 <= self.weight_magnitude_halfwidth_max < 1:
            raise ConfigError("weight_magnitude_halfwidth_max", "must lie in [0, 1)")
        object.__setattr__(self, "n_range", (n_lo, n_hi))
        object.__setattr__(self, "p_range", (p_lo, p_hi))
        object.__setattr__(self, "r2_range", (r_lo, r_hi))
        object.__setattr__(self, "graph_families", _normalized(self.graph_families, GRAPH_FAMILIES, "graph_families"))
        object.__setattr__(self, "sem_families", _normalized(self.sem_families, SEM_FAMILIES, "sem_families"))
        object.__setattr__(self, "noise_families", _normalized(self.noise_families, NOISE_FAMILIES, "noise_families"))
        object.__setattr__(self, "seed", int(self.seed))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["n_range"], d["p_range"], d["r2_range"] = list(self.n_range), list(self.p_range), list(self.r2_range)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TaskConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(k, "unknown task config field")
        kw = dict(d)
        for k in ("n_range", "p_range", "r2_range"):
            if k in kw:
                if not isinstance(kw[k], (list, tuple)) or len(kw[k]) != 2:
                    raise ConfigError(k, "must be a two-element [lo, hi] list")
                kw[k] = tuple(kw[k])
        try:
            return cls(**kw)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError("task", str(e)) from None

    def replace(self, **changes) -> "TaskConfig":
        return dataclasses.replace(self, **changes)


OOD_PRESETS = ("small-world-graph", "spline-function", "gamma-noise", "all-shifts")


def ood_preset(name: str, base: TaskConfig | None = None) -> TaskConfig:
    """Replace one generator axis (or all three) with its shifted family."""
    base = base or TaskConfig()
    shifts = {
        "small-world-graph": {"graph_families": {"small-world": 1.0}},
        "spline-function": {"sem_families": {"spline": 1.0}},
        "gamma-noise": {"noise_families": {"gamma": 1.0}},
    }
    if name == "all-shifts":
        changes = {}
        for v in shifts.values():
            changes.update(v)
        return base.replace(**changes)
    if name not in shifts:
        raise ValueError(f"unknown OOD preset {name!r}; expected one of {OOD_PRESETS}")
    return base.replace(**shifts[name])


def _pick(rng: np.random.Generator, weights: Mapping[str, float]) -> str:
    keys = list(weights)
    probs = np.array([weights[k] for k in keys])
    return keys[int(rng.choice(len(keys), p=probs / probs.sum()))]


# -- graphs ---------------------------------------------------------------------

def max_edges(p: int) -> int:
    return p * (p - 1) // 2


def _er(p, s, rng):
    pairs = np.array(np.triu_indices(p, 1)).T
    chosen = pairs[rng.choice(len(pairs), size=s, replace=False)]
    a = np.zeros((p, p), dtype=np.uint8)
    a[chosen[:, 0], chosen[:, 1]] = 1
    return a | a.T


def _scale_free(p, s, rng):
    # pair weight (deg_j + 1)(deg_k + 1) over absent pairs: rich get richer
    a = np.zeros((p, p), dtype=np.uint8)
    deg = np.zeros(p)
    iu = np.triu_indices(p, 1)
    for _ in range(s):
        w = np.outer(deg + 1, deg + 1)[iu] * (a[iu] == 0)
        idx = rng.choice(len(w), p=w / w.sum())
        j, k = iu[0][idx], iu[1][idx]
        a[j, k] = a[k, j] = 1
        deg[j] += 1
        deg[k] += 1
    return a


def _small_world(p, s, rng):
    a = np.zeros((p, p), dtype=np.uint8)
    k = int(2 * round(s / p)) if p > 0 else 0  # even degree nearest 2s/p
    k = min(k, p - 1 if (p - 1) % 2 == 0 else p - 2)
    for v in range(p):
        for off in range(1, k // 2 + 1):
            u = (v + off) % p
            a[v, u] = a[u, v] = 1
    # rewire each lattice link's far end with fixed probability
    for v in range(p):
        for off in range(1, k // 2 + 1):
            u = (v + off) % p
            if not a[v, u] or rng.random() >= SMALL_WORLD_REWIRE:
                continue
            free = np.flatnonzero((a[v] == 0) & (np.arange(p) != v))
            if free.size == 0:
                continue
            w = int(rng.choice(free))
            a[v, u] = a[u, v] = 0
            a[v, w] = a[w, v] = 1
    iu = np.triu_indices(p, 1)
    have = int(a[iu].sum())
    if have > s:
        present = np.flatnonzero(a[iu])
        drop = rng.choice(present, size=have - s, replace=False)
        a[iu[0][drop], iu[1][drop]] = 0
        a[iu[1][drop], iu[0][drop]] = 0
    elif have < s:
        absent = np.flatnonzero(a[iu] == 0)
        add = rng.choice(absent, size=s - have, replace=False)
        a[iu[0][add], iu[1][add]] = 1
        a[iu[1][add], iu[0][add]] = 1
    return a


_GRAPH_SAMPLERS = {"er": _er, "scale-free": _scale_free, "small-world": _small_world}


def sample_skeleton(family: str, p: int, s: int, rng: np.random.Generator) -> SkeletonGraph:
    """Skeleton with exactly ``min(s, p(p-1)/2)`` links."""
    if p < 2:
        raise ValueError(f"need p >= 2, got {p}")
    if family not in _GRAPH_SAMPLERS:
        raise ValueError(f"unknown graph family {family!r}")
    s = int(min(max(s, 0), max_edges(p)))
    return SkeletonGraph(_GRAPH_SAMPLERS[family](p, s, rng))


def orient_random(a: SkeletonGraph, rng: np.random.Generator) -> DirectedGraph:
    return compose(a, rng.permutation(a.p))


# -- structural equations ---------------------------------------------------------

@dataclass
class NodeMechanism:
    parents: list[int]
    # linear: weights over parents
    weights: np.ndarray | None = None
    # mlp: hidden weights (len(parents), h), output weights (h,)
    hidden: np.ndarray | None = None
    output: np.ndarray | None = None
    activation: str | None = None
    # spline: per-parent knot values, shape (len(parents), n_knots)
    spline_values: np.ndarray | None = None


@dataclass
class SemSpec:
    family: str
    weight_halfwidth: float
    nodes: list[NodeMechanism]

    def weight_matrix(self) -> np.ndarray:
        """Dense p x p linear weights (column j holds w_j); linear family only."""
        p = len(self.nodes)
        w = np.zeros((p, p))
        for j, node in enumerate(self.nodes):
            if node.weights is not None:
                w[node.parents, j] = node.weights
        return w

    def to_dict(self) -> dict:
        out = []
        for node in self.nodes:
            d = {"parents": node.parents}
            for key in ("weights", "hidden", "output", "spline_values"):
                v = getattr(node, key)
                if v is not None:
                    d[key] = v.tolist()
            if node.activation:
                d["activation"] = node.activation
            out.append(d)
        return {"family": self.family, "weight_halfwidth": self.weight_halfwidth, "nodes": out}


def _signed_weights(rng, shape, halfwidth):
    mags = rng.uniform(1.0 - halfwidth, 1.0 + halfwidth, size=shape)
    signs = rng.choice(np.array([-1.0, 1.0]), size=shape)
    return mags * signs


def sample_sem(g: DirectedGraph, family: str, rng: np.random.Generator,
               halfwidth_max: float = 0.9) -> SemSpec:
    if family not in SEM_FAMILIES:
        raise ValueError(f"unknown SEM family {family!r}")
    if not is_acyclic(g):
        raise ValueError("SEM requires an acyclic graph")
    a_w = float(rng.uniform(0.0, halfwidth_max))
    nodes = []
    for j in range(g.p):
        parents = [int(i) for i in np.flatnonzero(g.adj[:, j])]
        k = len(parents)
        node = NodeMechanism(parents)
        if family == "linear":
            node.weights = _signed_weights(rng, (k,), a_w)
        elif family == "mlp":
            h = int(rng.integers(1, 65))
            node.hidden = _signed_weights(rng, (k, h), a_w)
            node.output = _signed_weights(rng, (h,), a_w)
            node.activation = ACTIVATIONS[int(rng.integers(len(ACTIVATIONS)))]
        else:
            node.spline_values = rng.normal(size=(k, SPLINE_KNOTS.size))
        nodes.append(node)
    return SemSpec(family, a_w, nodes)


def _activate(name, x):
    if name == "tanh":
        return np.tanh(x)
    if name == "hardtanh":
        return np.clip(x, -1.0, 1.0)
    if name == "sigmoid":
        return expit(x)
    if name == "hardsigmoid":
        return np.clip(x / 6.0 + 0.5, 0.0, 1.0)
    raise ValueError(f"unknown activation {name!r}")


def _natural_spline(values: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Natural cubic interpolant through the knots, extended linearly outside."""
    cs = CubicSpline(SPLINE_KNOTS, values, bc_type="natural")
    lo, hi = SPLINE_KNOTS[0], SPLINE_KNOTS[-1]
    inside = cs(np.clip(x, lo, hi))
    slope_lo, slope_hi = cs(lo, 1), cs(hi, 1)
    return inside + np.where(x < lo, (x - lo) * slope_lo, 0.0) + np.where(x > hi, (x - hi) * slope_hi, 0.0)


def mechanism_signal(node: NodeMechanism, parent_data: np.ndarray) -> np.ndarray:
    """Noise-free part of a node given its parents' columns (n, k)."""
    if node.weights is not None:
        return parent_data @ node.weights
    if node.hidden is not None:
        return _activate(node.activation, parent_data @ node.hidden) @ node.output
    if node.spline_values is not None:
        return sum(_natural_spline(v, parent_data[:, i]) for i, v in enumerate(node.spline_values))
    raise ValueError("mechanism has no parameters")


# -- noise -------------------------------------------------------------------------

def _one_noise(family: str, rng) -> dict:
    if family == "beta":
        return {"family": "beta", "alpha": float(rng.uniform(1, 10)), "beta": float(rng.uniform(1, 10))}
    if family == "gamma":
        return {"family": "gamma", "shape": float(rng.uniform(1, 10))}
    return {"family": family}


def sample_noise_spec(p: int, families: Mapping[str, float], rng: np.random.Generator) -> dict:
    homogeneous = bool(rng.random() < 0.5)
    if homogeneous:
        spec = _one_noise(_pick(rng, families), rng)
        nodes = [dict(spec) for _ in range(p)]
    else:
        nodes = [_one_noise(_pick(rng, families), rng) for _ in range(p)]
    return {"homogeneous": homogeneous, "nodes": nodes}


def draw_noise(spec: Mapping, n: int, rng: np.random.Generator) -> np.ndarray:
    fam = spec["family"]
    if fam == "normal":
        return rng.normal(0.0, 1.0, n)
    if fam == "uniform":
        return rng.uniform(-1.0, 1.0, n)
    if fam == "beta":
        return rng.beta(spec["alpha"], spec["beta"], n)
    if fam == "gamma":
        # unit scale, centred at the population mean
        return rng.gamma(spec["shape"], 1.0, n) - spec["shape"]
    raise ValueError(f"unknown noise family {fam!r}")


# -- simulation ----------------------------------------------------------------------

def standardize(x: np.ndarray) -> np.ndarray:
    x = x - x.mean(axis=0)
    sd = x.std(axis=0)
    return x / np.where(sd > 0, sd, 1.0)


def simulate(g: DirectedGraph, sem: SemSpec, noise: Mapping, n: int,
             rng: np.random.Generator, r2_targets=None) -> tuple[np.ndarray, dict]:
    """Generate ``n`` rows in topological order, standardizing each column.

    Returns the data and a dict with the realized noise scales and the
    nodes whose mechanism produced a constant signal (generated as pure
    noise instead).
    """
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    p = g.p
    if r2_targets is None:
        r2_targets = np.full(p, 0.5)
    X = np.zeros((n, p))
    scales = [None] * p
    degenerate = []
    for j in topological_sort(g).perm:
        eps = draw_noise(noise["nodes"][j], n, rng)
        node = sem.nodes[j]
        if node.parents:
            signal = mechanism_signal(node, X[:, node.parents])
            vs, ve = signal.var(), eps.var()
            if vs <= 1e-12 * max(1.0, ve) or not np.isfinite(vs):
                degenerate.append(j)
                col = eps
            else:
                r2 = float(r2_targets[j])
                c = math.sqrt(vs * (1.0 - r2) / (r2 * ve))
                scales[j] = c
                col = signal + c * eps
        else:
            col = eps
        X[:, j] = standardize(col)
    return X, {"noise_scales": scales, "degenerate_nodes": degenerate}


@dataclass(eq=False)
class TaskSample:
    X: np.ndarray
    gstar: DirectedGraph
    meta: dict

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


def sample_shape(config: TaskConfig, rng: np.random.Generator) -> tuple[int, int]:
    n = int(rng.integers(config.n_range[0], config.n_range[1] + 1))
    p = int(rng.integers(config.p_range[0], config.p_range[1] + 1))
    return n, p


def sample_task(config: TaskConfig, index: int, stream: int = TRAIN_STREAM,
                shape: tuple[int, int] | None = None) -> TaskSample:
    """Draw task ``index`` of the stream; ``shape`` pins ``(n, p)`` if given."""
    rng = task_rng(config.seed, index, stream)
    n, p = sample_shape(config, rng)
    if shape is not None:
        n, p = shape
    graph_family = _pick(rng, config.graph_families)
    s_drawn = int(rng.integers(0, config.edge_multiplier_max * p + 1))
    s = min(s_drawn, max_edges(p))
    skeleton = sample_skeleton(graph_family, p, s, rng)
    gstar = orient_random(skeleton, rng)
    sem_family = _pick(rng, config.sem_families)
    sem = sample_sem(gstar, sem_family, rng, config.weight_magnitude_halfwidth_max)
    noise = sample_noise_spec(p, config.noise_families, rng)
    shape_a, shape_b = rng.uniform(1.0, 10.0, size=2)
    lo, hi = config.r2_range
    r2 = lo + (hi - lo) * rng.beta(shape_a, shape_b, size=p)
    X, sim = simulate(gstar, sem, noise, n, rng, r2)
    meta = {
        "seed": config.seed,
        "index": int(index),
        "stream": int(stream),
        "n": n,
        "p": p,
        "graph_family": graph_family,
        "edges_drawn": s_drawn,
        "edges": s,
        "sem": sem.to_dict(),
        "noise": noise,
        "r2_beta_shapes": [float(shape_a), float(shape_b)],
        "r2_targets": [float(v) if gstar.adj[:, j].any() else None for j, v in enumerate(r2)],
        **sim,
    }
    return TaskSample(X, gstar, meta)


# -- bundles ---------------------------------------------------------------------

def write_bundle(task: TaskSample, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "data.csv", task.X, delimiter=",", fmt="%.17g")
    (out / "graph.json").write_text(graph_to_json(task.gstar) + "\n")
    (out / "meta.json").write_text(json.dumps(task.meta, sort_keys=True) + "\n")
    return out


def read_bundle(bundle_dir) -> TaskSample:
    d = Path(bundle_dir)
    X = np.loadtxt(d / "data.csv", delimiter=",", ndmin=2)
    g = graph_from_json((d / "graph.json").read_text())
    meta_path = d / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return TaskSample(X, g, meta)
