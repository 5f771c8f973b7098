"""Four-stage attention encoder with skeleton and order heads.

Shapes use a leading task-batch axis ``B``; all tasks in a batch share
``(n, p)``. Stages:

1. scalar projection            X (B, n, p)        -> Z (B, n, p, d)
2. observation transformer      attends over p within each observation
3. variable transformer         m summary tokens cross-attend over the n
                                observations of each variable, then merge
                                -> U (B, p, d)
4. context transformer          attends over p variables -> H (B, p, d)

No positional information enters anywhere, so the output is invariant to
row order and equivariant to column order.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Tensor
from .factorized import EdgeBeliefs, NumericDomainError


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 32
    blocks: int = 2
    heads: int = 4
    ffn_mult: int = 4
    m: int = 4
    hidden_mult_skeleton: int = 2

    def __post_init__(self):
        for name, v in asdict(self).items():
            if int(v) <= 0:
                raise ValueError(f"EncoderConfig.{name} must be positive, got {v}")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")

    @classmethod
    def paper_scale(cls) -> "EncoderConfig":
        return cls(d=512, blocks=3, heads=8, ffn_mult=4, m=16, hidden_mult_skeleton=2)


# -- parameters ------------------------------------------------------------------

def _block_shapes(prefix: str, d: int, ffn: int, cross: bool) -> list[tuple[str, tuple]]:
    shapes = []

    def attn(tag):
        for w in ("q", "k", "v", "o"):
            shapes.append((f"{prefix}.{tag}.w{w}", (d, d)))
            shapes.append((f"{prefix}.{tag}.b{w}", (d,)))

    def norm(tag):
        shapes.append((f"{prefix}.{tag}.gain", (d,)))
        shapes.append((f"{prefix}.{tag}.bias", (d,)))

    norm("ln_self")
    attn("self")
    if cross:
        norm("ln_query")
        norm("ln_memory")
        attn("cross")
    norm("ln_ffn")
    shapes += [
        (f"{prefix}.ffn.w1", (d, ffn)), (f"{prefix}.ffn.b1", (ffn,)),
        (f"{prefix}.ffn.w2", (ffn, d)), (f"{prefix}.ffn.b2", (d,)),
    ]
    return shapes


def param_shapes(config: EncoderConfig) -> "OrderedDict[str, tuple]":
    d, ffn, m = config.d, config.d * config.ffn_mult, config.m
    hs = config.d * config.hidden_mult_skeleton
    shapes: list[tuple[str, tuple]] = [("proj.w", (d,)), ("proj.b", (d,))]
    for stage, cross in (("obs", False), ("var", True), ("ctx", False)):
        for b in range(config.blocks):
            shapes += _block_shapes(f"{stage}.{b}", d, ffn, cross)
        shapes += [(f"{stage}.ln_out.gain", (d,)), (f"{stage}.ln_out.bias", (d,))]
        if stage == "var":
            shapes += [("var.summary", (m, d)),
                       ("merge.w", (m * d, d)), ("merge.b", (d,))]
    shapes += [
        ("skel.w1", (2 * d, hs)), ("skel.b1", (hs,)),
        ("skel.w2", (hs, 1)), ("skel.b2", (1,)),
        ("ord.w", (d, 1)), ("ord.b", (1,)),
    ]
    return OrderedDict(shapes)


def count_params(config: EncoderConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


@dataclass(eq=False)
class EncoderParams:
    config: EncoderConfig
    arrays: "OrderedDict[str, np.ndarray]"

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(self.arrays)

    def count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(self.config, OrderedDict((k, v.astype(dtype)) for k, v in self.arrays.items()))

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, OrderedDict((k, v.copy()) for k, v in self.arrays.items()))


def init_params(config: EncoderConfig, rng: np.random.Generator, dtype=np.float64) -> EncoderParams:
    """Normal weights with std 1/sqrt(fan_in); zero biases; unit norm gains."""
    arrays = OrderedDict()
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            a = np.ones(shape)
        elif leaf.startswith("b") and len(shape) == 1:
            a = np.zeros(shape)
        elif name == "var.summary":
            a = rng.normal(0.0, 1.0, shape)
        else:
            fan_in = 1 if name == "proj.w" else shape[0]
            a = rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape)
        arrays[name] = a.astype(dtype)
    return EncoderParams(config, arrays)


# -- building blocks ---------------------------------------------------------------

class _Trace:
    """Collects attention-score shapes for structural checks."""

    def __init__(self):
        self.scores: dict[str, list[tuple[int, ...]]] = {}

    def add(self, key, shape):
        self.scores.setdefault(key, []).append(tuple(shape))


def _norm(x, P, prefix):
    return ad.layer_norm(x) * P[f"{prefix}.gain"] + P[f"{prefix}.bias"]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, L, d = x.shape
    x = ad.reshape(x, (*lead, L, heads, d // heads))
    nd = len(lead)
    return ad.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, H, L, dh = x.shape
    nd = len(lead)
    x = ad.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))
    return ad.reshape(x, (*lead, L, H * dh))


def _attention(query, memory, P, prefix, heads, trace=None, tag=None):
    q = _split_heads(query @ P[f"{prefix}.wq"] + P[f"{prefix}.bq"], heads)
    k = _split_heads(memory @ P[f"{prefix}.wk"] + P[f"{prefix}.bk"], heads)
    v = _split_heads(memory @ P[f"{prefix}.wv"] + P[f"{prefix}.bv"], heads)
    dh = q.shape[-1]
    scores = (q @ ad.transpose(k)) * (1.0 / np.sqrt(dh))
    if trace is not None:
        trace.add(tag, scores.shape[-2:])
    out = _merge_heads(ad.softmax(scores) @ v)
    return out @ P[f"{prefix}.wo"] + P[f"{prefix}.bo"]


def _ffn(x, P, prefix):
    h = ad.gelu(x @ P[f"{prefix}.w1"] + P[f"{prefix}.b1"])
    return h @ P[f"{prefix}.w2"] + P[f"{prefix}.b2"]


def _self_block(x, P, prefix, heads, trace=None, tag=None):
    h = _norm(x, P, f"{prefix}.ln_self")
    x = x + _attention(h, h, P, f"{prefix}.self", heads, trace, tag)
    return x + _ffn(_norm(x, P, f"{prefix}.ln_ffn"), P, f"{prefix}.ffn")


def _summary_block(tokens, memory, P, prefix, heads, trace=None):
    h = _norm(tokens, P, f"{prefix}.ln_self")
    tokens = tokens + _attention(h, h, P, f"{prefix}.self", heads, trace, "var.self")
    q = _norm(tokens, P, f"{prefix}.ln_query")
    mem = _norm(memory, P, f"{prefix}.ln_memory")
    tokens = tokens + _attention(q, mem, P, f"{prefix}.cross", heads, trace, "var.cross")
    return tokens + _ffn(_norm(tokens, P, f"{prefix}.ln_ffn"), P, f"{prefix}.ffn")


# -- forward ---------------------------------------------------------------------------

def _as_tensors(params: EncoderParams | Mapping[str, Tensor]) -> Mapping[str, Tensor]:
    if isinstance(params, EncoderParams):
        return {k: Tensor(v) for k, v in params.arrays.items()}
    return params


def _check_input(X) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim not in (2, 3):
        raise ValueError(f"X must be (n, p) or (B, n, p), got shape {X.shape}")
    if X.shape[-2] < 1 or X.shape[-1] < 1:
        raise ValueError(f"X needs n >= 1 and p >= 1, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NumericDomainError("X contains non-finite values")
    return X


def embed_batch(X, P: Mapping[str, Tensor], config: EncoderConfig, trace: _Trace | None = None) -> Tensor:
    """(B, n, p) data -> (B, p, d) contextual variable embeddings."""
    X = X if isinstance(X, Tensor) else Tensor(X)
    B, n, p = X.shape
    d, heads = config.d, config.heads
    z = ad.reshape(X, (B, n, p, 1)) * P["proj.w"] + P["proj.b"]

    for b in range(config.blocks):
        z = _self_block(z, P, f"obs.{b}", heads, trace, "obs")
    z = _norm(z, P, "obs.ln_out")

    memory = ad.transpose(z, (0, 2, 1, 3))  # (B, p, n, d)
    tokens = P["var.summary"] * Tensor(np.ones((B, p, 1, 1), dtype=z.dtype))
    for b in range(config.blocks):
        tokens = _summary_block(tokens, memory, P, f"var.{b}", heads, trace)
    tokens = _norm(tokens, P, "var.ln_out")
    u = ad.reshape(tokens, (B, p, config.m * d)) @ P["merge.w"] + P["merge.b"]

    h = u
    for b in range(config.blocks):
        h = _self_block(h, P, f"ctx.{b}", heads, trace, "ctx")
    return _norm(h, P, "ctx.ln_out")


def skeleton_logits(h: Tensor, P: Mapping[str, Tensor]) -> Tensor:
    """Symmetric (B, p, p) edge logits with zero diagonal.

    The first layer acts on ``[h_j || h_k]``, which splits into separate
    projections of ``h_j`` and ``h_k``.
    """
    B, p, d = h.shape
    w1 = P["skel.w1"]
    left = h @ w1[:d]
    right = h @ w1[d:]
    pre = ad.reshape(left, (B, p, 1, -1)) + ad.reshape(right, (B, 1, p, -1)) + P["skel.b1"]
    e = ad.reshape(ad.gelu(pre) @ P["skel.w2"], (B, p, p)) + P["skel.b2"]
    sym = (e + ad.transpose(e)) * 0.5
    off = Tensor((1.0 - np.eye(p)).astype(sym.dtype))
    return sym * off


def order_scores(h: Tensor, P: Mapping[str, Tensor]) -> Tensor:
    B, p, _ = h.shape
    return ad.reshape(h @ P["ord.w"] + P["ord.b"], (B, p))


def forward_batch(X, params, config: EncoderConfig | None = None, trace=None) -> tuple[Tensor, Tensor]:
    """Return ``(edge_logits (B,p,p), scores (B,p))`` as tensors."""
    if isinstance(params, EncoderParams):
        config = params.config
    P = _as_tensors(params)
    h = embed_batch(X, P, config, trace)
    return skeleton_logits(h, P), order_scores(h, P)


def embed(X, params: EncoderParams) -> np.ndarray:
    X = _check_input(X)
    single = X.ndim == 2
    Xb = X[None] if single else X
    out = embed_batch(Xb.astype(next(iter(params.arrays.values())).dtype), _as_tensors(params), params.config).data
    return out[0] if single else out


def skeleton_head(h, params: EncoderParams) -> np.ndarray:
    """Edge probabilities nu (p, p) from embeddings h (p, d)."""
    lg = skeleton_logits(Tensor(np.asarray(h)[None]), _as_tensors(params)).data[0]
    nu = expit(lg)
    np.fill_diagonal(nu, 0.0)
    return nu


def order_head(h, params: EncoderParams) -> np.ndarray:
    return order_scores(Tensor(np.asarray(h)[None]), _as_tensors(params)).data[0]


def forward(X, params: EncoderParams) -> EdgeBeliefs:
    X = _check_input(X)
    if X.ndim != 2:
        raise ValueError("forward takes a single (n, p) dataset; use forward_batch for batches")
    dtype = next(iter(params.arrays.values())).dtype
    lg, s = forward_batch(X[None].astype(dtype), params)
    return EdgeBeliefs(lg.data[0].astype(np.float64), s.data[0].astype(np.float64))


# -- checkpoints ------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"ARROWCKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: EncoderParams, path, extra: dict | None = None) -> None:
    """Header (magic, version, JSON manifest) then little-endian float32 arrays."""
    manifest = []
    offset = 0
    blobs = []
    for name, arr in params.arrays.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    header = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "config": json.dumps(asdict(params.config), sort_keys=True),
        "arrays": manifest,
        "extra": extra or {},
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not an encoder checkpoint")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        return json.loads(fh.read(hlen))


def load_checkpoint(path, dtype=np.float32) -> EncoderParams:
    header = read_checkpoint_header(path)
    config = EncoderConfig(**json.loads(header["config"]))
    with open(path, "rb") as fh:
        fh.seek(8)
        _, hlen = struct.unpack("<IQ", fh.read(12))
        fh.seek(20 + hlen)
        raw = fh.read()
    arrays = OrderedDict()
    for item in header["arrays"]:
        chunk = raw[item["offset"]: item["offset"] + item["nbytes"]]
        arrays[item["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(item["shape"]).astype(dtype)
    expected = param_shapes(config)
    if list(arrays) != list(expected):
        raise ValueError("checkpoint manifest does not match the encoder layout")
    return EncoderParams(config, arrays)
