"""Streaming supervised pretraining on freshly generated tasks.

Every iteration draws ``batch_size`` new tasks from the training stream
(indices ``it * B ... it * B + B - 1``, never reused), evaluates the
composite NLL of the encoder's beliefs against the true graphs, and takes
one AdamW step. A fixed validation set from a separate stream is scored
before the first update and at every checkpoint.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .encoder import EncoderConfig, EncoderParams, forward, forward_batch, init_params, save_checkpoint
from .factorized import PROB_CLAMP, NumericDomainError, composite_nll
from .graphs import DirectedGraph
from .metrics import evaluate, score_prediction, summarize  # noqa: F401  (evaluate re-exported)
from .taskgen import TRAIN_STREAM, VALIDATION_STREAM, ConfigError, TaskConfig, TaskSample, sample_task

log = logging.getLogger(__name__)

MAX_BAD_STEPS = 10


def desk_task_config(seed: int = 0) -> TaskConfig:
    return TaskConfig(
        n_range=(100, 300),
        p_range=(3, 8),
        sem_families={"linear": 1.0},
        noise_families={"normal": 1.0},
        seed=seed,
    )


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    batch_size: int = 16
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    tasks: TaskConfig = field(default_factory=desk_task_config)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    validation_tasks: int = 200
    checkpoint_interval: int = 500
    dtype: str = "float64"

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations", "must be >= 0")
        for name in ("batch_size", "validation_tasks", "checkpoint_interval"):
            if getattr(self, name) <= 0:
                raise ConfigError(name, "must be positive")
        if not self.lr > 0:
            raise ConfigError("lr", "must be > 0")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("betas", "both betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ConfigError("eps", "must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype", "must be 'float64' or 'float32'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["tasks"] = self.tasks.to_dict()
        d["encoder"] = asdict(self.encoder)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        kw = dict(d)
        if "betas" in kw:
            kw["betas"] = tuple(kw["betas"])
        if "tasks" in kw:
            kw["tasks"] = TaskConfig.from_dict(kw["tasks"])
        if "encoder" in kw:
            enc = kw["encoder"]
            bad = set(enc) - set(EncoderConfig.__dataclass_fields__)
            if bad:
                raise ConfigError(f"encoder.{sorted(bad)[0]}", "unknown field")
            try:
                kw["encoder"] = EncoderConfig(**enc)
            except ValueError as e:
                raise ConfigError("encoder", str(e)) from None
        return cls(**kw)

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


# -- loss ------------------------------------------------------------------------------

def composite_loss(logits: Tensor, scores: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over the batch of the per-task composite NLL.

    ``logits`` (B, p, p) skeleton logits, ``scores`` (B, p), ``targets``
    (B, p, p) 0/1 adjacency. The loss is accumulated in 64-bit.
    """
    logits = ad.cast(logits, np.float64)
    scores = ad.cast(scores, np.float64)
    B, p = scores.shape
    diff = ad.reshape(scores, (B, p, 1)) - ad.reshape(scores, (B, 1, p))
    log_r = ad.clip(ad.log_sigmoid(logits) + ad.log_sigmoid(diff), np.log(PROB_CLAMP), np.log1p(-PROB_CLAMP))
    g = np.asarray(targets, dtype=np.float64)
    off = 1.0 - np.eye(p)
    terms = log_r * (g * off) + ad.log1mexp(log_r) * ((1.0 - g) * off)
    return ad.reduce_sum(terms) * (-1.0 / B)


def batch_loss_and_grads(params: EncoderParams, tasks: Sequence[TaskSample]) -> tuple[float, dict]:
    names = params.names()
    P = {k: Tensor(params.arrays[k]) for k in names}
    X = np.stack([t.X for t in tasks]).astype(params.arrays[names[0]].dtype)
    targets = np.stack([t.gstar.adj for t in tasks])
    with Tape() as tape:
        logits, scores = forward_batch(X, P, params.config)
        loss = composite_loss(logits, scores, targets)
    grads = ad.backward(tape, loss, [P[k] for k in names])
    return float(loss.data), dict(zip(names, grads))


# -- optimizer -------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: dict
    v: dict


def adam_init(params: EncoderParams | Mapping[str, np.ndarray]) -> AdamState:
    arrays = params.arrays if isinstance(params, EncoderParams) else params
    return AdamState(0, {k: np.zeros_like(a) for k, a in arrays.items()},
                     {k: np.zeros_like(a) for k, a in arrays.items()})


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
               state: AdamState, config: TrainConfig) -> tuple[dict, AdamState, bool]:
    """One decoupled-weight-decay Adam update. Returns ``(params, state, applied)``.

    A non-finite gradient skips the whole update and leaves state untouched.
    """
    if set(params) != set(grads):
        raise ValueError("params and grads name different arrays")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, expected {params[k].shape}")
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient in %s; update skipped", k)
            return dict(params), state, False
    b1, b2 = config.betas
    t = state.step + 1
    lr, lam, eps = config.lr, config.weight_decay, config.eps
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, w in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + eps)
        new_p[k] = (w * (1.0 - lr * lam) - lr * step).astype(w.dtype)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(t, new_m, new_v), True


# -- logs and checkpoints --------------------------------------------------------------

TRAIN_COLUMNS = ("iteration", "train_nll", "wall_ms")
VAL_COLUMNS = ("iteration", "val_nll", "nshd", "f1", "ap")


@dataclass
class TrainLog:
    train: list = field(default_factory=list)  # (iteration, train_nll, wall_ms)
    val: list = field(default_factory=list)    # (iteration, val_nll, nshd, f1, ap)

    def train_nll(self) -> np.ndarray:
        return np.array([row[1] for row in self.train])

    def val_nll(self) -> np.ndarray:
        return np.array([row[1] for row in self.val])


@dataclass
class TrainResult:
    params: EncoderParams
    log: TrainLog
    checkpoints: list


def validation_set(config: TrainConfig) -> list[TaskSample]:
    return [sample_task(config.tasks, i, stream=VALIDATION_STREAM) for i in range(config.validation_tasks)]


def validate(params: EncoderParams, tasks: Sequence[TaskSample]) -> dict:
    nll, reports = [], []
    for t in tasks:
        beliefs = forward(t.X, params)
        nll.append(composite_nll(beliefs, t.gstar))
        reports.append(score_prediction(beliefs, t.gstar))
    summary = summarize(reports)
    return {"val_nll": float(np.mean(nll)), "nshd": summary.mean["nshd"],
            "f1": summary.mean["f1"], "ap": summary.mean["ap"]}


def batch_tasks(config: TrainConfig, iteration: int) -> list[TaskSample]:
    """Tasks of one iteration; all share the shape drawn by the first index."""
    B = config.batch_size
    first = sample_task(config.tasks, iteration * B, stream=TRAIN_STREAM)
    shape = (first.n, first.p)
    return [first] + [sample_task(config.tasks, iteration * B + i, stream=TRAIN_STREAM, shape=shape)
                      for i in range(1, B)]


def _extra(config: TrainConfig, iteration: int) -> dict:
    # the largest p seen in training bounds the columns accepted at prediction
    return {"iteration": iteration, "p_max": config.tasks.p_range[1]}


def _state_path(out: Path, iteration: int) -> Path:
    return out / f"state_{iteration:07d}.npz"


def _save_state(out: Path, iteration: int, params: EncoderParams, opt: AdamState, config: TrainConfig):
    """Checkpoint (float32 encoder format) plus full-precision resume state."""
    ckpt = out / f"ckpt_{iteration:07d}.bin"
    save_checkpoint(params, ckpt, extra=_extra(config, iteration))
    arrays = {f"param/{k}": a for k, a in params.arrays.items()}
    arrays.update({f"m/{k}": a for k, a in opt.m.items()})
    arrays.update({f"v/{k}": a for k, a in opt.v.items()})
    tmp = out / f".state_{iteration:07d}.tmp.npz"
    np.savez(tmp, step=np.array(opt.step), **arrays)
    tmp.replace(_state_path(out, iteration))
    return ckpt


def latest_state(out: Path) -> Path | None:
    found = sorted(Path(out).glob("state_*.npz"))
    return found[-1] if found else None


def _load_state(path: Path, config: TrainConfig) -> tuple[int, EncoderParams, AdamState]:
    data = np.load(path)
    iteration = int(path.stem.split("_")[1])
    names = [k[len("param/"):] for k in data.files if k.startswith("param/")]
    from .encoder import param_shapes
    order = list(param_shapes(config.encoder))
    if sorted(names) != sorted(order):
        raise ValueError(f"{path} does not match the configured encoder")
    params = EncoderParams(config.encoder, {k: data[f"param/{k}"] for k in order})
    opt = AdamState(int(data["step"]), {k: data[f"m/{k}"] for k in order}, {k: data[f"v/{k}"] for k in order})
    return iteration, params, opt


def _read_csv(path: Path) -> list[tuple]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [(int(r[0]), *map(float, r[1:])) for r in rows]


def _write_csv(path: Path, header, rows):
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([r[0], *(repr(float(x)) for x in r[1:])])
    tmp.replace(path)


# -- training loop ---------------------------------------------------------------------

def train_stream(config: TrainConfig, out_dir=None, resume: bool = False,
                 progress_every: int = 0) -> TrainResult:
    """Run streaming training; with ``out_dir`` write logs and checkpoints there.

    Raises :class:`NumericDomainError` when the loss or gradients stay
    non-finite for ``MAX_BAD_STEPS`` consecutive iterations.
    """
    dtype = np.dtype(config.dtype)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    trainlog = TrainLog()
    checkpoints = []
    start = 0
    state_file = latest_state(out) if (resume and out is not None) else None
    if state_file is not None:
        start, params, opt = _load_state(state_file, config)
        params = params.astype(dtype)
        trainlog.train = [r for r in _read_csv(out / "train.csv") if r[0] < start]
        trainlog.val = [r for r in _read_csv(out / "val.csv") if r[0] <= start]
        log.info("resuming from %s at iteration %d", state_file.name, start)
    else:
        params = init_params(config.encoder, np.random.default_rng(config.seed), dtype=dtype)
        opt = adam_init(params)

    val_tasks = validation_set(config)
    if not trainlog.val:
        trainlog.val.append((start, *validate(params, val_tasks).values()))

    bad = 0
    t_start = time.perf_counter()
    for it in range(start, config.iterations):
        tasks = batch_tasks(config, it)
        loss, grads = batch_loss_and_grads(params, tasks)
        new, opt_next, applied = adamw_step(params.arrays, grads, opt, config)
        if np.isfinite(loss) and applied:
            params, opt, bad = EncoderParams(params.config, new), opt_next, 0
        else:
            bad += 1
            log.warning("iteration %d: non-finite loss or gradient (%d in a row)", it, bad)
            if bad >= MAX_BAD_STEPS:
                raise NumericDomainError(f"non-finite loss for {bad} consecutive iterations (last at {it})")
        trainlog.train.append((it, loss, (time.perf_counter() - t_start) * 1e3))
        done = it + 1
        if progress_every and done % progress_every == 0:
            log.info("iteration %d train_nll %.4f", done, loss)
        if done % config.checkpoint_interval == 0 or done == config.iterations:
            trainlog.val.append((done, *validate(params, val_tasks).values()))
            if out is not None:
                checkpoints.append(_save_state(out, done, params, opt, config))
                _write_csv(out / "train.csv", TRAIN_COLUMNS, trainlog.train)
                _write_csv(out / "val.csv", VAL_COLUMNS, trainlog.val)

    if out is not None:
        if config.iterations == start:
            # nothing ran: still leave a checkpoint of the current parameters
            checkpoints.append(_save_state(out, start, params, opt, config))
        _write_csv(out / "train.csv", TRAIN_COLUMNS, trainlog.train)
        _write_csv(out / "val.csv", VAL_COLUMNS, trainlog.val)
        final = out / "final.bin"
        save_checkpoint(params, final, extra=_extra(config, max(config.iterations, start)))
        checkpoints.append(final)
        (out / "train_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    return TrainResult(params, trainlog, checkpoints)


# -- population-level checks -----------------------------------------------------------

def minimize_composite_risk(graphs: Sequence[DirectedGraph], weights: Sequence[float] | None = None,
                            steps: int = 20_000, lr: float = 2.0) -> np.ndarray:
    """Minimize the expected composite risk over free directed marginals.

    The risk is ``E_G[-sum_{j!=k} G_jk log r_jk + (1-G_jk) log(1-r_jk)]``
    under the weighted mixture of ``graphs``, with ``r = sigmoid(theta)``
    optimized by plain gradient descent on ``theta``. Returns ``r`` (p, p)
    with a zero diagonal.
    """
    p = graphs[0].p
    eta = edge_frequencies(graphs, weights)
    off = 1.0 - np.eye(p)
    theta = np.zeros((p, p))
    for _ in range(steps):
        t = Tensor(theta)
        with Tape() as tape:
            risk = -ad.reduce_sum(ad.log_sigmoid(t) * (eta * off) + ad.log_sigmoid(-t) * ((1.0 - eta) * off))
        (g,) = ad.backward(tape, risk, [t])
        theta = theta - lr * g
    r = 1.0 / (1.0 + np.exp(-theta))
    np.fill_diagonal(r, 0.0)
    return r


def edge_frequencies(graphs: Sequence[DirectedGraph], weights: Sequence[float] | None = None) -> np.ndarray:
    w = np.full(len(graphs), 1.0 / len(graphs)) if weights is None else np.asarray(weights, float)
    return np.einsum("g,gjk->jk", w / w.sum(), np.stack([g.adj for g in graphs]).astype(float))
