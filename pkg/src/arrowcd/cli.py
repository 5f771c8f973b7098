"""Command-line entry point: generate, train, predict, eval, check.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .encoder import load_checkpoint, read_checkpoint_header
from .factorized import NumericDomainError, map_prediction
from .graphs import graph_to_json, is_acyclic
from .metrics import METRIC_NAMES, evaluate
from .taskgen import OOD_PRESETS, ConfigError, TaskConfig, ood_preset, read_bundle, sample_task, standardize, write_bundle
from .trainer import TrainConfig, train_stream

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_DATA = 0, 2, 3, 4

log = logging.getLogger("arrowcd")


class DataError(ValueError):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int | None
    version: str
    inputs: dict
    outputs: dict
    started: float
    wall_seconds: float

    def write(self, path: Path) -> None:
        """Atomic write: temp file in the same directory, then rename."""
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest", suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)


def _manifest_path(out: Path) -> Path:
    return out / "run_manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"invalid JSON in {path}: {e}") from None


# -- data ingestion ----------------------------------------------------------------------

def read_table(path) -> np.ndarray:
    """Read a real-valued CSV; a first row with no numeric cell is a header."""
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except FileNotFoundError:
        raise DataError(f"data file not found: {path}") from None
    if rows and not any(_is_number(c) for c in rows[0]):
        rows = rows[1:]
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = len(rows[0])
    X = np.empty((len(rows), width))
    for i, row in enumerate(rows, 1):
        if len(row) != width:
            raise DataError(f"{path}: row {i} has {len(row)} columns, expected {width}")
        for j, cell in enumerate(row, 1):
            try:
                X[i - 1, j - 1] = float(cell)
            except ValueError:
                raise DataError(f"{path}: non-numeric cell {cell!r} at row {i}, column {j}") from None
    if not np.all(np.isfinite(X)):
        i, j = np.argwhere(~np.isfinite(X))[0] + 1
        raise DataError(f"{path}: non-finite value at row {i}, column {j}")
    return X


def _is_number(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


# -- commands ----------------------------------------------------------------------------

def cmd_generate(args) -> dict:
    base = TaskConfig.from_dict(_read_json(args.config)) if args.config else TaskConfig()
    if args.ood:
        base = ood_preset(args.ood, base)
    if args.seed is not None:
        base = base.replace(seed=args.seed)
    if args.count < 0:
        raise ConfigError("count", "must be >= 0")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        write_bundle(sample_task(base, i), out / f"task_{i:06d}")
    return {"config": base.to_dict(), "seed": base.seed, "inputs": {"config": args.config},
            "outputs": {"dir": str(out), "count": args.count}, "manifest": out}


def cmd_train(args) -> dict:
    cfg = TrainConfig.from_dict(_read_json(args.config)) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed, tasks=cfg.tasks.replace(seed=args.seed))
    out = Path(args.out)
    res = train_stream(cfg, out, resume=args.resume, progress_every=args.progress)
    return {"config": cfg.to_dict(), "seed": cfg.seed, "inputs": {"config": args.config, "resume": args.resume},
            "outputs": {"dir": str(out), "checkpoints": [str(c) for c in res.checkpoints]}, "manifest": out}


def cmd_predict(args) -> dict:
    params = load_checkpoint(args.model, dtype=np.float64)
    p_max = read_checkpoint_header(args.model).get("extra", {}).get("p_max")
    X = read_table(args.data)
    if p_max is not None and X.shape[1] > p_max:
        raise DataError(f"{args.data} has {X.shape[1]} columns; the model was trained on at most {p_max}")
    from .encoder import forward
    beliefs = forward(standardize(X), params)
    graph = map_prediction(beliefs)
    if not is_acyclic(graph):
        raise NumericDomainError("predicted graph is cyclic")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    beliefs_path = Path(args.beliefs) if args.beliefs else out.with_name(out.stem + "_beliefs.json")
    out.write_text(graph_to_json(graph) + "\n")
    beliefs_path.write_text(beliefs.to_json() + "\n")
    return {"config": {}, "seed": None, "inputs": {"model": args.model, "data": args.data},
            "outputs": {"graph": str(out), "beliefs": str(beliefs_path)}, "manifest": out}


def cmd_eval(args) -> dict:
    params = load_checkpoint(args.model, dtype=np.float64)
    dirs = sorted(d for d in Path(args.tasks).iterdir() if (d / "data.csv").exists())
    if not dirs:
        raise DataError(f"no task bundles under {args.tasks}")
    tasks = [read_bundle(d) for d in dirs]
    summary = evaluate(params, tasks)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    extra = ("shd", "tp", "fp", "fn", "reversals", "empty_truth")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("task",) + METRIC_NAMES + extra)
        for d, rep in zip(dirs, summary.reports):
            r = rep.to_dict()
            w.writerow([d.name] + [repr(float(r[k])) for k in METRIC_NAMES] + [int(r[k]) for k in extra])
        w.writerow(["mean"] + [repr(summary.mean[k]) for k in METRIC_NAMES] + [""] * len(extra))
        w.writerow(["stderr"] + [repr(summary.stderr[k]) for k in METRIC_NAMES] + [""] * len(extra))
    print(json.dumps({"count": summary.count, "mean": summary.mean, "stderr": summary.stderr}, indent=2))
    return {"config": {}, "seed": None, "inputs": {"model": args.model, "tasks": args.tasks},
            "outputs": {"report": str(out)}, "manifest": out}


def cmd_check(args) -> dict:
    from .checks import run_suite
    results = run_suite(args.suite)
    for r in results:
        print(json.dumps(r.to_dict(), sort_keys=True))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} invariants passed", file=sys.stderr)
    out = {"config": {"suite": args.suite}, "seed": None, "inputs": {}, "outputs": {},
           "manifest": Path(args.out) if args.out else None, "failed": bool(failed)}
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "check_report.json").write_text(
            json.dumps([r.to_dict() for r in results], indent=2) + "\n")
        out["outputs"] = {"report": str(Path(args.out) / "check_report.json")}
    return out


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="arrowcd", description="Amortized causal discovery with skeleton-order beliefs.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic task bundles")
    g.add_argument("--config", help="task config JSON (defaults if omitted)")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--ood", choices=OOD_PRESETS)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="streaming training run")
    t.add_argument("--config", help="train config JSON (desk defaults if omitted)")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    t.add_argument("--progress", type=int, default=100, help="log every N iterations (0 = quiet)")
    t.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="MAP graph for one CSV dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="graph JSON path")
    p.add_argument("--beliefs", help="beliefs JSON path (default: <out>_beliefs.json)")
    p.set_defaults(fn=cmd_predict)

    e = sub.add_parser("eval", help="score a checkpoint on task bundles")
    e.add_argument("--model", required=True)
    e.add_argument("--tasks", required=True)
    e.add_argument("--out", required=True, help="report CSV path")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("check", help="run invariant suites")
    c.add_argument("--suite", default="all",
                   choices=("factorization", "likelihood", "generator", "encoder", "metrics", "all"))
    c.add_argument("--out", help="directory for check_report.json")
    c.set_defaults(fn=cmd_check)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    t0 = time.perf_counter()
    try:
        info = args.fn(args)
    except ConfigError as e:
        print(f"config error: field {e.field!r}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericDomainError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    manifest_dir = info.pop("manifest")
    failed = info.pop("failed", False)
    if manifest_dir is not None:
        RunManifest(
            command=args.command,
            argv=argv,
            config=info["config"],
            seed=info["seed"],
            version=__version__,
            inputs=info["inputs"],
            outputs=info["outputs"],
            started=started,
            wall_seconds=time.perf_counter() - t0,
        ).write(_manifest_path(Path(manifest_dir)))
    return EXIT_NUMERIC if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
