"""Command-line entry point: run experiments and property suites from JSON configs.

Commands (the ``command`` field of the config): train-numbering,
train-autoencode, sweep-autoencode, check-equivariance, gradcheck, bench.
Every run writes metrics.jsonl, summary.json (byte-stable given config+seed),
and manifest.json into the output directory.  Exit codes: 0 ok, 1 runtime
failure (partial outputs preserved), 2 invalid config.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .implicit_grad import BackwardMode
from .inner_opt import InnerConfig

COMMANDS = (
    "train-numbering",
    "train-autoencode",
    "sweep-autoencode",
    "check-equivariance",
    "gradcheck",
    "bench",
)


class ConfigError(ValueError):
    pass


_INNER_FIELDS = {
    "step_size": float,
    "momentum": float,
    "iterations": int,
    "clip_norm": lambda v: None if v is None else float(v),
    "anchor_lambda": float,
}

_BACKWARD_FIELDS = {"kind": str, "gamma": float, "cg_steps": int, "cg_tol": float}

_TASK_FIELDS = {
    "train-numbering": {
        "n": int, "classes": int, "hidden": int, "pool": str, "steps": int,
        "batch_size": int, "train_size": int, "val_size": int, "test_size": int,
        "eval_every": int, "outer_lr": float,
    },
    "train-autoencode": {
        "n": int, "d": int, "hidden": int, "pool": str, "epochs": int,
        "batch_size": int, "train_size": int, "test_size": int, "outer_lr": float,
    },
}

_SWEEP_FIELDS = {
    "n": list, "d": list, "iterations": list, "modes": list, "seeds": list,
    "hidden": int, "epochs": int, "batch_size": int, "train_size": int, "test_size": int,
}

_BENCH_FIELDS = {"n": int, "d": int, "hidden": int, "batch_size": int, "iteration_counts": list}

_CHECK_FIELDS = {"hidden": int, "n": int, "tol": float, "probe_deltas": list, "probe_samples": int}

_GRADCHECK_FIELDS = {"trials": int, "tol": float}


def _reject_unknown(section: dict, allowed: set, where: str):
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown field(s) in {where}: {', '.join(unknown)}")


def _coerce(section: dict, fields: dict, where: str) -> dict:
    _reject_unknown(section, set(fields), where)
    out = {}
    for key, value in section.items():
        try:
            out[key] = fields[key](value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"field {where}.{key}: {exc}") from exc
    return out


def validate_config(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    top_allowed = {"command", "seed", "seeds", "output_dir", "task", "inner", "backward", "threads", "iteration_schedule", "lr_drop"}
    _reject_unknown(raw, top_allowed, "config")
    command = raw.get("command")
    if command not in COMMANDS:
        raise ConfigError(f"field command: expected one of {', '.join(COMMANDS)}, got {command!r}")
    cfg = {
        "command": command,
        "seed": int(raw.get("seed", 0)),
        "seeds": [int(s) for s in raw.get("seeds", [])],
        "output_dir": raw.get("output_dir"),
        "threads": int(raw["threads"]) if "threads" in raw else None,
        "iteration_schedule": raw.get("iteration_schedule"),
        "lr_drop": raw.get("lr_drop"),
    }
    task = raw.get("task", {})
    if command in _TASK_FIELDS:
        cfg["task"] = _coerce(task, _TASK_FIELDS[command], "task")
    elif command == "sweep-autoencode":
        cfg["task"] = _coerce(task, _SWEEP_FIELDS, "task")
    elif command == "bench":
        cfg["task"] = _coerce(task, _BENCH_FIELDS, "task")
    elif command == "check-equivariance":
        cfg["task"] = _coerce(task, _CHECK_FIELDS, "task")
    else:
        cfg["task"] = _coerce(task, _GRADCHECK_FIELDS, "task")
    cfg["inner"] = _coerce(raw.get("inner", {}), _INNER_FIELDS, "inner")
    cfg["backward"] = _coerce(raw.get("backward", {}), _BACKWARD_FIELDS, "backward")
    return cfg


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """--set dotted.path=json_value, applied before validation."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        path, _, value = item.partition("=")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        keys = path.split(".")
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {path!r} crosses a non-object")
        node[keys[-1]] = parsed
    return raw


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def _write_outputs(out_dir: Path, summary: dict, metrics: list[dict], config: dict, seed: int):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.jsonl", "w") as fh:
        for rec in metrics:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (out_dir / "summary.json").write_text(_canonical_json(summary))
    manifest = {
        "config_hash": hashlib.sha256(_canonical_json(config).encode()).hexdigest(),
        "code_version": __version__,
        "seed": seed,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _round_floats(obj, digits=12):
    if isinstance(obj, float):
        return round(obj, digits)
    if isinstance(obj, dict):
        return {k: _round_floats(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v, digits) for v in obj]
    return obj


def _build_inner(cfg: dict, defaults: InnerConfig) -> InnerConfig:
    merged = {**asdict(defaults), **cfg["inner"]}
    merged.pop("projection", None)
    merged.pop("fixed_mask", None)
    merged.pop("record_for_unroll", None)
    return InnerConfig(**merged)


def _build_backward(cfg: dict) -> BackwardMode:
    return BackwardMode(**{"kind": "approximate_implicit", **cfg["backward"]})


def _run_train_numbering(cfg: dict, out_dir: Path) -> dict:
    from .tasks import NumberingConfig, train_numbering

    defaults = NumberingConfig()
    task = NumberingConfig(
        **cfg["task"],
        seed=cfg["seed"],
        inner=_build_inner(cfg, defaults.inner),
        backward=_build_backward(cfg),
        iteration_schedule=cfg["iteration_schedule"],
        lr_drop=tuple(cfg["lr_drop"]) if cfg["lr_drop"] else None,
    )
    metrics = []
    summary = train_numbering(task, on_metric=metrics.append)
    summary = {k: v for k, v in summary.items() if not k.startswith("_") and k != "metrics"}
    return {"summary": _round_floats(summary), "metrics": metrics}


def _run_train_autoencode(cfg: dict, out_dir: Path) -> dict:
    from .tasks import AutoencodeConfig, train_autoencode

    defaults = AutoencodeConfig()
    task = AutoencodeConfig(
        **cfg["task"],
        seed=cfg["seed"],
        inner=_build_inner(cfg, defaults.inner),
        backward=_build_backward(cfg),
        iteration_schedule=cfg["iteration_schedule"],
        lr_drop=tuple(cfg["lr_drop"]) if cfg["lr_drop"] else None,
    )
    metrics = []
    summary = train_autoencode(task, on_metric=metrics.append)
    wall = summary.pop("_train_wall_s", None)
    summary = {k: v for k, v in summary.items() if not k.startswith("_")}
    result = {"summary": _round_floats(summary), "metrics": metrics}
    result["timing"] = {"train_wall_s": wall}
    return result


def _sweep_worker(args):
    seed, mode, n, d, iters, base = args
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    from .tasks import AutoencodeConfig, train_autoencode

    momentum = 0.9 if mode == "idspn_momentum" else 0.0
    kind = "unrolled" if mode == "dspn" else "approximate_implicit"
    cfg = AutoencodeConfig(
        n=n,
        d=d,
        seed=seed,
        inner=InnerConfig(
            step_size=1.0, momentum=momentum, iterations=iters, clip_norm=10.0, anchor_lambda=0.2
        ),
        backward=BackwardMode(kind),
        **base,
    )
    summary = train_autoencode(cfg)
    return {
        "n": n, "d": d, "iterations": iters, "mode": mode, "seed": seed,
        "final_loss": summary["test_loss"], "train_wall_s": summary["_train_wall_s"],
    }


def _run_sweep(cfg: dict, out_dir: Path) -> dict:
    task = dict(cfg["task"])
    ns = [int(v) for v in task.pop("n", [2])]
    ds = [int(v) for v in task.pop("d", [2])]
    iterations = [int(v) for v in task.pop("iterations", [20])]
    modes = [str(m) for m in task.pop("modes", ["idspn_momentum", "dspn"])]
    seeds = cfg["seeds"] or [cfg["seed"]]
    jobs = [
        (seed, mode, n, d, iters, task)
        for n in ns for d in ds for iters in iterations for mode in modes for seed in seeds
    ]
    threads = cfg["threads"] or 1
    if threads > 1:
        import concurrent.futures as cf

        with cf.ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_sweep_worker, jobs))
    else:
        rows = [_sweep_worker(j) for j in jobs]
    # aggregate per cell+mode over seeds
    cells: dict[tuple, list[float]] = {}
    for r in rows:
        cells.setdefault((r["n"], r["d"], r["iterations"], r["mode"]), []).append(r["final_loss"])
    for r in rows:
        losses = cells[(r["n"], r["d"], r["iterations"], r["mode"])]
        r["mean_loss"] = float(np.mean(losses))
        r["std_loss"] = float(np.std(losses))
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=["n", "d", "iterations", "mode", "seed", "final_loss", "mean_loss", "std_loss"],
        )
        writer.writeheader()
        for r in sorted(rows, key=lambda r: (r["n"], r["d"], r["iterations"], r["mode"], r["seed"])):
            writer.writerow({k: r[k] for k in writer.fieldnames})
    summary = {
        "rows": len(rows),
        "cells": [
            {"n": k[0], "d": k[1], "iterations": k[2], "mode": k[3],
             "mean_loss": float(np.mean(v)), "std_loss": float(np.std(v))}
            for k, v in sorted(cells.items())
        ],
    }
    return {"summary": _round_floats(summary), "metrics": []}


def _run_check_equivariance(cfg: dict, out_dir: Path) -> dict:
    from .equivariance import (
        classification_suite,
        multiset_continuity_probe,
        push_apart_fn,
        sorting_jacobian,
    )
    from .tasks import seed_stream

    task = cfg["task"]
    hidden = task.get("hidden", 16)
    n = task.get("n", 4)
    tol = task.get("tol", 1e-9)
    deltas = [float(v) for v in task.get("probe_deltas", [1e-3, 1e-2])]
    samples = task.get("probe_samples", 20)
    rng = seed_stream(cfg["seed"], "equivariance-cli")
    suite = classification_suite(hidden=hidden, n=n, rng=rng, tol=tol)
    verdicts = {name: v.to_json() for name, v in suite.items()}
    probes = {
        "sorting_jacobian": multiset_continuity_probe(
            sorting_jacobian, rng.normal(size=(3, 1)), deltas, samples, rng
        ),
        "push_apart_at_ties": multiset_continuity_probe(
            push_apart_fn, np.zeros((2, 1)), deltas, samples, rng
        ),
    }
    summary = {"verdicts": verdicts, "probes": {k: [[d, m] for d, m in v] for k, v in probes.items()},
               "note": "probes refute continuity only; 'no violation found' is not a proof"}
    return {"summary": _round_floats(summary), "metrics": []}


def _run_gradcheck(cfg: dict, out_dir: Path) -> dict:
    from .gradcheck import run_gradcheck

    task = cfg["task"]
    table = run_gradcheck(trials=task.get("trials", 20), tol=task.get("tol", 1e-4), seed=cfg["seed"])
    ok = all(row["passed"] for row in table)
    return {"summary": _round_floats({"all_passed": ok, "ops": table}), "metrics": [], "failed": not ok}


def _run_bench(cfg: dict, out_dir: Path) -> dict:
    from .bench import run_bench

    task = cfg["task"]
    report = run_bench(
        n=task.get("n", 8),
        d=task.get("d", 8),
        hidden=task.get("hidden", 64),
        batch=task.get("batch_size", 16),
        iteration_counts=[int(t) for t in task.get("iteration_counts", [1, 5, 20])],
        seed=cfg["seed"],
    )
    return {"summary": _round_floats(report["stable"]), "metrics": [], "timing": report["timing"]}


_RUNNERS = {
    "train-numbering": _run_train_numbering,
    "train-autoencode": _run_train_autoencode,
    "sweep-autoencode": _run_sweep,
    "check-equivariance": _run_check_equivariance,
    "gradcheck": _run_gradcheck,
    "bench": _run_bench,
}


def run(config_path, overrides=(), output_dir=None, threads=None) -> int:
    """Execute the command described by a JSON config file."""
    try:
        text = Path(config_path).read_text()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}", file=sys.stderr)
        return 2
    try:
        raw = apply_overrides(raw, list(overrides))
        cfg = validate_config(raw)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if threads is not None:
        cfg["threads"] = threads
    out_dir = Path(
        output_dir
        or cfg.get("output_dir")
        or os.environ.get("IDSPN_OUTPUT_DIR")
        or "runs"
    ) / cfg["command"]
    try:
        result = _RUNNERS[cfg["command"]](cfg, out_dir)
    except Exception as exc:  # runtime failure: keep partial outputs, exit 1
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "error.txt").write_text(f"{type(exc).__name__}: {exc}\n")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    _write_outputs(out_dir, result["summary"], result.get("metrics", []), cfg, cfg["seed"])
    if "timing" in result:
        (out_dir / "timing.json").write_text(json.dumps(result["timing"], sort_keys=True) + "\n")
    print(f"wrote {out_dir}/summary.json")
    return 1 if result.get("failed") else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="idspn", description=__doc__)
    parser.add_argument("config", help="path to a JSON run config")
    parser.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        help="override a config field by dotted path")
    parser.add_argument("--output-dir", default=None)
    parser.add_argument("--threads", type=int, default=None, help="worker process cap for sweeps")
    args = parser.parse_args(argv)
    return run(args.config, args.set, args.output_dir, args.threads)


if __name__ == "__main__":
    sys.exit(main())
