"""Command-line front end: pretrain, alternate, eval and report."""
from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .bitalloc import ConstraintSet, model_size_mb
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigParseError, ExperimentConfig, load_config, parse_config, serialize_config
from .metrics import MetricsFormatError, MetricsWriter, read_metrics, summarize, write_series
from .network import ConfigError, Model, build_model
from .superbatch import (DataConfigError, Dataset, FormatError, SuperBatch, load_dataset,
                         synthetic_gaussian)
from .trainer import AlternatingRun, GlobalBest, evaluate, pretrain

SPLITS = ("train", "val", "test")
PRETRAIN_CKPT = "pretrain.gfb"
STATE_CKPT = "state.gfb"
FINAL_CKPT = "final.gfb"
BEST_CKPT = "best.gfb"
LOCK_NAME = ".lock"


class CliError(RuntimeError):
    pass


# -- data ---------------------------------------------------------------------------
def load_split(cfg: ExperimentConfig, split: str) -> Dataset:
    """One split of the configured dataset.

    Synthetic data draws each split independently. File-backed sources carve
    the validation split off the tail of the training file.
    """
    if split not in SPLITS:
        raise CliError(f"unknown split {split!r}; expected one of {SPLITS}")
    ds = cfg.dataset
    if ds["source"] == "synthetic-gaussian":
        shape = tuple(ds["image_shape"]) or None
        return synthetic_gaussian(int(ds[f"n_{split}"]), ds["dims"], ds["classes"], ds["seed"],
                                  ds["noise"], shape, split, ds["spread"])
    if split == "test":
        return load_dataset(ds, "test")
    full = load_dataset(ds, "train")
    n_val = int(round(len(full) * ds["val_fraction"]))
    if n_val < 1 or n_val >= len(full):
        raise CliError(f"val_fraction {ds['val_fraction']} leaves an empty split")
    cut = len(full) - n_val
    idx = np.arange(cut) if split == "train" else np.arange(cut, len(full))
    return full.subset(idx, split)


def constraints_for(cfg: ExperimentConfig, model: Model) -> ConstraintSet:
    q = cfg.quant
    return ConstraintSet.for_model(model, q["static_bits"], beta1=q["beta1"], beta2=q["beta2"],
                                   rho1=q["rho1"], rho2=q["rho2"], unit_bytes=q["unit_bytes"])


# -- checkpoint helpers ----------------------------------------------------------------
def _tensors(model: Model, v, best: Optional[GlobalBest] = None) -> Dict[str, np.ndarray]:
    out = {f"model/{k}": a for k, a in model.state_dict().items()}
    out["v"] = np.asarray(v, dtype=np.float64)
    if best is not None:
        out.update({f"best/{k}": a for k, a in best.weights.items()})
        out["best_v"] = np.asarray(best.v, dtype=np.float64)
    return out


def _split_prefix(tensors: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    n = len(prefix)
    return {k[n:]: a for k, a in tensors.items() if k.startswith(prefix)}


def _meta(kind: str, cfg: ExperimentConfig, model: Model, **extra) -> dict:
    r_w, r_x = model.bit_allocation()
    return {"kind": kind, "config": serialize_config(cfg), "r_w": r_w, "r_x": r_x, **extra}


def restore_model(tensors, meta) -> Tuple[ExperimentConfig, Model]:
    cfg = parse_config(meta["config"])
    model = build_model(cfg.arch, seed=cfg.seed)
    model.load_state_dict(_split_prefix(tensors, "model/"))
    model.set_bit_allocation(meta["r_w"], meta["r_x"])
    return cfg, model


@contextmanager
def output_lock(out: Path):
    """Exclusive use of an output directory; a stale lock from a dead process is taken over."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        pid = lock.read_text().strip()
        if pid.isdigit() and _alive(int(pid)):
            raise CliError(f"output directory {out} is in use by process {pid}") from None
        lock.unlink()
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def _resolve(args) -> Tuple[ExperimentConfig, Path]:
    if args.config is None:
        raise CliError("--config is required")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = Path(args.out if args.out is not None else cfg.out)
    return cfg, out


# -- subcommands -----------------------------------------------------------------------
def run_pretrain(cfg: ExperimentConfig, out: Path, metrics: Optional[MetricsWriter] = None) -> Model:
    train = load_split(cfg, "train")
    model = build_model(cfg.arch, seed=cfg.seed)
    pretrain(model, train, cfg.quant["static_bits"], cfg.train, metrics=metrics)
    save_checkpoint(out / PRETRAIN_CKPT, _tensors(model, constraints_for(cfg, model).v_static),
                    _meta("pretrain", cfg, model))
    return model


def cmd_pretrain(args) -> int:
    cfg, out = _resolve(args)
    with output_lock(out):
        metrics = MetricsWriter(out / "pretrain_metrics.csv", cfg.sections())
        run_pretrain(cfg, out, metrics)
    print(f"wrote {out / PRETRAIN_CKPT}")
    return 0


def _build_run(cfg: ExperimentConfig, model: Model, metrics, out: Path) -> AlternatingRun:
    train, val = load_split(cfg, "train"), load_split(cfg, "val")
    a = cfg.alternate
    cons = constraints_for(cfg, model)
    sb = SuperBatch(train, a.sb_minibatches, a.sb_batch_size, a.sb_policy, seed=cfg.seed * 31 + 1)
    val_sb = SuperBatch(val, a.val_minibatches, min(a.val_batch_size, len(val)), "NR",
                        seed=cfg.seed * 31 + 2)

    def persist(r: AlternatingRun) -> None:
        state = r.get_state()
        v = state.pop("v")
        state.pop("best_v")  # stored as a tensor
        state.pop("superbatch")
        meta = _meta("state", cfg, r.model, run=state, superbatch=r.superbatch.get_state(),
                     metrics_seq=metrics.seq)
        save_checkpoint(out / STATE_CKPT, _tensors(r.model, v, r.best), meta)

    return AlternatingRun(model, train, cons, cfg.train, a, sb, val_sb, cfg.seed, cons.v_static,
                          metrics, on_phase=persist)


def cmd_alternate(args) -> int:
    if args.resume is not None:
        tensors, meta = load_checkpoint(args.resume)
        if meta.get("kind") != "state":
            raise CliError(f"{args.resume} is a {meta.get('kind')} checkpoint, not a run state")
        cfg = parse_config(meta["config"])
        if args.config is not None and serialize_config(_resolve(args)[0]) != meta["config"]:
            raise CliError("--config differs from the configuration stored in the checkpoint")
        out = Path(args.out if args.out is not None else Path(args.resume).parent)
    else:
        cfg, out = _resolve(args)
    with output_lock(out):
        metrics_path = out / "alternate_metrics.csv"
        if args.resume is not None:
            metrics = MetricsWriter(metrics_path, resume_seq=int(meta["metrics_seq"]),
                                    time_offset=_last_wall_time(metrics_path))
            _, model = restore_model(tensors, meta)
            run = _build_run(cfg, model, metrics, out)
            state = dict(meta["run"])
            state.update(v=tensors["v"], best_v=tensors.get("best_v"),
                         superbatch=meta["superbatch"])
            run.set_state(state, _split_prefix(tensors, "best/"))
        else:
            metrics = MetricsWriter(metrics_path, cfg.sections())
            if (out / PRETRAIN_CKPT).exists():
                _, model = restore_model(*load_checkpoint(out / PRETRAIN_CKPT))
            else:
                model = run_pretrain(cfg, out, metrics)
            run = _build_run(cfg, model, metrics, out)
        run.run(max_phases=args.max_phases)
        if not run.done:
            print(f"stopped after {args.max_phases} phases; resume from {out / STATE_CKPT}")
            return 0
        last = run.history[-1]
        save_checkpoint(out / FINAL_CKPT, _tensors(run.model, run.v),
                        _meta("final", cfg, run.model, objective=last["val_objective"]))
        model, v, report = run.finalize()
        save_checkpoint(out / BEST_CKPT, _tensors(model, v),
                        _meta("best", cfg, model, objective=report["best_objective"]))
        report.pop("history")
        (out / "alternate_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    print(json.dumps({k: report[k] for k in ("best_objective", "r_w", "r_x", "h1", "h2", "C1",
                                             "C2", "penalty")}, sort_keys=True))
    return 0


def _last_wall_time(path: Path) -> float:
    try:
        _, rows = read_metrics(path)
    except (OSError, MetricsFormatError):
        return 0.0
    return rows[-1]["wall_time"] if rows else 0.0


def eval_report(cfg: ExperimentConfig, model: Model, data: Dataset) -> dict:
    loss, acc = evaluate(model, data)
    counts = model.param_counts()
    r_w, r_x = model.bit_allocation()
    searchable_bits = np.log2(np.asarray(r_w, dtype=np.float64))
    unit = cfg.quant["unit_bytes"]
    size = model_size_mb(searchable_bits, counts, unit)
    table = []
    for layer, (i, n, pinned) in zip(model.param_layers, counts):
        table.append({"layer": i, "kind": layer.spec().kind, "pinned": pinned,
                      "weight_bits": layer.wbits, "act_bits": layer.xbits, "weights": n})
    return {"split": data.split, "samples": len(data), "loss": loss, "accuracy": acc,
            "size": size, "size_bytes": size * unit, "unit_bytes": unit, "layers": table}


def cmd_eval(args) -> int:
    tensors, meta = load_checkpoint(args.checkpoint)
    cfg, model = restore_model(tensors, meta)
    report = eval_report(cfg, model, load_split(cfg, args.split))
    print(f"{report['split']}: accuracy {report['accuracy']:.4f}  loss {report['loss']:.4f}  "
          f"size {report['size']:.6g} x {report['unit_bytes']:g} bytes")
    print(f"{'layer':>5} {'kind':<6} {'pinned':<6} {'w_bits':>6} {'x_bits':>6} {'weights':>8}")
    for row in report["layers"]:
        print(f"{row['layer']:>5} {row['kind']:<6} {str(row['pinned']):<6} "
              f"{row['weight_bits']:>6} {row['act_bits']:>6} {row['weights']:>8}")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval_{args.split}.json").write_text(json.dumps(report, indent=2))
    return 0


def cmd_report(args) -> int:
    config, rows = read_metrics(args.metrics)
    summary = summarize(config, rows)
    out = Path(args.out) if args.out is not None else Path(args.metrics).parent
    out.mkdir(parents=True, exist_ok=True)
    write_series(rows, out / "series.csv")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, sort_keys=True))
    return 0


# -- entry point -------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qbitalloc",
                                description="Mixed-precision bit allocation with CMA-ES.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config file (INI)")
        sp.add_argument("--seed", type=int, help="override the run seed")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("pretrain", help="static-precision quantization-aware pretraining")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)
    sp = sub.add_parser("alternate", help="alternating bit search and retraining")
    common(sp)
    sp.add_argument("--resume", help="run-state checkpoint to continue from")
    sp.add_argument("--max-phases", type=int, help="stop after this many search/retrain phases")
    sp.set_defaults(func=cmd_alternate)
    sp = sub.add_parser("eval", help="accuracy, size and bit table of a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", help="directory for the JSON report")
    sp.set_defaults(func=cmd_eval)
    sp = sub.add_parser("report", help="per-round summary and plot-ready series")
    sp.add_argument("metrics")
    sp.add_argument("--out", help="output directory (default: next to the metrics file)")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigParseError, ConfigError, CheckpointError, MetricsFormatError,
            FormatError, DataConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
