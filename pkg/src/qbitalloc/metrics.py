"""Append-only CSV metrics and the plot-ready report built from them."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

COLUMNS = ("seq", "phase", "round", "index", "objective", "loss", "accuracy", "h1", "h2",
           "sigma", "wall_time")
PHASES = ("pretrain", "gf-step", "gb-epoch", "eval")
CONFIG_PREFIX = "# config "
_INT_COLUMNS = ("seq", "round", "index")
_FLOAT_COLUMNS = ("objective", "loss", "accuracy", "h1", "h2", "sigma", "wall_time")


class MetricsFormatError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _num(x: Any) -> str:
    if x is None:
        return "nan"
    x = float(x)
    return repr(x) if math.isfinite(x) else "nan"


class MetricsWriter:
    """CSV writer with one optional config comment line and one header.

    The instance is callable with the keyword fields of a row, which is the
    ``metrics`` hook the trainer expects.
    """

    def __init__(self, path, config: Optional[Dict[str, Any]] = None, resume_seq: Optional[int] = None,
                 clock=time.perf_counter, time_offset: float = 0.0):
        self.path = Path(path)
        self.clock = clock
        self._t0 = clock() - time_offset
        if resume_seq is None:
            with open(self.path, "w", newline="", encoding="utf-8") as fh:
                if config is not None:
                    fh.write(CONFIG_PREFIX + json.dumps(config, sort_keys=True) + "\n")
                csv.writer(fh).writerow(COLUMNS)
            self.seq = 0
        else:
            self._truncate(resume_seq)
            self.seq = resume_seq

    def _truncate(self, keep: int) -> None:
        """Drop rows logged after the checkpoint being resumed from."""
        lines = self.path.read_text(encoding="utf-8").splitlines(keepends=True)
        kept, rows = [], 0
        for line in lines:
            if line.startswith("#") or line.startswith("seq,"):
                kept.append(line)
            elif rows < keep:
                kept.append(line)
                rows += 1
        if rows != keep:
            raise MetricsFormatError(f"metrics file has {rows} rows, checkpoint expects {keep}",
                                     len(lines))
        self.path.write_text("".join(kept), encoding="utf-8")

    @property
    def elapsed(self) -> float:
        return self.clock() - self._t0

    def __call__(self, phase: str, round: int = 0, index: int = 0, **fields) -> None:
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        unknown = set(fields) - set(COLUMNS)
        if unknown:
            raise ValueError(f"unknown metrics fields {sorted(unknown)}")
        row = [str(self.seq), phase, str(int(round)), str(int(index))]
        row += [_num(fields.get(c)) for c in COLUMNS[4:-1]]
        row.append(_num(self.elapsed))
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow(row)
        self.seq += 1


def read_metrics(path) -> tuple:
    """Parse and validate a metrics file; return (config or None, rows)."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    config = None
    start = 0
    if lines and lines[0].startswith(CONFIG_PREFIX):
        try:
            config = json.loads(lines[0][len(CONFIG_PREFIX):])
        except json.JSONDecodeError as exc:
            raise MetricsFormatError(f"bad config comment: {exc}", 1) from None
        start = 1
    if len(lines) <= start:
        raise MetricsFormatError("missing header", start + 1)
    rows: List[Dict[str, Any]] = []
    reader = csv.reader(io.StringIO("\n".join(lines[start:])))
    header = next(reader)
    if tuple(header) != COLUMNS:
        raise MetricsFormatError(f"unexpected header {header}", start + 1)
    last_seq, last_round = -1, 0
    for offset, rec in enumerate(reader):
        line = start + 2 + offset
        if len(rec) != len(COLUMNS):
            raise MetricsFormatError(f"expected {len(COLUMNS)} fields, got {len(rec)}", line)
        row: Dict[str, Any] = dict(zip(COLUMNS, rec))
        if row["phase"] not in PHASES:
            raise MetricsFormatError(f"unknown phase {row['phase']!r}", line)
        try:
            for c in _INT_COLUMNS:
                row[c] = int(row[c])
            for c in _FLOAT_COLUMNS:
                row[c] = float(row[c])
        except ValueError as exc:
            raise MetricsFormatError(str(exc), line) from None
        if any(math.isinf(row[c]) for c in _FLOAT_COLUMNS):
            raise MetricsFormatError("numeric fields must be finite or nan", line)
        if row["seq"] != last_seq + 1:
            raise MetricsFormatError(f"row out of order: seq {row['seq']} after {last_seq}", line)
        if row["phase"] != "pretrain" and row["round"] < last_round:
            raise MetricsFormatError(f"row out of order: round {row['round']} after {last_round}",
                                     line)
        last_seq = row["seq"]
        if row["phase"] != "pretrain":
            last_round = row["round"]
        rows.append(row)
    return config, rows


def summarize(config: Optional[Dict[str, Any]], rows: List[Dict[str, Any]]) -> Dict[str, Any]:
    """Per-round summaries of an alternating run plus the pretraining tail."""
    rounds: Dict[int, Dict[str, Any]] = {}
    pretrain = [r for r in rows if r["phase"] == "pretrain"]
    for r in rows:
        if r["phase"] == "pretrain":
            continue
        if r["phase"] == "eval" and r["index"] == 0:
            continue  # validation of the starting point, before any session
        s = rounds.setdefault(r["round"], {"round": r["round"], "gf_steps": 0, "gb_epochs": 0,
                                           "gf_best_objective": math.nan,
                                           "gb_final_loss": math.nan,
                                           "gb_final_accuracy": math.nan,
                                           "val_objective": math.nan, "h1": math.nan,
                                           "h2": math.nan})
        if r["phase"] == "gf-step":
            s["gf_steps"] += 1
            s["gf_best_objective"] = r["objective"]
        elif r["phase"] == "gb-epoch":
            s["gb_epochs"] += 1
            s["gb_final_loss"], s["gb_final_accuracy"] = r["loss"], r["accuracy"]
        else:
            s["val_objective"], s["h1"], s["h2"] = r["objective"], r["h1"], r["h2"]
    configured = None
    if config is not None:
        configured = config.get("alternate", {}).get("rounds")
    return {"rounds_configured": configured,
            "pretrain_epochs": max(len(pretrain) - 1, 0),
            "pretrain_final_accuracy": pretrain[-1]["accuracy"] if pretrain else None,
            "rounds": [rounds[k] for k in sorted(rounds)]}


def write_series(rows: List[Dict[str, Any]], path) -> None:
    """Phase-annotated series: one line per row with the span kind for shading."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("seq", "phase", "span", "round", "index", "objective", "loss", "accuracy"))
        for r in rows:
            span = "gradient-free" if r["phase"] == "gf-step" else (
                "gradient-based" if r["phase"] in ("gb-epoch", "pretrain") else "eval")
            w.writerow((r["seq"], r["phase"], span, r["round"], r["index"], _num(r["objective"]),
                        _num(r["loss"]), _num(r["accuracy"])))
