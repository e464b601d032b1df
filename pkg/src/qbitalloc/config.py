"""Experiment configuration: a sectioned INI file with typed keys.

Every key has a default except ``dataset.source``. Unknown sections and keys
are rejected so that a typo fails loudly instead of silently using a default.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

from .trainer import AlternationConfig, TrainConfig


class ConfigParseError(ValueError):
    def __init__(self, message: str, section: Optional[str] = None, key: Optional[str] = None,
                 line: Optional[int] = None):
        where = ".".join(p for p in (section, key) if p)
        loc = []
        if where:
            loc.append(f"key {where!r}")
        if line is not None:
            loc.append(f"line {line}")
        super().__init__(f"{message}" + (f" ({', '.join(loc)})" if loc else ""))
        self.section, self.key, self.line = section, key, line


# -- value codecs ------------------------------------------------------------------
def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> Tuple[int, ...]:
    s = s.strip()
    return tuple(int(p) for p in s.split(",")) if s else ()


def _opt_str(s: str) -> Optional[str]:
    return s.strip() or None


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(str(int(v)) for v in value)
    return str(value)


# Each schema entry: key -> (parser, default)
Schema = Dict[str, Tuple[Callable[[str], Any], Any]]

DATASET_SCHEMA: Schema = {
    "source": (str, None),
    "classes": (int, 10),
    "dims": (int, 64),
    "image_shape": (_ints, (1, 8, 8)),
    "noise": (float, 0.4),
    "spread": (float, 1.0),
    "seed": (int, 3),
    "n_train": (int, 3000),
    "n_val": (int, 1000),
    "n_test": (int, 2000),
    "val_fraction": (float, 0.1),
    "train_images": (_opt_str, None),
    "train_labels": (_opt_str, None),
    "test_images": (_opt_str, None),
    "test_labels": (_opt_str, None),
    "train_file": (_opt_str, None),
    "test_file": (_opt_str, None),
}
MODEL_SCHEMA: Schema = {
    "family": (str, "cnn-small"),
    "input_shape": (_ints, (1, 8, 8)),
    "channels": (_ints, (8, 16, 16, 16)),
    "width": (int, 128),
    "depth": (int, 1),
    "blocks": (int, 3),
    "act_alpha": (float, 2.0),
    "batchnorm": (_bool, False),
}
QUANT_SCHEMA: Schema = {
    "static_bits": (int, 4),
    "beta1": (float, 0.7),
    "beta2": (float, 0.7),
    "rho1": (float, 0.5),
    "rho2": (float, 0.5),
    "lower": (float, 0.0),
    "upper": (float, 3.0),
    "unit_bytes": (float, 1e6),
}
RUN_SCHEMA: Schema = {
    "seed": (int, 0),
    "out": (str, "runs/default"),
}


def _dataclass_schema(cls) -> Schema:
    parsers = {int: int, float: float, bool: _bool, str: str,
               "int": int, "float": float, "bool": _bool, "str": str}
    return {f.name: (parsers[f.type], f.default) for f in dataclasses.fields(cls)}


TRAIN_SCHEMA = _dataclass_schema(TrainConfig)
ALTERNATE_SCHEMA = _dataclass_schema(AlternationConfig)

SECTIONS: Dict[str, Schema] = {
    "dataset": DATASET_SCHEMA, "model": MODEL_SCHEMA, "quant": QUANT_SCHEMA,
    "train": TRAIN_SCHEMA, "alternate": ALTERNATE_SCHEMA, "run": RUN_SCHEMA,
}
REQUIRED = {("dataset", "source")}


@dataclass
class ExperimentConfig:
    dataset: Dict[str, Any]
    model: Dict[str, Any] = field(default_factory=lambda: _defaults(MODEL_SCHEMA))
    quant: Dict[str, Any] = field(default_factory=lambda: _defaults(QUANT_SCHEMA))
    train: TrainConfig = field(default_factory=TrainConfig)
    alternate: AlternationConfig = field(default_factory=AlternationConfig)
    seed: int = 0
    out: str = "runs/default"

    @property
    def arch(self) -> Dict[str, Any]:
        arch = dict(self.model)
        arch["input_shape"] = list(arch["input_shape"])
        arch["channels"] = list(arch["channels"])
        arch["classes"] = self.dataset["classes"]
        return arch

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=int(seed),
                                   train=dataclasses.replace(self.train, seed=int(seed)))

    def sections(self) -> Dict[str, Dict[str, Any]]:
        return {"dataset": dict(self.dataset), "model": dict(self.model),
                "quant": dict(self.quant), "train": dataclasses.asdict(self.train),
                "alternate": dataclasses.asdict(self.alternate),
                "run": {"seed": self.seed, "out": self.out}}


def _defaults(schema: Schema) -> Dict[str, Any]:
    return {k: d for k, (_, d) in schema.items()}


def _key_lines(text: str) -> Dict[Tuple[str, str], int]:
    """Line number of each (section, key) for error messages."""
    lines: Dict[Tuple[str, str], int] = {}
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
        elif section and s and s[0] not in "#;" and ("=" in s or ":" in s):
            key = s.replace(":", "=", 1).split("=", 1)[0].strip().lower()
            lines.setdefault((section, key), no)
    return lines


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        section = getattr(exc, "section", None)
        key = getattr(exc, "option", None)
        raise ConfigParseError(str(exc).splitlines()[0], section, key, line) from None
    lines = _key_lines(text)
    values: Dict[str, Dict[str, Any]] = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigParseError(f"unknown section [{section}]", section,
                                   line=_section_line(text, section))
    if not cp.has_section("dataset"):
        raise ConfigParseError("missing required key 'dataset'", "dataset")
    for section, schema in SECTIONS.items():
        out = _defaults(schema)
        if cp.has_section(section):
            for key, raw in cp.items(section):
                if key not in schema:
                    raise ConfigParseError("unknown key", section, key, lines.get((section, key)))
                parser = schema[key][0]
                try:
                    out[key] = parser(raw)
                except ValueError as exc:
                    raise ConfigParseError(f"bad value {raw!r}: {exc}", section, key,
                                           lines.get((section, key))) from None
        for sec, key in REQUIRED:
            if sec == section and out[key] is None:
                raise ConfigParseError(f"missing required key '{sec}.{key}'", sec, key)
        values[section] = out
    try:
        return ExperimentConfig(dataset=values["dataset"], model=values["model"],
                                quant=values["quant"], train=TrainConfig(**values["train"]),
                                alternate=AlternationConfig(**values["alternate"]),
                                seed=values["run"]["seed"], out=values["run"]["out"])
    except ValueError as exc:
        raise ConfigParseError(str(exc)) from None


def _section_line(text: str, section: str) -> Optional[int]:
    for no, raw in enumerate(text.splitlines(), start=1):
        if raw.strip() == f"[{section}]":
            return no
    return None


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical text form: every section and key, in schema order."""
    parts: List[str] = []
    for section, vals in cfg.sections().items():
        parts.append(f"[{section}]")
        for key in SECTIONS[section]:
            parts.append(f"{key} = {_fmt(vals[key])}")
        parts.append("")
    return "\n".join(parts)
