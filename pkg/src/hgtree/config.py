"""Run configuration: INI-style file, then environment, then command-line overrides.

Sections are ``[paths]``, ``[model]``, ``[train]``, ``[sampler]`` and ``[eval]``;
keys are the dataclass field names.  An environment variable
``HGTREE_<SECTION>_<KEY>`` (upper case) overrides the file, and
``--set section.key=value`` on the command line overrides both.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import UsageError
from .generation import SamplerConfig
from .model import ModelConfig
from .training import TrainConfig

ENV_PREFIX = "HGTREE_"


@dataclass
class PathsConfig:
    corpus: str = "data/corpus.jsonl"
    quantizer: str = "data/quantizer.txt"
    checkpoint: str = "runs/model.bin"
    out_dir: str = "runs"


@dataclass
class EvalConfig:
    n_points: int = 512
    jsd_grid: int = 32
    connect_eps: float | None = None  # None: max coordinate bin width * sqrt(3) + 1e-6
    novelty_delta: float | None = None  # None: 1st percentile of train-to-train nearest Chamfer
    seed: int = 0


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(variant="HG2RL"))
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = ("paths", "model", "train", "sampler", "eval")

    def to_dict(self) -> dict:
        return {s: dataclasses.asdict(getattr(self, s)) for s in self.SECTIONS}

    def to_ini(self) -> str:
        lines = []
        for s, d in self.to_dict().items():
            lines.append(f"[{s}]")
            lines += [f"{k} = {'' if v is None else _fmt(v)}" for k, v in d.items()]
            lines.append("")
        return "\n".join(lines)

    def check_paths(self, *names: str) -> None:
        """Every named input path must exist."""
        for n in names:
            p = getattr(self.paths, n)
            if not Path(p).exists():
                raise UsageError(f"paths.{n}: file not found: {p}")


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def _field_types(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _coerce(section: str, key: str, raw: str, typ):
    name = f"{section}.{key}"
    raw = raw.strip()
    args = typing.get_args(typ)
    optional = type(None) in args
    if optional:
        if raw == "" or raw.lower() == "none":
            return None
        typ = next(a for a in args if a is not type(None))
        args = typing.get_args(typ)
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if origin is tuple:
            inner = args[0] if args else int
            return tuple(inner(x) for x in raw.split(",") if x.strip())
        if typ is str:
            return raw
    except ValueError:
        raise UsageError(f"{name}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    return raw


_SECTION_TYPES = {"paths": PathsConfig, "model": ModelConfig, "train": TrainConfig,
                  "sampler": SamplerConfig, "eval": EvalConfig}


def _apply(raw: dict, section: str, key: str, value: str) -> None:
    if section not in _SECTION_TYPES:
        raise UsageError(f"unknown config section [{section}]")
    types = _field_types(_SECTION_TYPES[section])
    if key not in types:
        raise UsageError(f"{section}.{key}: unknown field")
    raw.setdefault(section, {})[key] = _coerce(section, key, value, types[key])


def _build(raw: dict) -> RunConfig:
    """Construct every section from its explicit values; contradictions become usage errors."""
    parts = {}
    for section, cls in _SECTION_TYPES.items():
        kw = dict(raw.get(section, {}))
        if section == "model":
            kw.setdefault("variant", "HG2RL")
        try:
            parts[section] = cls(**kw)
        except (ValueError, TypeError) as e:
            raise UsageError(f"[{section}] config contradiction: {e}") from e
    return RunConfig(**parts)


def load_config(path=None, overrides=(), environ=None) -> RunConfig:
    """Defaults <- ``path`` (if given) <- environment <- ``overrides`` (``section.key=value``)."""
    raw: dict[str, dict] = {}
    if path is not None:
        if not Path(path).exists():
            raise UsageError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.read(path)
        for section in parser.sections():
            for key, value in parser.items(section):
                _apply(raw, section, key, value)
    environ = os.environ if environ is None else environ
    for name, value in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        section, _, key = name[len(ENV_PREFIX):].lower().partition("_")
        if section in _SECTION_TYPES and key:
            _apply(raw, section, key, value)
    for item in overrides:
        lhs, sep, value = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise UsageError(f"override {item!r} must look like section.key=value")
        _apply(raw, section, key, value)
    return _build(raw)
