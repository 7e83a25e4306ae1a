"""Run configuration: one YAML file, full defaulting, strict keys.

Layout (every key optional)::

    seed: 0
    model:       {d_model: 32, n_heads: 4, ...}          # ModelConfig
    curriculum:  {stage1_steps: 5000, ...}               # CurriculumConfig
    corpus:      {vocab_size: 16, noise_sigma: 0.1, ...} # CorpusSpec
    objectives:  {weights: {mm_mse: 1.0, ...}, text_mask: {...}, speech_mask: {...}, ...}
    eval:        {probe_every: 25, probe_items: 32}
    paths:       {corpus: null, out: runs/default}

Environment variables ``MAESTRO_<SECTION>__<KEY>[__<SUBKEY>]`` override file
values; the value is parsed as YAML (so ``MAESTRO_OBJECTIVES__WEIGHTS__MM_MSE=0``
works). Unknown keys anywhere are errors.
"""
from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .corpus import CorpusSpec
from .encoders import ModelConfig
from .objectives import MaskSpec, ObjectiveConfig
from .training import CurriculumConfig

ENV_PREFIX = "MAESTRO_"


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    probe_every: int = 25  # held-out modality-matching probe cadence once paired data is active; 0 disables
    probe_items: int = 32


@dataclass
class PathConfig:
    corpus: str | None = None  # manifest or directory; None generates in memory from the corpus section
    out: str = "runs/default"


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    objectives: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


_NESTED = {
    ("objectives", "text_mask"): MaskSpec,
    ("objectives", "speech_mask"): MaskSpec,
}
_SECTIONS = {
    "model": ModelConfig,
    "curriculum": CurriculumConfig,
    "corpus": CorpusSpec,
    "objectives": ObjectiveConfig,
    "eval": EvalConfig,
    "paths": PathConfig,
}


def _default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    return None


def _build(cls, values: dict, where: str, nested: dict | None = None):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(values).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = dict(values)
    # YAML 1.1 reads "1e-3" as a string; coerce where the default is a float
    for f in dataclasses.fields(cls):
        if isinstance(kwargs.get(f.name), str) and isinstance(_default(f), float):
            try:
                kwargs[f.name] = float(kwargs[f.name])
            except ValueError as exc:
                raise ConfigError(f"{where}.{f.name}: expected a number, got {kwargs[f.name]!r}") from exc
    for key, sub in (nested or {}).items():
        if key in kwargs:
            kwargs[key] = _build(sub, kwargs[key], f"{where}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    unknown = sorted(set(raw) - {"seed", *_SECTIONS})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    kwargs = {}
    if "seed" in raw:
        kwargs["seed"] = int(raw["seed"])
    for name, cls in _SECTIONS.items():
        if name in raw and raw[name] is not None:
            nested = {k[1]: v for k, v in _NESTED.items() if k[0] == name}
            kwargs[name] = _build(cls, raw[name], name, nested)
    return RunConfig(**kwargs)


def apply_env(raw: dict, environ=None) -> dict:
    """Overlay ``MAESTRO_*`` variables onto a raw config mapping."""
    environ = os.environ if environ is None else environ
    out = copy.deepcopy(raw)
    for var in sorted(environ):
        if not var.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in var[len(ENV_PREFIX):].split("__")]
        if not all(path):
            raise ConfigError(f"malformed override variable {var}")
        node = out
        for key in path[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{var}: {key} is not a section")
        node[path[-1]] = yaml.safe_load(environ[var])
    return out


def load_config(path=None, environ=None, overrides: dict | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        raw = yaml.safe_load(text) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    raw = apply_env(raw, environ)
    for dotted, value in (overrides or {}).items():
        node = raw
        *head, last = dotted.split(".")
        for key in head:
            node = node.setdefault(key, {})
        node[last] = value
    return from_dict(raw)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def echo_config(cfg: RunConfig, out_dir) -> Path:
    """Write the effective configuration next to a run's outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.yaml"
    path.write_text(dump_config(cfg), encoding="utf-8")
    return path
