"""Line-oriented ``key = value`` experiment configs with ``[section]`` headers.

Sections: ``[model]``, ``[moe]``, ``[data]``, ``[run]`` and ``[stageI]`` ..
``[stageIV]``. ``#`` starts a comment. Unknown sections and keys are
rejected with the offending line number. A ``mix`` value is a comma-separated
list of ``task:weight`` pairs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .model import ModelConfig
from .moe import RouterConfig
from .training import STAGES, StageConfig


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + msg)


@dataclass
class DataConfig:
    n_test: int = 96        # test-split samples per evaluated task
    n_zeroshot: int = 48    # zero-shot grounding samples
    eval_batch: int = 32
    max_new_tokens: int = 8


@dataclass
class RunConfig:
    schedule: str = "full"  # "full" (I -> IV) or "joint" (stage IV recipe only)
    seed: int = 7
    dtype: str = "float32"


DEFAULT_STAGES = {
    "I": dict(mix={"caption": 1.0}, steps=200, lr=3e-3),
    "II": dict(mix={"complex-vqa": 0.6, "region-vqa": 0.4}, steps=1000, lr=2e-3),
    "III": dict(mix={"grounding": 1.0}, steps=800, lr=2e-3, anonymize=0.3),
    "IV": dict(mix={"complex-vqa": 0.35, "region-vqa": 0.25, "grounding": 0.4}, steps=600, lr=5e-4,
               anonymize=0.3),
}


@dataclass
class StageSpec:
    """Seed-free stage settings; :meth:`build` binds the run seed."""

    mix: dict
    steps: int
    lr: float
    batch_size: int = 16
    warmup: int = 10
    weight_decay: float = 0.0
    reg: float = 1.0
    bce: float = 2.0
    dice: float = 0.5
    anonymize: float = 0.0

    def build(self, stage: str, seed: int) -> StageConfig:
        return StageConfig(stage=stage, dataset_mix=dict(self.mix), steps=self.steps, lr=self.lr,
                           seed=seed, batch_size=self.batch_size, warmup=self.warmup,
                           weight_decay=self.weight_decay, anonymize=self.anonymize,
                           loss_weights=LossWeights(self.reg, self.bce, self.dice))


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    moe: RouterConfig = field(default_factory=RouterConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunConfig = field(default_factory=RunConfig)
    stages: dict = field(default_factory=lambda: {k: StageSpec(**v) for k, v in DEFAULT_STAGES.items()})

    def stage(self, name: str, seed: int | None = None) -> StageConfig:
        return self.stages[name].build(name, self.run.seed if seed is None else seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, seed=seed))


def _coerce(raw: str, typ, key: str, line: int, source: str):
    try:
        if typ is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if typ is dict:
            out = {}
            for part in raw.split(","):
                name, _, w = part.strip().partition(":")
                if not name or not w:
                    raise ValueError(part)
                out[name.strip()] = float(w)
            return out
        return typ(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}", line, source) from None


_TYPES = {int: int, float: float, str: str, bool: bool, dict: dict,
          "int": int, "float": float, "str": str, "bool": bool, "dict": dict}


def _fields(cls) -> dict:
    return {f.name: _TYPES[f.type] for f in dataclasses.fields(cls) if f.init}


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse config text; sections not mentioned keep their defaults."""
    sections: dict = {}
    seen_keys: set = set()
    current = None
    valid = {"model", "moe", "data", "run"} | {f"stage{s}" for s in STAGES}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", no, source)
            current = line[1:-1].strip()
            if current not in valid:
                raise ConfigError(f"unknown section [{current}]", no, source)
            sections.setdefault(current, {})
            continue
        if current is None:
            raise ConfigError("key outside of any section", no, source)
        key, eq, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not eq or not key:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", no, source)
        if (current, key) in seen_keys:
            raise ConfigError(f"duplicate key {key!r} in [{current}]", no, source)
        seen_keys.add((current, key))
        sections[current][key] = (value, no)

    cfg = ExperimentConfig()
    plain = {"model": ModelConfig, "moe": RouterConfig, "data": DataConfig, "run": RunConfig}
    for name, entries in sections.items():
        if name in plain:
            cls = plain[name]
            types = _fields(cls)
            kw = {}
            for key, (value, no) in entries.items():
                if key not in types:
                    raise ConfigError(f"unknown key {key!r} in [{name}]", no, source)
                kw[key] = _coerce(value, types[key], key, no, source)
            try:
                setattr(cfg, name, dataclasses.replace(getattr(cfg, name), **kw))
            except ValueError as e:
                line = min(no for _, no in entries.values()) if entries else None
                raise ConfigError(str(e), line, source) from None
        else:
            stage = name[len("stage"):]
            types = _fields(StageSpec)
            spec = cfg.stages[stage]
            kw = {}
            for key, (value, no) in entries.items():
                if key not in types:
                    raise ConfigError(f"unknown key {key!r} in [{name}]", no, source)
                kw[key] = _coerce(value, types[key], key, no, source)
            spec = dataclasses.replace(spec, **kw)
            try:
                spec.build(stage, 0)
            except ValueError as e:
                line = min(no for _, no in entries.values()) if entries else None
                raise ConfigError(str(e), line, source) from None
            cfg.stages[stage] = spec
    if cfg.run.dtype not in ("float32", "float64"):
        raise ConfigError(f"unsupported dtype {cfg.run.dtype!r}", sections["run"]["dtype"][1], source)
    if cfg.run.schedule not in ("full", "joint"):
        raise ConfigError(f"unknown schedule {cfg.run.schedule!r}", sections["run"]["schedule"][1], source)
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    return parse_config(p.read_text(), source=str(p))


def format_config(cfg: ExperimentConfig) -> str:
    """Render ``cfg`` in the file syntax; ``parse_config`` inverts it."""
    def val(v):
        if isinstance(v, dict):
            return ", ".join(f"{k}:{w:g}" for k, w in v.items())
        if isinstance(v, bool):
            return str(v).lower()
        return repr(v) if isinstance(v, float) else str(v)

    out = []
    for name in ("model", "moe", "data", "run"):
        out.append(f"[{name}]")
        out += [f"{k} = {val(v)}" for k, v in dataclasses.asdict(getattr(cfg, name)).items()]
        out.append("")
    for s in STAGES:
        out.append(f"[stage{s}]")
        out += [f"{k} = {val(v)}" for k, v in dataclasses.asdict(cfg.stages[s]).items()]
        out.append("")
    return "\n".join(out)
