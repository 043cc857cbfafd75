"""Run configuration for the command-line pipeline.

A :class:`RunConfig` is plain JSON on disk.  Every stage seed (data, split,
init, shuffling, pruning) is derived from the single top-level ``seed``;
nested ``seed`` keys are rejected.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import PurePath
from typing import Any, Optional

from .netlib import ARCHITECTURES
from .pruning import PruneConfig
from .synthdata import DatasetSpec
from .training import KDConfig, TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class ArchConfig:
    teacher: str = "mini_teacher"
    student: str = "student_plain"
    embedding_dim: int = 64

    def __post_init__(self):
        for role in ("teacher", "student"):
            if getattr(self, role) not in ARCHITECTURES:
                raise ValueError(f"{role}: unknown architecture {getattr(self, role)!r}; choose from {sorted(ARCHITECTURES)}")
        if self.embedding_dim < 1:
            raise ValueError(f"embedding_dim must be >= 1, got {self.embedding_dim}")


@dataclass
class FineTuneConfig:
    """Optimizer used for masked fine-tuning; epochs come from ``prune.fine_tune_epochs``."""

    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 32

    def __post_init__(self):
        self.to_train_config(0, 1)

    def to_train_config(self, seed: int, epochs: int) -> TrainConfig:
        return TrainConfig(self.optimizer, self.lr, self.momentum, epochs, self.batch_size, 0, seed)


@dataclass
class EvalConfig:
    fmr_targets: tuple[float, ...] = (0.01, 0.1)
    train_fraction: float = 50 / 70
    models: tuple[str, ...] = ()  # empty: every model file in the workspace

    def __post_init__(self):
        self.fmr_targets = tuple(float(t) for t in self.fmr_targets)
        self.models = tuple(self.models)
        if not self.fmr_targets or not all(0 <= t <= 1 for t in self.fmr_targets):
            raise ValueError(f"fmr_targets must be a nonempty list in [0, 1], got {list(self.fmr_targets)}")
        if not 0 < self.train_fraction < 1:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


@dataclass
class BenchConfig:
    warmup: int = 5
    reps: int = 30
    batch_size: int = 1

    def __post_init__(self):
        if self.reps < 3:
            raise ValueError(f"reps must be >= 3, got {self.reps}")
        if self.warmup < 0 or self.batch_size < 1:
            raise ValueError("warmup must be >= 0 and batch_size >= 1")


@dataclass
class PathsConfig:
    workspace: str = "workspace"
    prune_storage: str = "sparse"

    def __post_init__(self):
        if self.prune_storage not in ("dense", "sparse"):
            raise ValueError(f"prune_storage must be 'dense' or 'sparse', got {self.prune_storage!r}")
        if not self.workspace:
            raise ValueError("workspace must be a nonempty path")


def _teacher_defaults() -> TrainConfig:
    return TrainConfig(optimizer="adam", lr=3e-3, epochs=15, batch_size=32, patience=4)


def _kd_defaults() -> KDConfig:
    return KDConfig(optimizer="adam", lr=3e-3, epochs=40, patience=6)


@dataclass
class RunConfig:
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=_teacher_defaults)
    finetune: FineTuneConfig = field(default_factory=FineTuneConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    kd: KDConfig = field(default_factory=_kd_defaults)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        for section in (self.dataset, self.train, self.prune, self.kd):
            section.seed = self.seed

    # -------------------------------------------------------------- serialise
    def to_dict(self) -> dict:
        out: dict[str, Any] = {"seed": self.seed}
        for f in dataclasses.fields(self):
            if f.name == "seed":
                continue
            out[f.name] = _section_dict(getattr(self, f.name))
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, ensure_ascii=False) + "\n"

    def digest(self) -> str:
        """sha256 of the settings that affect results; the workspace location is left out."""
        d = self.to_dict()
        del d["paths"]["workspace"]
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        sections = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(sections))
        if unknown:
            raise ConfigError(f"unknown config field {unknown[0]!r}; top-level fields are {sorted(sections)}")
        seed = _coerce(d.get("seed", 0), int, "seed")
        kwargs: dict[str, Any] = {"seed": seed}
        defaults = cls()
        for name, f in sections.items():
            if name == "seed" or name not in d:
                continue
            kwargs[name] = _build_section(type(getattr(defaults, name)), getattr(defaults, name), d[name], name)
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, enum.Enum):
        return value.value
    return value


def _section_dict(section) -> dict:
    d = section.to_dict() if hasattr(section, "to_dict") else dataclasses.asdict(section)
    d.pop("seed", None)
    return _jsonable(d)


def _build_section(cls, default, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object, got {type(raw).__name__}")
    if "seed" in raw:
        raise ConfigError(f"{path}.seed: stage seeds are derived from the top-level 'seed'")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.name != "seed"}
    aliases = {"lambda": "lam"} if cls is KDConfig else {}
    values = _section_dict(default)
    values = {aliases.get(k, k): v for k, v in values.items()}
    for key, value in raw.items():
        name = aliases.get(key, key)
        if name not in known:
            raise ConfigError(f"unknown config field '{path}.{key}'")
        values[name] = _coerce(value, hints[name], f"{path}.{key}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        item = args[0] if args else Any
        return tuple(_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value))
    if hint is Any:
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str or (isinstance(hint, type) and issubclass(hint, str)):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def apply_override(d: dict, assignment: str) -> dict:
    """Apply one ``dotted.key=value`` override to a config dict (value parsed as JSON if possible)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form dotted.key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"override key {key!r} is malformed")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a section")
    node[parts[-1]] = value
    return d


def load_config(path: Optional[str] = None, overrides=(), env_seed: Optional[str] = None, workspace: Optional[str] = None) -> RunConfig:
    """defaults < config file < SHRINKNET_SEED < --set overrides < --workspace."""
    d: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
    if env_seed is not None:
        try:
            d["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"seed: SHRINKNET_SEED must be an integer, got {env_seed!r}") from exc
    for assignment in overrides:
        apply_override(d, assignment)
    if workspace is not None:
        d.setdefault("paths", {})["workspace"] = workspace
    cfg = RunConfig.from_dict(d)
    ws = PurePath(cfg.paths.workspace)
    if ".." in ws.parts:
        raise ConfigError(f"paths.workspace must not contain '..': {cfg.paths.workspace}")
    return cfg
