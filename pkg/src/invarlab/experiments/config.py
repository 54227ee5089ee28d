"""Declarative experiment configuration."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from invarlab.errors import ConfigError, IoError
from invarlab.evaluation import as_similarity
from invarlab.models import BACKBONES, PROBE_LAYERS, ROLES
from invarlab.stimuli3d import PROCEDURAL_CLASSES
from invarlab.training import TrainConfig
from invarlab.transforms import TransformRanges, as_kind

DATASET_SOURCES = ("procedural", "obj_dir")
AFC_MODES = ("none", "diagonal", "all")


def _from_mapping(cls, d: Any, what: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {unknown}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"bad {what}: {exc}") from None


@dataclass
class DatasetSpec:
    source: str = "procedural"
    train_classes: list[str] = field(default_factory=list)
    novel_classes: list[str] = field(default_factory=list)
    objects_per_class: int = 5
    novel_objects_per_class: int = 10
    seed: int = 0
    obj_dir: str | None = None
    up_axis: str = "z"
    external_dir: str | None = None
    external_exclusions: list[str] = field(default_factory=list)
    norm_subset: int = 500

    def __post_init__(self):
        if self.source not in DATASET_SOURCES:
            raise ConfigError(f"dataset source must be one of {DATASET_SOURCES}")
        if not self.train_classes:
            raise ConfigError("dataset needs at least one training class")
        overlap = set(self.train_classes) & set(self.novel_classes)
        if overlap:
            raise ConfigError(f"train and novel classes overlap: {sorted(overlap)}")
        if self.objects_per_class < 1 or self.novel_objects_per_class < 1:
            raise ConfigError("objects per class must be >= 1")
        if self.source == "obj_dir" and not self.obj_dir:
            raise ConfigError("obj_dir source needs an obj_dir path")
        if self.source == "procedural":
            unknown = [c for c in self.train_classes + self.novel_classes if c not in PROCEDURAL_CLASSES]
            if unknown:
                raise ConfigError(f"unknown procedural classes: {unknown}")


@dataclass
class ModelSpec:
    arch: str
    role: str = "samediff"

    def __post_init__(self):
        if self.arch not in BACKBONES:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.role not in ROLES:
            raise ConfigError(f"unknown role {self.role!r}")

    @property
    def name(self) -> str:
        return f"{self.arch}_{self.role}"


@dataclass
class EvalSpec:
    samediff: bool = True
    samediff_pairs: int = 1000
    five_afc: str = "all"
    n_trials: int = 100
    curves: bool = True
    R: int = 200
    N: int = 200
    theta_points: int = 9
    translation_side: int = 5
    similarities: list[str] = field(default_factory=lambda: ["cosine"])
    probe_layer: str = "head_input"

    def __post_init__(self):
        if self.five_afc not in AFC_MODES:
            raise ConfigError(f"five_afc must be one of {AFC_MODES}")
        if self.probe_layer not in PROBE_LAYERS:
            raise ConfigError(f"probe_layer must be one of {PROBE_LAYERS}")
        if not self.similarities:
            raise ConfigError("at least one similarity kind is required")
        self.similarities = [as_similarity(s).value for s in self.similarities]
        for name in ("samediff_pairs", "n_trials", "R", "N", "theta_points", "translation_side"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def any(self) -> bool:
        return self.samediff or self.curves or self.five_afc != "none"


@dataclass
class ExperimentConfig:
    experiment_id: str
    dataset: DatasetSpec
    models: list[ModelSpec]
    conditions: list[str]
    transforms: TransformRanges = field(default_factory=TransformRanges)
    train: dict[str, Any] = field(default_factory=dict)
    eval: EvalSpec = field(default_factory=EvalSpec)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    sweep_n_values: list[int] = field(default_factory=lambda: [5, 50, 100, 500])
    output_dir: str = "runs"

    def __post_init__(self):
        if not self.experiment_id:
            raise ConfigError("experiment_id is required")
        if not self.models:
            raise ConfigError("at least one model is required")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if not self.conditions:
            raise ConfigError("at least one training condition is required")
        kinds = [as_kind(c).value for c in self.conditions]
        # every transform-trained condition needs its untransformed baseline
        if "none" not in kinds:
            kinds.append("none")
        self.conditions = list(dict.fromkeys(kinds))
        if any(n < 1 for n in self.sweep_n_values):
            raise ConfigError("sweep values must be >= 1")
        if "seed" in self.train:
            raise ConfigError("train.seed is set per run from seeds")
        self.train_config(0)  # validates

    def train_config(self, seed: int) -> TrainConfig:
        try:
            return TrainConfig(**{**self.train, "seed": seed})
        except TypeError as exc:
            raise ConfigError(f"bad train section: {exc}") from None

    @property
    def test_kinds(self) -> list[str]:
        """Transform kinds the nets are tested on: every trained kind other than none."""
        kinds = [c for c in self.conditions if c != "none"]
        return kinds or ["none"]

    def to_dict(self) -> dict[str, Any]:
        return {
            "experiment_id": self.experiment_id,
            "dataset": asdict(self.dataset),
            "models": [asdict(m) for m in self.models],
            "conditions": list(self.conditions),
            "transforms": self.transforms.to_dict(),
            "train": dict(self.train),
            "eval": asdict(self.eval),
            "seeds": list(self.seeds),
            "sweep_n_values": list(self.sweep_n_values),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        for key in ("experiment_id", "dataset", "models", "conditions"):
            if key not in d:
                raise ConfigError(f"config is missing {key!r}")
        models = []
        for m in d["models"]:
            models.append(ModelSpec(m) if isinstance(m, str) else _from_mapping(ModelSpec, m, "model"))
        kw = dict(d)
        kw["dataset"] = _from_mapping(DatasetSpec, d["dataset"], "dataset")
        kw["models"] = models
        if "transforms" in d:
            try:
                kw["transforms"] = TransformRanges.from_dict(d["transforms"])
            except (TypeError, KeyError, ValueError) as exc:
                raise ConfigError(f"bad transforms section: {exc}") from None
        if "eval" in d:
            kw["eval"] = _from_mapping(EvalSpec, d["eval"], "eval")
        try:
            return cls(**kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def config_hash(self) -> str:
        """Digest of the canonical JSON form; key order and output location do not matter."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(
        self, seeds: list[int] | None = None, output_dir: str | os.PathLike | None = None
    ) -> "ExperimentConfig":
        cfg = self
        if seeds is not None:
            cfg = replace(cfg, seeds=list(seeds))
        if output_dir is not None:
            cfg = replace(cfg, output_dir=str(output_dir))
        return cfg

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise IoError(f"no config file at {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(d)


CONFIG_DIR = Path(__file__).with_name("configs")


def bundled_config(name: str) -> ExperimentConfig:
    """One of the configs shipped with the package, e.g. ``"desk"``."""
    path = CONFIG_DIR / (name if name.endswith(".json") else name + ".json")
    if not path.is_file():
        raise ConfigError(f"no bundled config {name!r}; have {sorted(p.stem for p in CONFIG_DIR.glob('*.json'))}")
    return load_config(path)
