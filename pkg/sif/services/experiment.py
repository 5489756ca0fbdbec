"""Experiment configuration files and the artifacts a run leaves in its output directory."""

import json
import logging
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, Optional, Tuple

import yaml

from sif.errors import ConfigError
from sif.models import MiSplit
from sif.services.data import (
    AugmentationFamily,
    LabeledDataset,
    fit_standardizer,
    load_csv,
    load_idx,
    make_splits,
    synth_blobs,
)
from sif.services.influence import SCORERS, LissaConfig, Scorer
from sif.services.target_models import DEFAULT_LR, ModelSpec, TrainConfig

logger = logging.getLogger(__name__)

DATASET_KINDS = ("blobs", "idx", "csv")
SCORER_ALIASES = {"sif": "sif", "adasif": "ada_sif", "ada_sif": "ada_sif", "avgsif": "avg_sif", "avg_sif": "avg_sif"}

CHECKPOINT_FILE = "checkpoint.sifc"
SPLIT_FILE = "split.json"
TRAIN_METRICS_FILE = "train_metrics.json"
RESOLVED_CONFIG_FILE = "resolved_config.yaml"
ATTACK_FILE = "attack.json"
REPORT_FILE = "report.json"
ORACLE_FILE = "oracle.json"
HISTOGRAM_FILE = "histogram.csv"


def _build(cls, data: Optional[dict], section: str, **extra):
    """Instantiate a dataclass from a mapping, rejecting unknown keys."""
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**{**data, **extra})
    except TypeError as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "blobs"
    num_classes: int = 4
    dim: int = 10
    per_class: int = 300
    spread: float = 3.0
    images: Optional[str] = None
    labels: Optional[str] = None
    path: Optional[str] = None
    standardize: bool = True

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset kind must be one of {DATASET_KINDS}")
        required = {"idx": ("images", "labels"), "csv": ("path",)}.get(self.kind, ())
        for key in required:
            value = getattr(self, key)
            if not value:
                raise ConfigError(f"dataset kind {self.kind!r} needs {key!r}")
            if not os.path.exists(value):
                raise ConfigError(f"dataset file not found: {value}")


@dataclass(frozen=True)
class SplitConfig:
    mem_size: int = 500
    stratify: bool = True
    validation_fraction: float = 0.05


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "mlp"
    hidden: Tuple[int, ...] = (64,)
    channels: int = 4

    def spec_for(self, dataset: LabeledDataset) -> ModelSpec:
        return ModelSpec(
            arch=self.arch,
            input_shape=dataset.input_shape,
            num_classes=dataset.num_classes,
            hidden=tuple(self.hidden) if self.arch == "mlp" else (),
            channels=self.channels,
        )


@dataclass(frozen=True)
class ScorerConfig:
    kind: str = "sif"
    grad_samples: int = 128
    ensemble: int = 8
    lissa: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SCORERS:
            raise ConfigError(f"scorer kind must be one of {SCORERS}")
        unknown = set(self.lissa) - {f.name for f in fields(LissaConfig)} - {"seed"}
        if unknown:
            raise ConfigError(f"unknown keys in 'scorer.lissa': {sorted(unknown)}")


@dataclass(frozen=True)
class AttackConfig:
    grid_size: int = 1000
    histogram_bins: int = 50


@dataclass(frozen=True)
class OracleConfig:
    l2: float = 0.05
    damping: float = 0.01
    fd_step: float = 1e-5
    gradient_tolerance: float = 1e-4
    hvp_tolerance: float = 1e-3
    lissa_tolerance: float = 1e-2
    lissa_depth: int = 1000
    spearman_threshold: float = 0.99
    loo_spearman_threshold: float = 0.9
    loo_samples: int = 100
    loo_removals: int = 50
    sif_samples: int = 100


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; ``to_dict`` is the fully resolved form."""

    seed: int = 0
    output_dir: str = "default"
    dataset: DatasetConfig = DatasetConfig()
    split: SplitConfig = SplitConfig()
    model: ModelConfig = ModelConfig()
    train: Dict[str, Any] = field(default_factory=dict)
    augmentation: AugmentationFamily = AugmentationFamily()
    scorer: ScorerConfig = ScorerConfig()
    attack: AttackConfig = AttackConfig()
    oracle: OracleConfig = OracleConfig()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data or {})
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        model = dict(data.get("model") or {})
        if "hidden" in model:
            model["hidden"] = tuple(model["hidden"])
        train = dict(data.get("train") or {})
        train_keys = {f.name for f in fields(TrainConfig)} - {"augmentation", "seed"}
        if set(train) - train_keys:
            raise ConfigError(f"unknown keys in 'train': {sorted(set(train) - train_keys)}")
        return cls(
            seed=int(data.get("seed", 0)),
            output_dir=str(data.get("output_dir", "default")),
            dataset=_build(DatasetConfig, data.get("dataset"), "dataset"),
            split=_build(SplitConfig, data.get("split"), "split"),
            model=_build(ModelConfig, model, "model"),
            train=train,
            augmentation=_build(AugmentationFamily, data.get("augmentation"), "augmentation"),
            scorer=_build(ScorerConfig, data.get("scorer"), "scorer"),
            attack=_build(AttackConfig, data.get("attack"), "attack"),
            oracle=_build(OracleConfig, data.get("oracle"), "oracle"),
        )

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None,
                       scorer: Optional[str] = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if output_dir is not None:
            cfg = replace(cfg, output_dir=output_dir)
        if scorer is not None:
            if scorer not in SCORER_ALIASES:
                raise ConfigError(f"unknown scorer {scorer!r}")
            cfg = replace(cfg, scorer=replace(cfg.scorer, kind=SCORER_ALIASES[scorer]))
        return cfg

    def train_config(self) -> TrainConfig:
        values = {"lr": DEFAULT_LR[self.model.arch], **self.train}
        return _build(TrainConfig, values, "train", augmentation=self.augmentation, seed=self.seed)

    def lissa_config(self) -> LissaConfig:
        values = dict(self.scorer.lissa)
        values.setdefault("seed", self.seed)
        if self.scorer.kind == "ada_sif" and not self.augmentation.is_identity:
            return LissaConfig.for_ada_sif(**values)
        return LissaConfig.for_sif(self.split.mem_size, **values)

    def build_scorer(self) -> Scorer:
        return Scorer(
            kind=self.scorer.kind,
            lissa=self.lissa_config(),
            family=self.augmentation,
            grad_samples=self.scorer.grad_samples,
            ensemble=self.scorer.ensemble,
        )

    def to_dict(self) -> dict:
        """Resolved form with every default materialized."""
        model = {"arch": self.model.arch, "hidden": list(self.model.hidden), "channels": self.model.channels}
        train = self.train_config().to_dict()
        train.pop("augmentation")
        train.pop("seed")
        scorer_lissa = self.lissa_config().to_dict()
        scorer_lissa.pop("seed")
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "dataset": {f.name: getattr(self.dataset, f.name) for f in fields(DatasetConfig)},
            "split": {f.name: getattr(self.split, f.name) for f in fields(SplitConfig)},
            "model": model,
            "train": train,
            "augmentation": self.augmentation.to_dict(),
            "scorer": {
                "kind": self.scorer.kind,
                "grad_samples": self.scorer.grad_samples,
                "ensemble": self.scorer.ensemble,
                "lissa": scorer_lissa,
            },
            "attack": {f.name: getattr(self.attack, f.name) for f in fields(AttackConfig)},
            "oracle": {f.name: getattr(self.oracle, f.name) for f in fields(OracleConfig)},
        }


def load_experiment(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return ExperimentConfig.from_dict(data or {})


def write_resolved(cfg: ExperimentConfig, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, RESOLVED_CONFIG_FILE)
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
    return path


def build_dataset(cfg: DatasetConfig, seed: int) -> LabeledDataset:
    if cfg.kind == "blobs":
        return synth_blobs(cfg.num_classes, cfg.dim, cfg.per_class, cfg.spread, seed)
    if cfg.kind == "idx":
        return load_idx(cfg.images, cfg.labels)
    return load_csv(cfg.path)


@dataclass(frozen=True)
class Prepared:
    dataset: LabeledDataset
    split: MiSplit
    spec: ModelSpec


def prepare(cfg: ExperimentConfig, split: Optional[MiSplit] = None) -> Prepared:
    """Load data, split it (unless a split is given) and standardize on D_mem."""
    raw = build_dataset(cfg.dataset, cfg.seed)
    if split is None:
        split = make_splits(
            raw, cfg.split.mem_size, cfg.seed,
            stratify=cfg.split.stratify, validation_fraction=cfg.split.validation_fraction,
        )
    dataset = fit_standardizer(raw, split.members).apply(raw) if cfg.dataset.standardize else raw
    return Prepared(dataset, split, cfg.model.spec_for(dataset))


def write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    logger.info("wrote %s", path)


def read_json(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"missing artifact: {path}")
    with open(path) as fh:
        return json.load(fh)


def save_split(split: MiSplit, out_dir: str) -> str:
    path = os.path.join(out_dir, SPLIT_FILE)
    write_json(path, split.to_dict())
    return path


def load_split(out_dir: str) -> MiSplit:
    return MiSplit.from_dict(read_json(os.path.join(out_dir, SPLIT_FILE)))


def scores_path(out_dir: str, subset: str, scorer_kind: str) -> str:
    return os.path.join(out_dir, f"scores_{subset}_{scorer_kind}.csv")
