"""Run configuration loaded from YAML.

Top-level keys: ``dataset_root``, ``train_sequences``, ``val_sequences``,
``label_map``, ``voxel_size``, ``epochs``, ``batch_size``, ``seed``,
``dtype``, ``output_dir``, ``range_image``, ``network``, ``loss``,
``optimizer``. Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .modules import NetworkConfig


class ConfigError(Exception):
    pass


@dataclass
class RangeImageConfig:
    height: int = 64
    width: int = 2048


@dataclass
class LossConfig:
    lambda_wce: float = 0.75
    lambda_geo: float = 0.25
    frequencies: str | None = None


@dataclass
class OptimizerConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0005
    decay: float = 0.9
    period: int = 10


@dataclass
class RunConfig:
    dataset_root: str = "data/semantic-kitti"
    train_sequences: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4, 5, 6, 7, 9, 10])
    val_sequences: list[int] = field(default_factory=lambda: [8])
    label_map: str | None = None
    voxel_size: float = 0.05
    epochs: int = 120
    batch_size: int = 2
    seed: int = 0
    dtype: str = "float32"
    output_dir: str = "runs/s3net"
    range_image: RangeImageConfig = field(default_factory=RangeImageConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ConfigError("voxel_size must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def from_dict(cls, doc: dict[str, Any], base_dir: Path | None = None) -> "RunConfig":
        try:
            cfg = _build(cls, doc or {})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if base_dir is not None:
            cfg.resolve_paths(base_dir)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text())
        except FileNotFoundError:
            raise
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if doc is not None and not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(doc or {}, path.parent)

    def resolve_paths(self, base: Path) -> None:
        def fix(p):
            return None if p is None or Path(p).is_absolute() else str((base / p).resolve())

        self.dataset_root = fix(self.dataset_root)
        self.label_map = fix(self.label_map)
        self.output_dir = fix(self.output_dir)
        self.loss.frequencies = fix(self.loss.frequencies)

    def to_dict(self) -> dict[str, Any]:
        doc = dataclasses.asdict(self)
        doc["network"]["encoder_channels"] = list(self.network.encoder_channels)
        for key in ("encoder_inter", "encoder_intra", "decoder_inter"):
            doc["network"][key] = list(doc["network"][key])
        return doc


def _build(cls, doc: dict[str, Any]):
    if not isinstance(doc, dict):
        raise ConfigError(f"{cls.__name__}: expected a mapping, got {type(doc).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value) if sub is not None else value
    return cls(**kwargs)


_NESTED = {
    (RunConfig, "range_image"): RangeImageConfig,
    (RunConfig, "network"): NetworkConfig,
    (RunConfig, "loss"): LossConfig,
    (RunConfig, "optimizer"): OptimizerConfig,
}
