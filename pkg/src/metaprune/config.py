"""Run configuration with JSON overrides."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


@dataclass(frozen=True)
class TrainConfig:
    """SGD + momentum with per-step cosine decay.

    ``epochs=None`` means "derive from ``baseline_epochs``": the full
    schedule for from-scratch training, a quarter of it for the PruningNet.
    """

    epochs: int | None = None
    baseline_epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    cosine: bool = True
    augment: str = "none"
    seed: int = 0

    def meta_epochs(self) -> int:
        return self.epochs if self.epochs is not None else max(1, self.baseline_epochs // 4)

    def final_epochs(self) -> int:
        return self.epochs if self.epochs is not None else self.baseline_epochs

    def lr_at(self, step: int, total: int) -> float:
        if not self.cosine or total <= 0:
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * step / total))


@dataclass(frozen=True)
class DataConfig:
    """Synthetic data parameters, or CIFAR normalization constants."""

    classes: int = 8
    per_class: int = 300
    image_shape: tuple = (3, 16, 16)
    noise: float = 0.25
    seed: int = 0
    test_per_class: int = 100
    holdout_per_class: int = 50
    cifar_mean: tuple = CIFAR_MEAN
    cifar_std: tuple = CIFAR_STD


@dataclass(frozen=True)
class SearchDefaults:
    population: int = 128
    topk: int = 32
    mutations: int = 64
    crossovers: int = 64
    iterations: int = 20
    p_mut: float = 0.1
    calib_images: int = 20000
    eval_batch: int = 256


@dataclass(frozen=True)
class RunConfig:
    meta: TrainConfig = field(default_factory=TrainConfig)
    final: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    search: SearchDefaults = field(default_factory=SearchDefaults)
    hidden: int = 64


def _override(obj, patch: dict, where: str):
    known = {f.name: f for f in fields(obj)}
    changes = {}
    for key, value in patch.items():
        if key not in known:
            raise ValueError(f"config {where}: unknown key {key!r}")
        current = getattr(obj, key)
        if hasattr(current, "__dataclass_fields__"):
            if not isinstance(value, dict):
                raise ValueError(f"config {where}.{key}: expected an object")
            changes[key] = _override(current, value, f"{where}.{key}")
        elif isinstance(current, tuple):
            changes[key] = tuple(value)
        else:
            changes[key] = value
    return replace(obj, **changes)


def load_config(path=None, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    if path is None:
        return cfg
    try:
        patch = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    if not isinstance(patch, dict):
        raise ValueError(f"config {path}: top level must be an object")
    return _override(cfg, patch, str(path))


def config_to_dict(cfg) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> RunConfig:
    return _override(RunConfig(), d, "<dict>")
