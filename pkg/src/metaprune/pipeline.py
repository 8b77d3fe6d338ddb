"""Glue shared by the CLI and scripted runs: templates, data sources, checkpoints."""
from __future__ import annotations

import json
from dataclasses import asdict, replace
from pathlib import Path

from .checkpoint import load_tensors, save_tensors
from .config import DataConfig, RunConfig, config_to_dict
from .data import Dataset, load_cifar_binary, split_holdout, synth_blobs
from .netdef import NetworkTemplate, adapt, builtin_templates, load_template, template_from_dict, template_to_dict
from .pruningnet import PruningNet

CIFAR_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST = "test_batch.bin"


class UsageError(ValueError):
    """Bad flags, paths or config; the CLI maps it to exit code 2."""


def resolve_template(spec: str) -> NetworkTemplate:
    """A builtin template name, or the path of a template JSON file."""
    builtins = builtin_templates()
    if spec in builtins:
        return builtins[spec]
    path = Path(spec)
    if not path.is_file():
        raise UsageError(f"template file not found: {path} (builtins: {', '.join(sorted(builtins))})")
    try:
        return load_template(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"{path}: invalid template: {exc}") from None


def data_config_for(spec: str, base: DataConfig) -> DataConfig:
    """``synth`` uses ``base``; a ``.json`` file overrides its fields."""
    if spec == "synth":
        return base
    path = Path(spec)
    if path.suffix == ".json":
        if not path.is_file():
            raise UsageError(f"data config not found: {path}")
        patch = json.loads(path.read_text())
        known = set(asdict(base))
        unknown = set(patch) - known
        if unknown:
            raise UsageError(f"{path}: unknown data field(s) {sorted(unknown)}")
        return replace(base, **{k: tuple(v) if isinstance(v, list) else v for k, v in patch.items()})
    return base


def load_data(spec: str, cfg: DataConfig) -> tuple[Dataset, Dataset]:
    """(train, test) for ``synth``, a synthetic-params JSON, or a CIFAR-10 binary directory."""
    path = Path(spec)
    if spec != "synth" and path.suffix != ".json":
        if not path.is_dir():
            raise UsageError(f"data directory not found: {path}")
        missing = [n for n in (*CIFAR_TRAIN, CIFAR_TEST) if not (path / n).is_file()]
        if missing:
            raise UsageError(f"{path}: missing CIFAR-10 file(s) {missing}")
        norm = (cfg.cifar_mean, cfg.cifar_std)
        return load_cifar_binary([path / n for n in CIFAR_TRAIN], norm), load_cifar_binary(path / CIFAR_TEST, norm)
    full = synth_blobs(cfg.classes, cfg.per_class + cfg.test_per_class, tuple(cfg.image_shape), seed=cfg.seed, noise=cfg.noise)
    return split_holdout(full, cfg.test_per_class, seed=cfg.seed)


def fit_template(template: NetworkTemplate, dataset: Dataset) -> NetworkTemplate:
    """Adapt ``template`` to the dataset's image shape and class count."""
    if tuple(template.input_shape) == dataset.image_shape and template.num_classes == dataset.num_classes:
        return template
    return adapt(template, dataset.image_shape, dataset.num_classes)


def meta_splits(train: Dataset, cfg: DataConfig, seed: int) -> tuple[Dataset, Dataset]:
    """(sub_train, sub_val): the PruningNet trains on the first, the search scores on the second."""
    return split_holdout(train, cfg.holdout_per_class, seed=seed)


def _meta_path(ckpt) -> Path:
    return Path(f"{ckpt}.json")


def save_checkpoint(path, pnet: PruningNet, *, data: str, seed: int, run: RunConfig) -> None:
    """Tensor file at ``path`` plus ``path.json`` recording how to rebuild the run."""
    save_tensors(path, pnet.state_dict())
    meta = {
        "template": template_to_dict(pnet.template),
        "mode": pnet.mode,
        "hidden": pnet.hidden,
        "data": data,
        "seed": seed,
        "config": config_to_dict(run),
    }
    _meta_path(path).write_text(json.dumps(meta, indent=2))


def load_checkpoint(path) -> tuple[PruningNet, dict]:
    path = Path(path)
    meta_path = _meta_path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    if not meta_path.is_file():
        raise UsageError(f"checkpoint metadata not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    template = template_from_dict(meta["template"])
    pnet = PruningNet(template, mode=meta["mode"], hidden=meta["hidden"], seed=meta["seed"])
    pnet.load_state_dict(load_tensors(path))
    return pnet, meta
