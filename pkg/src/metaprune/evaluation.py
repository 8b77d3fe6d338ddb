"""Search-time scoring of genes with a frozen PruningNet, and final from-scratch training."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .config import TrainConfig
from .data import Dataset, batches
from .functional import BNState
from .netdef import NetworkTemplate, validate_gene
from .network import forward, fresh_bn_states, init_params
from .pruningnet import EpochLog, PruningNet, TrainingDiverged, cropped_bn_states, generate_weights
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

CALIB_IMAGES = 20000


def default_calib_images(sub_train: Dataset) -> int:
    return min(CALIB_IMAGES, len(sub_train))


def calibration_stream(sub_train: Dataset, n_images: int, batch_size: int = 256, seed: int = 0) -> list[np.ndarray]:
    """A fixed, seeded selection of ``n_images`` sub-train images, pre-batched."""
    rng = np.random.default_rng([seed, 0xCA1])
    idx = rng.permutation(len(sub_train))[:n_images]
    return [sub_train.images[idx[i:i + batch_size]] for i in range(0, idx.size, batch_size)]


def recalibrate_bn(pnet: PruningNet, template: NetworkTemplate, gene, calib_stream, n_images: int | None = None) -> dict[str, BNState]:
    """Fresh running statistics for ``gene``'s widths, averaged over the calibration images.

    The PruningNet is not touched; the returned states are private.
    """
    if n_images is not None and n_images < 1:
        raise ValueError(f"n_images must be >= 1, got {n_images}")
    states = fresh_bn_states(template, gene)
    seen = 0
    with no_grad():
        weights = generate_weights(pnet, template, gene)
        for x in calib_stream:
            if isinstance(x, tuple):
                x = x[0]
            if n_images is not None:
                if seen >= n_images:
                    break
                x = x[: n_images - seen]
            forward(template, weights, states, Tensor(x), training=True, momentum=None)
            seen += x.shape[0]
    if seen == 0:
        raise ValueError("calibration stream is empty")
    return states


def accuracy(template: NetworkTemplate, weights: dict, states: dict, dataset: Dataset, batch_size: int = 256) -> float:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            x = Tensor(dataset.images[start:start + batch_size])
            logits = forward(template, weights, states, x, training=False)
            correct += int((logits.data.argmax(axis=1) == dataset.labels[start:start + batch_size]).sum())
    return correct / len(dataset)


def evaluate(
    pnet: PruningNet,
    template: NetworkTemplate,
    gene,
    subval: Dataset,
    stats: dict | None = None,
    calib_stream=None,
    n_images: int | None = None,
    batch_size: int = 256,
) -> float:
    """Top-1 accuracy of the pruned network with generated weights, no finetuning.

    BN statistics come from ``stats`` if given, otherwise from recalibrating
    on ``calib_stream``.
    """
    if len(subval) == 0:
        raise ValueError("sub-validation set is empty")
    if stats is None:
        if calib_stream is None:
            raise ValueError("evaluate needs recalibrated stats or a calibration stream")
        stats = recalibrate_bn(pnet, template, gene, calib_stream, n_images)
    with no_grad():
        weights = generate_weights(pnet, template, gene)
    return accuracy(template, weights, stats, subval, batch_size)


def stale_stats(pnet: PruningNet, template: NetworkTemplate, gene) -> dict[str, BNState]:
    """Running statistics left over from meta-training, cropped to ``gene``."""
    return cropped_bn_states(pnet, template, gene, copy=True)


class Evaluator:
    """``gene -> accuracy``: recalibrate then evaluate, with a fixed calibration set.

    Safe for concurrent calls: each call works on private BN statistics and
    never writes to the PruningNet.
    """

    def __init__(
        self,
        pnet: PruningNet,
        template: NetworkTemplate,
        sub_train: Dataset,
        sub_val: Dataset,
        n_calib: int | None = None,
        calib_seed: int = 0,
        batch_size: int = 256,
        recalibrate: bool = True,
    ):
        self.pnet = pnet
        self.template = template
        self.sub_val = sub_val
        self.batch_size = batch_size
        self.recalibrate = recalibrate
        self.n_calib = default_calib_images(sub_train) if n_calib is None else min(n_calib, len(sub_train))
        self.calib = calibration_stream(sub_train, self.n_calib, batch_size, calib_seed)

    def __call__(self, gene) -> float:
        if self.recalibrate:
            return evaluate(self.pnet, self.template, gene, self.sub_val, calib_stream=self.calib, batch_size=self.batch_size)
        stats = stale_stats(self.pnet, self.template, gene)
        return evaluate(self.pnet, self.template, gene, self.sub_val, stats=stats, batch_size=self.batch_size)


@dataclass
class FinalResult:
    params: dict
    bn_states: dict
    test_accuracy: float
    log: list

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.params.items()}
        for name, st in self.bn_states.items():
            out[f"bn.{name}.running_mean"] = st.running_mean
            out[f"bn.{name}.running_var"] = st.running_var
        return out


def train_from_scratch(template: NetworkTemplate, gene, train: Dataset, test: Dataset, config: TrainConfig) -> FinalResult:
    """Train the pruned structure from random init and report test accuracy."""
    gene = validate_gene(template, gene, on_grid=False)
    rng = np.random.default_rng([config.seed, 0x5C])
    params = init_params(template, gene, rng)
    states = fresh_bn_states(template, gene)
    epochs = config.final_epochs()
    steps_per_epoch = -(-len(train) // config.batch_size)
    total = epochs * steps_per_epoch
    opt = F.SGD(list(params.values()), lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    log = []
    step = 0
    for epoch in range(epochs):
        losses = []
        for x, y in batches(train, config.batch_size, config.augment, seed=config.seed, epoch=epoch):
            opt.lr = config.lr_at(step, total)
            opt.zero_grad()
            logits = forward(template, params, states, Tensor(x), training=True)
            loss, _ = F.softmax_cross_entropy(logits, y)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss {value} at epoch {epoch}, step {step}, gene {gene}")
            loss.backward()
            opt.step()
            losses.append(value)
            step += 1
        log.append(EpochLog(epoch, float(np.mean(losses)), opt.lr))
        logger.info("final epoch %d: loss %.4f", epoch, log[-1].mean_loss)
    acc = accuracy(template, params, states, test)
    return FinalResult(params, states, acc, log)
