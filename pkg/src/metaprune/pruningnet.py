"""PruningNet: a weight-generating meta network trained by stochastic structure sampling.

For every conv/depthwise layer of the template one meta block maps the
layer's channel ratios to a full-size weight::

    ratios -> fc(64) -> relu -> fc(Co*Ci*Kh*Kw) -> reshape (Co, Ci, Kh, Kw) -> crop (co, ci)

Batch-norm affine parameters, running statistics and the classifier live at
maximum width and are cropped to leading sub-ranges. The ``direct`` mode is
the no-weight-prediction ablation: one shared max-width weight per layer that
is only cropped.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .config import TrainConfig
from .data import Dataset, batches
from .functional import BNState
from .netdef import NetworkTemplate, decode_ratios, ratio_dim, resolve_channels, sample_gene, validate_gene
from .network import forward
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

MODES = ("predict", "direct")


class TrainingDiverged(RuntimeError):
    pass


def _full_shape(template: NetworkTemplate, index: int) -> tuple[int, int, int, int]:
    layer = template.layers[index]
    if layer.kind == "depthwise":
        cin = 1
    elif layer.in_axis is None:
        cin = template.input_shape[0]
    else:
        cin = template.axes[layer.in_axis].max_channels
    return (layer.max_out_channels, cin, *layer.kernel)


class PruningNet:
    def __init__(self, template: NetworkTemplate, mode: str = "predict", hidden: int = 64, seed: int = 0):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.template = template
        self.mode = mode
        self.hidden = hidden
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BNState] = {}
        rng = np.random.default_rng(seed)

        for i in template.generated_layers():
            layer = template.layers[i]
            shape = _full_shape(template, i)
            target_std = math.sqrt(2.0 / (shape[1] * shape[2] * shape[3]))
            if mode == "predict":
                d = ratio_dim(template, i)
                w1 = rng.standard_normal((d, hidden))
                b1 = np.zeros(hidden)
                h = np.maximum(np.ones(d) @ w1 + b1, 0.0)
                # generated weights at full width get a Kaiming-like spread
                scale = target_std / max(np.linalg.norm(h), 1e-12)
                self._add(f"{layer.name}.fc1.weight", w1)
                self._add(f"{layer.name}.fc1.bias", b1)
                self._add(f"{layer.name}.fc2.weight", rng.standard_normal((hidden, math.prod(shape))) * scale)
                self._add(f"{layer.name}.fc2.bias", np.zeros(math.prod(shape)))
            else:
                self._add(f"{layer.name}.weight", rng.standard_normal(shape) * target_std)
            self._add(f"{layer.name}.gamma", np.ones(layer.max_out_channels))
            self._add(f"{layer.name}.beta", np.zeros(layer.max_out_channels))
            self.bn[layer.name] = BNState.fresh(layer.max_out_channels)

        fc = template.layers[-1]
        cin = template.axes[fc.in_axis].max_channels
        self._add("fc.weight", rng.standard_normal((cin, template.num_classes)) / math.sqrt(cin))
        self._add("fc.bias", np.zeros(template.num_classes))

    def _add(self, name, value):
        self.params[name] = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def full_weight(self, layer_name: str, ratios) -> Tensor:
        """Uncropped (Co, Ci, Kh, Kw) weight for one layer."""
        index = next(i for i, layer in enumerate(self.template.layers) if layer.name == layer_name)
        shape = _full_shape(self.template, index)
        if self.mode == "direct":
            return self.params[f"{layer_name}.weight"]
        r = Tensor(np.asarray(ratios, dtype=np.float64).reshape(1, -1))
        h = F.relu(F.linear(r, self.params[f"{layer_name}.fc1.weight"], self.params[f"{layer_name}.fc1.bias"]))
        flat = F.linear(h, self.params[f"{layer_name}.fc2.weight"], self.params[f"{layer_name}.fc2.bias"])
        return F.reshape(flat, shape)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.params.items()}
        for name, st in self.bn.items():
            out[f"bn.{name}.running_mean"] = st.running_mean
            out[f"bn.{name}.running_var"] = st.running_var
        return out

    def load_state_dict(self, state: dict) -> None:
        expected = set(self.state_dict())
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, p in self.params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)
        for name, st in self.bn.items():
            st.running_mean = np.array(state[f"bn.{name}.running_mean"], dtype=np.float64)
            st.running_var = np.array(state[f"bn.{name}.running_var"], dtype=np.float64)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, arr in self.state_dict().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def make_direct_variant(template: NetworkTemplate, seed: int = 0) -> PruningNet:
    """The ablation without weight prediction: shared max-width weights, cropped per gene."""
    return PruningNet(template, mode="direct", seed=seed)


def generate_weights(pnet: PruningNet, template: NetworkTemplate, gene) -> dict[str, Tensor]:
    """Cropped weights, BN affine parameters and classifier for the pruned network ``gene``."""
    if template is not pnet.template and template != pnet.template:
        raise ValueError(f"PruningNet was built for template {pnet.template.name!r}, not {template.name!r}")
    gene = validate_gene(template, gene)
    ratios = decode_ratios(template, gene)
    channels = resolve_channels(template, gene)
    out = {}
    for i, layer in enumerate(template.layers):
        cin, cout = channels[i]
        if layer.kind == "linear":
            out["fc.weight"] = F.crop(pnet.params["fc.weight"], cin)
            out["fc.bias"] = pnet.params["fc.bias"]
            continue
        full = pnet.full_weight(layer.name, ratios[layer.name])
        if layer.kind == "depthwise":
            out[f"{layer.name}.weight"] = F.crop(full, cout)
        else:
            out[f"{layer.name}.weight"] = F.crop(full, cout, cin)
        out[f"{layer.name}.gamma"] = F.crop(pnet.params[f"{layer.name}.gamma"], cout)
        out[f"{layer.name}.beta"] = F.crop(pnet.params[f"{layer.name}.beta"], cout)
    return out


def cropped_bn_states(pnet: PruningNet, template: NetworkTemplate, gene, copy: bool = False) -> dict[str, BNState]:
    """The PruningNet's running statistics restricted to ``gene``'s widths.

    Without ``copy`` the states are views: training-mode updates write back
    into the shared max-width buffers.
    """
    states = {}
    for layer, (_, cout) in zip(template.layers, resolve_channels(template, gene)):
        if layer.kind == "linear":
            continue
        st = pnet.bn[layer.name].crop(cout)
        states[layer.name] = st.copy() if copy else st
    return states


def forward_loss(pnet: PruningNet, template: NetworkTemplate, gene, images, labels) -> tuple[Tensor, np.ndarray]:
    """Cross-entropy of the pruned network built on the fly from generated weights."""
    weights = generate_weights(pnet, template, gene)
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.shape[1:] != tuple(template.input_shape):
        raise ValueError(f"batch images {x.shape[1:]} do not match template input {template.input_shape}")
    logits = forward(template, weights, cropped_bn_states(pnet, template, gene), x, training=True)
    return F.softmax_cross_entropy(logits, labels)


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    lr: float


def train_meta(pnet: PruningNet, template: NetworkTemplate, dataset: Dataset, config: TrainConfig) -> tuple[PruningNet, list[EpochLog]]:
    """Stochastic structure sampling: a fresh random gene for every mini-batch."""
    epochs = config.meta_epochs()
    log: list[EpochLog] = []
    if epochs == 0:
        return pnet, log
    steps_per_epoch = -(-len(dataset) // config.batch_size)
    total = epochs * steps_per_epoch
    gene_rng = np.random.default_rng([config.seed, 0x6E])
    opt = F.SGD(pnet.parameters(), lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    step = 0
    for epoch in range(epochs):
        losses = []
        for x, y in batches(dataset, config.batch_size, config.augment, seed=config.seed, epoch=epoch):
            gene = sample_gene(template, gene_rng)
            opt.lr = config.lr_at(step, total)
            opt.zero_grad()
            loss, _ = forward_loss(pnet, template, gene, x, y)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss {value} at epoch {epoch}, step {step}, gene {gene}, lr {opt.lr:g}")
            loss.backward()
            opt.step()
            losses.append(value)
            step += 1
        log.append(EpochLog(epoch, float(np.mean(losses)), opt.lr))
        logger.info("meta epoch %d: loss %.4f lr %.4g", epoch, log[-1].mean_loss, opt.lr)
    return pnet, log


def write_metrics_csv(log: list[EpochLog], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "lr"])
        for row in log:
            w.writerow([row.epoch, repr(row.mean_loss), repr(row.lr)])


def generated_full(pnet: PruningNet, template: NetworkTemplate, gene) -> dict[str, np.ndarray]:
    """Uncropped generated weights for ``gene`` (no tape)."""
    ratios = decode_ratios(template, gene)
    with no_grad():
        return {
            template.layers[i].name: pnet.full_weight(template.layers[i].name, ratios[template.layers[i].name]).data
            for i in template.generated_layers()
        }
