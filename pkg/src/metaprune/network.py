"""Forward pass of a pruned network given its (already cropped) weights.

Shared by PruningNet training, search-time evaluation and from-scratch
training. Parameter names: ``<layer>.weight``, ``<layer>.gamma``,
``<layer>.beta``, and ``fc.weight`` / ``fc.bias`` for the classifier, whose
weight is stored as (in_features, classes).
"""
from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .functional import BNState
from .netdef import NetworkTemplate, resolve_channels, validate_gene
from .tensor import ShapeError, Tensor


def forward(
    template: NetworkTemplate,
    weights: dict,
    bn_states: dict | None,
    x: Tensor,
    training: bool,
    momentum: float | None = F.BN_MOMENTUM,
) -> Tensor:
    """Run the network; returns logits (N, classes).

    In training mode BN uses batch statistics and folds them into
    ``bn_states`` (if given); in eval mode ``bn_states`` must cover every layer.
    """
    h = x
    block_input = {}
    starts = {block.layers[0]: b for b, block in enumerate(template.blocks) if block.shortcut}
    ends = {block.layers[-1]: b for b, block in enumerate(template.blocks) if block.shortcut}
    for i, layer in enumerate(template.layers):
        if layer.kind == "linear":
            if h.ndim == 4:
                h = F.global_avg_pool(h)
            return F.linear(h, weights["fc.weight"], weights["fc.bias"])
        if i in starts:
            block_input[starts[i]] = h
        w = weights[f"{layer.name}.weight"]
        if layer.kind == "depthwise":
            h = F.depthwise_conv2d(h, w, layer.stride, layer.pad)
        else:
            h = F.conv2d(h, w, layer.stride, layer.pad)
        state = None if bn_states is None else bn_states[layer.name]
        h = F.batchnorm(h, weights[f"{layer.name}.gamma"], weights[f"{layer.name}.beta"], state, training, momentum)
        if i in ends:
            skip = block_input.pop(ends[i])
            if skip.shape != h.shape:
                raise ShapeError(f"shortcut of block {ends[i]}: input {skip.shape} vs output {h.shape}")
            h = F.add(h, skip)
        if layer.relu:
            h = F.relu(h)
    raise ShapeError(f"template {template.name!r} has no classifier")


def init_params(template: NetworkTemplate, gene, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh trainable parameters at the widths of ``gene`` (Kaiming-normal convs)."""
    gene = validate_gene(template, gene, on_grid=False)
    params = {}
    for layer, (cin, cout) in zip(template.layers, resolve_channels(template, gene)):
        if layer.kind == "linear":
            params["fc.weight"] = Tensor(rng.standard_normal((cin, cout)) / math.sqrt(cin), requires_grad=True)
            params["fc.bias"] = Tensor(np.zeros(cout), requires_grad=True)
            continue
        kh, kw = layer.kernel
        fan_in = (1 if layer.kind == "depthwise" else cin) * kh * kw
        shape = (cout, 1, kh, kw) if layer.kind == "depthwise" else (cout, cin, kh, kw)
        params[f"{layer.name}.weight"] = Tensor(rng.standard_normal(shape) * math.sqrt(2.0 / fan_in), requires_grad=True)
        params[f"{layer.name}.gamma"] = Tensor(np.ones(cout), requires_grad=True)
        params[f"{layer.name}.beta"] = Tensor(np.zeros(cout), requires_grad=True)
    return params


def fresh_bn_states(template: NetworkTemplate, gene) -> dict[str, BNState]:
    return {
        layer.name: BNState.fresh(cout)
        for layer, (_, cout) in zip(template.layers, resolve_channels(template, gene))
        if layer.kind != "linear"
    }
