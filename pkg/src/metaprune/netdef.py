"""Target-network templates and their prunable channel spaces.

A template is a straight chain of layers (conv, depthwise, one final linear
classifier preceded by global average pooling), optionally grouped into
blocks. A block with ``shortcut=True`` adds its input to its output.

Channel widths are not stored per layer. Each layer names the *axis* that
sets its input and output width, and a gene holds one channel count per
axis. Layers that share an axis always agree, which is how depthwise layers
and stage-tied residual blocks stay well-typed under any gene.
"""
from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

LAYER_KINDS = ("conv", "depthwise", "linear")
AXIS_ROLES = ("layer", "stage", "middle")

Gene = tuple[int, ...]


class TemplateError(ValueError):
    pass


class GeneError(ValueError):
    pass


@dataclass(frozen=True)
class Axis:
    name: str
    max_channels: int
    role: str = "layer"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    max_out_channels: int
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    pad: int = 0
    in_axis: int | None = None  # None: the template's input channels
    out_axis: int | None = None  # None: the class count (classifier only)
    relu: bool = True
    is_downsampling: bool = False


@dataclass(frozen=True)
class Block:
    layers: tuple[int, ...]
    in_axis: int
    out_axis: int
    mid_axis: int
    shortcut: bool = False


@dataclass(frozen=True)
class StageGroup:
    axis: int
    blocks: tuple[int, ...]


class AxisSpace(NamedTuple):
    min: int
    max: int
    step: int


@dataclass(frozen=True)
class NetworkTemplate:
    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    axes: tuple[Axis, ...]
    layers: tuple[LayerSpec, ...]
    blocks: tuple[Block, ...] = ()
    stages: tuple[StageGroup, ...] = ()
    _block_of: dict = field(default=None, init=False, repr=False, compare=False, hash=False)
    _sizes: tuple = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        _validate_template(self)
        block_of = {}
        for b, block in enumerate(self.blocks):
            for li in block.layers:
                block_of[li] = b
        object.__setattr__(self, "_block_of", block_of)
        object.__setattr__(self, "_sizes", tuple(_spatial_sizes(self)))

    @property
    def gene_length(self) -> int:
        return len(self.axes)

    def block_of(self, layer_index: int) -> int | None:
        return self._block_of.get(layer_index)

    def staged_blocks(self) -> set[int]:
        return {b for group in self.stages for b in group.blocks}

    def generated_layers(self) -> list[int]:
        """Indices of conv/depthwise layers, i.e. the ones with generated weights."""
        return [i for i, layer in enumerate(self.layers) if layer.kind != "linear"]

    def full_gene(self) -> Gene:
        return tuple(a.max_channels for a in self.axes)


def _validate_template(t: NetworkTemplate) -> None:
    def fail(msg):
        raise TemplateError(f"template {t.name!r}: {msg}")

    if len(t.input_shape) != 3 or min(t.input_shape) < 1:
        fail(f"input_shape must be (C, H, W) with positive extents, got {t.input_shape}")
    if t.num_classes < 1:
        fail("num_classes must be >= 1")
    if len({a.name for a in t.axes}) != len(t.axes):
        fail("axis names must be unique")
    for a in t.axes:
        if a.max_channels < 1:
            fail(f"axis {a.name!r} has max_channels {a.max_channels}")
        if a.role not in AXIS_ROLES:
            fail(f"axis {a.name!r} has unknown role {a.role!r}")
    if not t.layers:
        fail("no layers")
    if len({layer.name for layer in t.layers}) != len(t.layers):
        fail("layer names must be unique")

    n_axes = len(t.axes)
    last = len(t.layers) - 1
    used = set()
    for i, layer in enumerate(t.layers):
        where = f"layer {layer.name!r}"
        if layer.kind not in LAYER_KINDS:
            fail(f"{where}: unknown kind {layer.kind!r}")
        if len(layer.kernel) != 2 or min(layer.kernel) < 1 or layer.stride < 1 or layer.pad < 0:
            fail(f"{where}: bad kernel/stride/pad")
        for ax in (layer.in_axis, layer.out_axis):
            if ax is not None and not 0 <= ax < n_axes:
                fail(f"{where}: axis index {ax} out of range")
        if (layer.in_axis is None) != (i == 0):
            fail(f"{where}: only the first layer reads the fixed input channels")
        if (layer.out_axis is None) != (i == last):
            fail(f"{where}: only the final classifier has a fixed output width")
        if (layer.kind == "linear") != (i == last):
            fail(f"{where}: exactly one linear layer, the last, is supported")
        if i > 0 and layer.in_axis != t.layers[i - 1].out_axis:
            fail(f"{where}: input axis does not match the previous layer's output axis")
        if layer.kind == "depthwise" and layer.in_axis != layer.out_axis:
            fail(f"{where}: depthwise layers need in_axis == out_axis")
        expected = t.num_classes if layer.out_axis is None else t.axes[layer.out_axis].max_channels
        if layer.max_out_channels != expected:
            fail(f"{where}: max_out_channels {layer.max_out_channels} != {expected}")
        if layer.out_axis is not None:
            used.add(layer.out_axis)
    if t.layers[0].kind == "depthwise":
        fail("the first layer cannot be depthwise")
    if used != set(range(n_axes)):
        fail(f"axes {sorted(set(range(n_axes)) - used)} are not produced by any layer")

    seen_layers = set()
    for b, block in enumerate(t.blocks):
        idx = list(block.layers)
        if not idx or idx != list(range(idx[0], idx[0] + len(idx))):
            fail(f"block {b}: layers must be a contiguous run")
        if seen_layers & set(idx):
            fail(f"block {b}: overlaps another block")
        seen_layers |= set(idx)
        if idx[-1] >= last:
            fail(f"block {b}: the classifier cannot be inside a block")
        if t.layers[idx[0]].in_axis != block.in_axis or t.layers[idx[-1]].out_axis != block.out_axis:
            fail(f"block {b}: in/out axes disagree with its layers")
        if not 0 <= block.mid_axis < n_axes:
            fail(f"block {b}: mid_axis out of range")
        if block.shortcut:
            if block.in_axis != block.out_axis:
                fail(f"block {b}: shortcut needs equal input and output axes")
            if any(t.layers[i].stride != 1 for i in idx):
                fail(f"block {b}: shortcut blocks cannot change resolution")

    grouped = set()
    for s, group in enumerate(t.stages):
        for b in group.blocks:
            if not 0 <= b < len(t.blocks):
                fail(f"stage {s}: block index {b} out of range")
            if b in grouped:
                fail(f"stage {s}: block {b} already belongs to a stage")
            grouped.add(b)
            if t.blocks[b].out_axis != group.axis:
                fail(f"stage {s}: block {b} does not output the stage axis")

    h, w = t.input_shape[1:]
    for layer in t.layers[:-1]:
        h, w = _conv_extent(h, layer.kernel[0], layer.stride, layer.pad), _conv_extent(w, layer.kernel[1], layer.stride, layer.pad)
        if h < 1 or w < 1:
            fail(f"layer {layer.name!r}: spatial extent collapses below 1")


def _conv_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def spatial_sizes(template: NetworkTemplate) -> list[tuple[int, int]]:
    """Output (H, W) of every layer; the classifier reports (1, 1)."""
    return list(template._sizes)


def _spatial_sizes(template: NetworkTemplate) -> list[tuple[int, int]]:
    h, w = template.input_shape[1:]
    out = []
    for layer in template.layers:
        if layer.kind == "linear":
            out.append((1, 1))
            continue
        h = _conv_extent(h, layer.kernel[0], layer.stride, layer.pad)
        w = _conv_extent(w, layer.kernel[1], layer.stride, layer.pad)
        out.append((h, w))
    return out


# ---------------------------------------------------------------- channel space

@functools.lru_cache(maxsize=None)
def axis_space(max_channels: int) -> AxisSpace:
    """Channel range for one axis: min 10% and step 3% of the max width, both at least 1."""
    return AxisSpace(max(1, int(0.1 * max_channels)), max_channels, max(1, int(0.03 * max_channels)))


def channel_space(template: NetworkTemplate) -> list[AxisSpace]:
    return [axis_space(a.max_channels) for a in template.axes]


@functools.lru_cache(maxsize=None)
def axis_grid(space: AxisSpace) -> tuple[int, ...]:
    """Allowed widths: ``min, min+step, ...`` up to ``max``, with ``max`` always included."""
    values = list(range(space.min, space.max + 1, space.step))
    if values[-1] != space.max:
        values.append(space.max)
    return tuple(values)


def gene_grids(template: NetworkTemplate) -> list[tuple[int, ...]]:
    return [axis_grid(s) for s in channel_space(template)]


def validate_gene(template: NetworkTemplate, gene, on_grid: bool = True) -> Gene:
    """Return ``gene`` as a tuple of ints or raise :class:`GeneError`.

    ``on_grid=False`` only checks ``1 <= c <= max`` per axis; cost models use
    it so that off-grid widths (such as uniform width multipliers) can be
    costed.
    """
    gene = tuple(int(c) for c in gene)
    if len(gene) != template.gene_length:
        raise GeneError(f"gene has {len(gene)} entries, template {template.name!r} has {template.gene_length} axes")
    bad = []
    for i, (c, axis) in enumerate(zip(gene, template.axes)):
        if on_grid:
            space = axis_space(axis.max_channels)
            if c not in axis_grid(space):
                bad.append(f"{axis.name}={c} not on grid {space.min}..{space.max} step {space.step}")
        elif not 1 <= c <= axis.max_channels:
            bad.append(f"{axis.name}={c} outside [1, {axis.max_channels}]")
    if bad:
        raise GeneError("invalid gene: " + "; ".join(bad))
    return gene


def sample_gene(template: NetworkTemplate, rng: np.random.Generator) -> Gene:
    """Draw every axis independently and uniformly from its grid."""
    return tuple(int(g[rng.integers(len(g))]) for g in gene_grids(template))


def min_gene(template: NetworkTemplate) -> Gene:
    return tuple(s.min for s in channel_space(template))


def uniform_gene(template: NetworkTemplate, ratio: float, snap: bool = True) -> Gene:
    """Every axis at ``int(ratio * max)``, snapped down onto the grid when ``snap``."""
    out = []
    for axis in template.axes:
        c = max(1, int(ratio * axis.max_channels + 1e-9))
        if snap:
            grid = axis_grid(axis_space(axis.max_channels))
            below = [v for v in grid if v <= c]
            c = below[-1] if below else grid[0]
        out.append(c)
    return tuple(out)


def resolve_channels(template: NetworkTemplate, gene) -> list[tuple[int, int]]:
    """(c_in, c_out) of every layer under ``gene`` (assumed validated)."""
    out = []
    for layer in template.layers:
        cin = template.input_shape[0] if layer.in_axis is None else gene[layer.in_axis]
        cout = template.num_classes if layer.out_axis is None else gene[layer.out_axis]
        out.append((cin, cout))
    return out


def encode(template: NetworkTemplate, out_channels) -> Gene:
    """Inverse of :func:`resolve_channels`: per-layer output widths to a gene."""
    if len(out_channels) != len(template.layers):
        raise GeneError(f"expected {len(template.layers)} layer widths, got {len(out_channels)}")
    gene: list[int | None] = [None] * template.gene_length
    for layer, c in zip(template.layers, out_channels):
        if layer.out_axis is None:
            continue
        prev = gene[layer.out_axis]
        if prev is not None and prev != c:
            raise GeneError(f"layer {layer.name!r} width {c} conflicts with tied width {prev}")
        gene[layer.out_axis] = int(c)
    return tuple(gene)


def decode_ratios(template: NetworkTemplate, gene) -> dict[str, tuple[float, ...]]:
    """Encoding input of every generated layer, keyed by layer name.

    Plain layers get ``(in_ratio, out_ratio)``; the fixed image input has
    ratio 1. Layers in a stage-grouped block get the block's
    ``(in_ratio, out_ratio, middle_ratio)``.
    """
    gene = validate_gene(template, gene)
    ratio = [c / a.max_channels for c, a in zip(gene, template.axes)]
    staged = template.staged_blocks()
    out = {}
    for i in template.generated_layers():
        layer = template.layers[i]
        b = template.block_of(i)
        if b is not None and b in staged:
            block = template.blocks[b]
            out[layer.name] = (ratio[block.in_axis], ratio[block.out_axis], ratio[block.mid_axis])
        else:
            rin = 1.0 if layer.in_axis is None else ratio[layer.in_axis]
            out[layer.name] = (rin, ratio[layer.out_axis])
    return out


def ratio_dim(template: NetworkTemplate, layer_index: int) -> int:
    b = template.block_of(layer_index)
    return 3 if b is not None and b in template.staged_blocks() else 2


def parse_gene(text: str, template: NetworkTemplate) -> Gene:
    """``"c1/c2/.../cl"`` or ``"full"``."""
    text = text.strip()
    if text == "full":
        return template.full_gene()
    try:
        values = tuple(int(v) for v in text.split("/"))
    except ValueError:
        raise GeneError(f"cannot parse gene {text!r}; expected c1/c2/.../cl or 'full'") from None
    return values


def format_gene(gene) -> str:
    return "/".join(str(int(c)) for c in gene)


# ---------------------------------------------------------------- builders

class _Builder:
    def __init__(self):
        self.axes: list[Axis] = []
        self.layers: list[LayerSpec] = []
        self.blocks: list[Block] = []
        self.stages: dict[int, list[int]] = {}
        self.cur: int | None = None

    def axis(self, name, channels, role="layer"):
        self.axes.append(Axis(name, int(channels), role))
        return len(self.axes) - 1

    def layer(self, name, kind, out_axis, kernel=1, stride=1, relu=True, down=False):
        pad = kernel // 2
        self.layers.append(
            LayerSpec(
                name=name,
                kind=kind,
                max_out_channels=self.axes[out_axis].max_channels,
                kernel=(kernel, kernel),
                stride=stride,
                pad=pad,
                in_axis=self.cur,
                out_axis=out_axis,
                relu=relu,
                is_downsampling=down,
            )
        )
        self.cur = out_axis
        return len(self.layers) - 1

    def finish(self, name, input_shape, num_classes):
        self.layers.append(
            LayerSpec("fc", "linear", num_classes, in_axis=self.cur, out_axis=None, relu=False)
        )
        stages = tuple(StageGroup(axis, tuple(bs)) for axis, bs in self.stages.items())
        return NetworkTemplate(
            name, tuple(input_shape), num_classes, tuple(self.axes), tuple(self.layers), tuple(self.blocks), stages
        )


def build_chain(name, input_shape, num_classes, stem: tuple[int, int], blocks: list[tuple[int, int]]) -> NetworkTemplate:
    """Depthwise-separable chain: a 3x3 stem conv, then (dw 3x3, pw 1x1) blocks.

    ``stem`` and each entry of ``blocks`` are ``(out_channels, stride)``;
    the block stride applies to its depthwise layer.
    """
    b = _Builder()
    ax = b.axis("b0", stem[0])
    b.layer("b0.conv", "conv", ax, kernel=3, stride=stem[1], down=stem[1] > 1)
    for k, (channels, stride) in enumerate(blocks, start=1):
        down = stride > 1
        prev = b.cur
        ax = b.axis(f"b{k}", channels)
        dw = b.layer(f"b{k}.dw", "depthwise", prev, kernel=3, stride=stride, down=down)
        pw = b.layer(f"b{k}.pw", "conv", ax, down=down)
        b.blocks.append(Block((dw, pw), prev, ax, ax))
    return b.finish(name, input_shape, num_classes)


def build_stages(
    name,
    input_shape,
    num_classes,
    stem: tuple[int, int],
    stages: list[tuple[int, int, int, int]],
    stem_blocks: tuple[int, int] | None = None,
    last_conv: int | None = None,
) -> NetworkTemplate:
    """Inverted-residual network with stage-tied shortcut channels.

    ``stem`` is ``(channels, stride)``; the stem output is the first stage
    axis. ``stem_blocks=(expansion, n)`` appends ``n`` residual blocks on that
    axis. Each ``stages`` entry ``(expansion, channels, n, stride)`` opens a
    new stage axis: its first block maps the previous stage width to the new
    one, the remaining ``n - 1`` blocks are residual.
    """
    b = _Builder()
    s0 = b.axis("stage0", stem[0], "stage")
    b.layer("stem", "conv", s0, kernel=3, stride=stem[1], down=stem[1] > 1)
    b.stages[s0] = []
    nblock = 0

    def bottleneck(stage_axis, t, stride):
        nonlocal nblock
        tag = f"blk{nblock}"
        in_axis = b.cur
        down = stride > 1
        first = len(b.layers)
        if t != 1:
            mid = b.axis(f"{tag}.mid", b.axes[in_axis].max_channels * t, "middle")
            b.layer(f"{tag}.expand", "conv", mid, down=down)
        else:
            mid = in_axis
        b.layer(f"{tag}.dw", "depthwise", mid, kernel=3, stride=stride, down=down)
        b.layer(f"{tag}.project", "conv", stage_axis, relu=False, down=down)
        block = Block(tuple(range(first, len(b.layers))), in_axis, stage_axis, mid, in_axis == stage_axis)
        b.blocks.append(block)
        b.stages[stage_axis].append(len(b.blocks) - 1)
        nblock += 1

    if stem_blocks:
        t, n = stem_blocks
        for _ in range(n):
            bottleneck(s0, t, 1)
    for k, (t, channels, n, stride) in enumerate(stages, start=1):
        ax = b.axis(f"stage{k}", channels, "stage")
        b.stages[ax] = []
        for j in range(n):
            bottleneck(ax, t, stride if j == 0 else 1)
    if last_conv:
        ax = b.axis("last", last_conv)
        b.layer("last.conv", "conv", ax)
    b.stages = {ax: bs for ax, bs in b.stages.items() if bs}
    return b.finish(name, input_shape, num_classes)


def _divisible(v: float, divisor: int = 8) -> int:
    new = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new < 0.9 * v:
        new += divisor
    return new


def _mobilenet_v2(width: float) -> NetworkTemplate:
    setting = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]
    stages = [(t, _divisible(c * width), n, s) for t, c, n, s in setting]
    tag = "mobilenet-v2-224" if width == 1.0 else f"mobilenet-v2-{width:g}-224"
    return build_stages(
        tag,
        (3, 224, 224),
        1000,
        stem=(_divisible(32 * width), 2),
        stages=stages,
        last_conv=_divisible(1280 * max(1.0, width)),
    )


def _builtins() -> dict[str, NetworkTemplate]:
    v1_blocks = [(64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2)] + [(512, 1)] * 5 + [(1024, 2), (1024, 1)]
    return {
        "chain-small": build_chain(
            "chain-small", (3, 32, 32), 10, stem=(16, 1), blocks=[(32, 1), (32, 2), (64, 1), (64, 2), (64, 1)]
        ),
        "stage-small": build_stages(
            "stage-small",
            (3, 32, 32),
            10,
            stem=(16, 1),
            stem_blocks=(2, 2),
            stages=[(2, 24, 2, 2), (2, 32, 2, 2)],
        ),
        "mobilenet-v1-224": build_chain("mobilenet-v1-224", (3, 224, 224), 1000, stem=(32, 2), blocks=v1_blocks),
        "mobilenet-v2-224": _mobilenet_v2(1.0),
        "mobilenet-v2-1.4-224": _mobilenet_v2(1.4),
    }


# Published multiply-add counts of the full-width cost templates.
REFERENCE_FLOPS = {
    "mobilenet-v1-224": 569_000_000,
    "mobilenet-v2-224": 300_000_000,
    "mobilenet-v2-1.4-224": 585_000_000,
}

COST_ONLY = frozenset(REFERENCE_FLOPS)


def builtin_templates() -> dict[str, NetworkTemplate]:
    return _builtins()


def get_template(name: str) -> NetworkTemplate:
    templates = _builtins()
    if name not in templates:
        raise KeyError(f"unknown template {name!r}; builtins: {', '.join(sorted(templates))}")
    return templates[name]


def adapt(template: NetworkTemplate, input_shape=None, num_classes=None) -> NetworkTemplate:
    """Same layers on a different input resolution and/or class count."""
    input_shape = tuple(input_shape or template.input_shape)
    num_classes = int(num_classes or template.num_classes)
    layers = list(template.layers)
    layers[-1] = replace(layers[-1], max_out_channels=num_classes)
    return NetworkTemplate(
        template.name, input_shape, num_classes, template.axes, tuple(layers), template.blocks, template.stages
    )


# ---------------------------------------------------------------- JSON

_SCHEMA = {
    "template": {"name", "input_shape", "num_classes", "axes", "layers", "blocks", "stages"},
    "axis": {f.name for f in fields(Axis)},
    "layer": {f.name for f in fields(LayerSpec)},
    "block": {f.name for f in fields(Block)},
    "stage": {f.name for f in fields(StageGroup)},
}


def template_to_dict(t: NetworkTemplate) -> dict:
    return {
        "name": t.name,
        "input_shape": list(t.input_shape),
        "num_classes": t.num_classes,
        "axes": [asdict(a) for a in t.axes],
        "layers": [{**asdict(layer), "kernel": list(layer.kernel)} for layer in t.layers],
        "blocks": [{**asdict(b), "layers": list(b.layers)} for b in t.blocks],
        "stages": [{**asdict(s), "blocks": list(s.blocks)} for s in t.stages],
    }


def _check_keys(obj, kind, required=()):
    if not isinstance(obj, dict):
        raise TemplateError(f"{kind}: expected an object, got {type(obj).__name__}")
    unknown = set(obj) - _SCHEMA[kind]
    if unknown:
        raise TemplateError(f"{kind}: unknown field(s) {sorted(unknown)}")
    missing = set(required) - set(obj)
    if missing:
        raise TemplateError(f"{kind}: missing field(s) {sorted(missing)}")


def template_from_dict(d: dict) -> NetworkTemplate:
    _check_keys(d, "template", ("name", "input_shape", "num_classes", "axes", "layers"))
    axes = []
    for a in d["axes"]:
        _check_keys(a, "axis", ("name", "max_channels"))
        axes.append(Axis(**a))
    layers = []
    for layer in d["layers"]:
        _check_keys(layer, "layer", ("name", "kind", "max_out_channels"))
        kw = dict(layer)
        if "kernel" in kw:
            kw["kernel"] = tuple(kw["kernel"])
        layers.append(LayerSpec(**kw))
    blocks = []
    for b in d.get("blocks", []):
        _check_keys(b, "block", ("layers", "in_axis", "out_axis", "mid_axis"))
        blocks.append(Block(**{**b, "layers": tuple(b["layers"])}))
    stages = []
    for s in d.get("stages", []):
        _check_keys(s, "stage", ("axis", "blocks"))
        stages.append(StageGroup(s["axis"], tuple(s["blocks"])))
    try:
        return NetworkTemplate(
            d["name"], tuple(d["input_shape"]), int(d["num_classes"]), tuple(axes), tuple(layers), tuple(blocks), tuple(stages)
        )
    except TypeError as exc:
        raise TemplateError(str(exc)) from None


def save_template(t: NetworkTemplate, path) -> None:
    Path(path).write_text(json.dumps(template_to_dict(t), indent=2))


def load_template(path) -> NetworkTemplate:
    return template_from_dict(json.loads(Path(path).read_text()))


def gene_space_size(template: NetworkTemplate) -> int:
    return math.prod(len(g) for g in gene_grids(template))
