"""FLOPs and latency-table cost models, and the budget predicate used by the search.

FLOPs are multiply-adds of conv, depthwise and linear layers. BN, relu,
pooling and biases are free.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .netdef import NetworkTemplate, axis_grid, axis_space, resolve_channels, spatial_sizes, validate_gene


def layer_flops(template: NetworkTemplate, index: int, c_in: int, c_out: int, hw: tuple[int, int] | None = None) -> int:
    layer = template.layers[index]
    if layer.kind == "linear":
        return c_in * c_out
    ho, wo = hw if hw is not None else spatial_sizes(template)[index]
    kh, kw = layer.kernel
    if layer.kind == "depthwise":
        return c_out * kh * kw * ho * wo
    return c_out * c_in * kh * kw * ho * wo


def per_layer_flops(template: NetworkTemplate, gene) -> list[int]:
    gene = validate_gene(template, gene, on_grid=False)
    sizes = spatial_sizes(template)
    return [
        layer_flops(template, i, cin, cout, sizes[i])
        for i, (cin, cout) in enumerate(resolve_channels(template, gene))
    ]


def _flops_terms(template: NetworkTemplate) -> list[tuple]:
    # (in_axis, out_axis, fixed_in, fixed_out, coefficient, uses_cin), cached on the template
    terms = template.__dict__.get("_flops_terms")
    if terms is None:
        terms = []
        for layer, (ho, wo) in zip(template.layers, spatial_sizes(template)):
            coeff = 1 if layer.kind == "linear" else layer.kernel[0] * layer.kernel[1] * ho * wo
            terms.append((layer.in_axis, layer.out_axis, template.input_shape[0], template.num_classes,
                          coeff, layer.kind != "depthwise"))
        object.__setattr__(template, "_flops_terms", terms)
    return terms


def flops(template: NetworkTemplate, gene) -> int:
    """Total multiply-adds of the network pruned to ``gene``."""
    gene = validate_gene(template, gene, on_grid=False)
    total = 0
    for ia, oa, cin0, cout0, coeff, uses_cin in _flops_terms(template):
        cout = cout0 if oa is None else gene[oa]
        if uses_cin:
            total += coeff * cout * (cin0 if ia is None else gene[ia])
        else:
            total += coeff * cout
    return total


class LatencyTableError(ValueError):
    pass


@dataclass(frozen=True)
class LatencyTable:
    """Per-layer execution time in microseconds, keyed ``(layer_id, c_in, c_out)``."""

    entries: dict

    def __post_init__(self):
        for key, us in self.entries.items():
            if not (isinstance(us, float) and math.isfinite(us) and us >= 0):
                raise LatencyTableError(f"entry {key} has invalid latency {us!r}")

    def lookup(self, layer_id: int, c_in: int, c_out: int) -> float:
        try:
            return self.entries[(layer_id, c_in, c_out)]
        except KeyError:
            raise LatencyTableError(
                f"latency table has no entry for layer_id={layer_id}, c_in={c_in}, c_out={c_out}"
            ) from None

    def scaled(self, k: float) -> "LatencyTable":
        return LatencyTable({key: us * k for key, us in self.entries.items()})

    def check_covers(self, template: NetworkTemplate) -> None:
        for key in grid_points(template):
            if key not in self.entries:
                raise LatencyTableError(f"latency table misses grid point layer_id={key[0]}, c_in={key[1]}, c_out={key[2]}")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer_id", "c_in", "c_out", "us"])
            for (lid, cin, cout), us in sorted(self.entries.items()):
                w.writerow([lid, cin, cout, repr(us)])

    @classmethod
    def from_csv(cls, path) -> "LatencyTable":
        entries = {}
        with open(path, newline="") as fh:
            rows = csv.reader(fh)
            header = next(rows, None)
            if header != ["layer_id", "c_in", "c_out", "us"]:
                raise LatencyTableError(f"{path}: header must be layer_id,c_in,c_out,us, got {header}")
            for lineno, row in enumerate(rows, start=2):
                if len(row) != 4:
                    raise LatencyTableError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
                try:
                    key = (int(row[0]), int(row[1]), int(row[2]))
                    us = float(row[3])
                except ValueError:
                    raise LatencyTableError(f"{path}:{lineno}: malformed row {row}") from None
                if key in entries:
                    raise LatencyTableError(f"{path}:{lineno}: duplicate key {key}")
                entries[key] = us
        return cls(entries)


def grid_points(template: NetworkTemplate) -> list[tuple[int, int, int]]:
    """Every (layer_id, c_in, c_out) reachable by an on-grid gene."""
    grids = [axis_grid(axis_space(a.max_channels)) for a in template.axes]
    points = []
    for i, layer in enumerate(template.layers):
        ins = (template.input_shape[0],) if layer.in_axis is None else grids[layer.in_axis]
        if layer.kind == "depthwise":
            points.extend((i, c, c) for c in ins)
            continue
        outs = (template.num_classes,) if layer.out_axis is None else grids[layer.out_axis]
        points.extend((i, cin, cout) for cin in ins for cout in outs)
    return points


def latency(template: NetworkTemplate, gene, table: LatencyTable) -> float:
    """Sum of per-layer table entries (exact lookup, correctly rounded sum)."""
    gene = validate_gene(template, gene, on_grid=False)
    return math.fsum(table.lookup(i, cin, cout) for i, (cin, cout) in enumerate(resolve_channels(template, gene)))


def synth_table(
    template: NetworkTemplate, a: float = 0.0, b: float = 1e-6, noise: float = 0.0, seed: int | None = None
) -> LatencyTable:
    """Synthetic table ``a + b * layer_flops`` per grid point.

    ``noise`` adds a seeded multiplicative perturbation ``(1 + noise * N(0,1))``,
    clipped at zero.
    """
    rng = np.random.default_rng(seed)
    sizes = spatial_sizes(template)
    entries = {}
    for lid, cin, cout in grid_points(template):
        us = a + b * layer_flops(template, lid, cin, cout, sizes[lid])
        if noise:
            us = max(0.0, us * (1.0 + noise * rng.standard_normal()))
        entries[(lid, cin, cout)] = float(us)
    return LatencyTable(entries)


@dataclass(frozen=True)
class Constraint:
    """Strict budget ``cost < budget``; FLOPs in multiply-adds, latency in microseconds."""

    kind: str
    budget: float
    table: LatencyTable | None = None

    def __post_init__(self):
        if self.kind not in ("flops", "latency"):
            raise ValueError(f"constraint kind must be 'flops' or 'latency', got {self.kind!r}")
        if not self.budget > 0:
            raise ValueError(f"constraint budget must be positive, got {self.budget}")
        if self.kind == "latency" and self.table is None:
            raise ValueError("latency constraint needs a latency table")

    def cost(self, template: NetworkTemplate, gene) -> float:
        if self.kind == "flops":
            return flops(template, gene)
        return latency(template, gene, self.table)

    def __str__(self):
        unit = "MACs" if self.kind == "flops" else "us"
        return f"{self.kind} < {self.budget:g} {unit}"


def satisfies(template: NetworkTemplate, gene, constraint: Constraint | None) -> bool:
    if constraint is None:
        return True
    return constraint.cost(template, gene) < constraint.budget


def parse_constraint(text: str) -> Constraint:
    """``flops:<N>`` or ``latency:<table.csv>:<us>``; ``N`` accepts ``1e9`` and ``10^9``."""
    kind, _, rest = text.partition(":")

    def number(s):
        s = s.strip()
        if "^" in s:
            base, _, exp = s.partition("^")
            return float(base) ** float(exp)
        return float(s)

    try:
        if kind == "flops":
            return Constraint("flops", number(rest))
        if kind == "latency":
            path, _, budget = rest.rpartition(":")
            if not path:
                raise ValueError
            return Constraint("latency", number(budget), LatencyTable.from_csv(Path(path)))
    except ValueError as exc:
        if isinstance(exc, LatencyTableError):
            raise
        raise ValueError(f"cannot parse constraint {text!r}; expected flops:<N> or latency:<file>:<us>") from None
    raise ValueError(f"unknown constraint kind {kind!r}; expected flops or latency")
