"""Instantiate trainable 1-bit networks from a genotype at any depth/width
budget, and account their complexity.

FLOPs convention: one multiply-accumulate is one op; binary MACs count 1/64
of a float op (XNOR+popcount executes 64 taps per word).  Memory savings and
inference speed-up compare against the float twin -- the same topology with
every 1-bit conv replaced by a float conv of identical geometry and the
scaling machinery dropped.  When two variants are compared (e.g. convs
replaced by zeroise), the convention fixes the twin of the conv-bearing
baseline as the reference for both, since zeroise is not a float-domain
layer; pass ``baseline`` for that case.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ContractError, GeometryError
from .genotype import Genotype
from .layers import (
    AvgPool,
    BatchNorm2d,
    BinConv2d,
    BinSepConv2d,
    Conv2d,
    Cost,
    LayerCost,
    Linear,
    MaxPool,
    Module,
    Zeroise,
)
from .space import CONV_GEOMS, SEP_GEOMS, LayerType, SkipAdapt


@dataclass(frozen=True)
class NetworkSpec:
    genotype: Genotype
    cells: int
    channels: int
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)
    inter_cell_skip: bool = True  # search-era flag, not stored in the genotype

    def __post_init__(self):
        if self.cells < 3:
            raise ContractError(f"need >= 3 cells, got {self.cells}")
        if self.channels < 1:
            raise ContractError(f"channels must be >= 1, got {self.channels}")

    @property
    def reduction_cells(self) -> tuple[int, int]:
        return (self.cells // 3, (2 * self.cells) // 3)


def _make_op(op: LayerType, channels: int, stride: int,
             rng: np.random.Generator) -> Module:
    if op in CONV_GEOMS:
        k, dil = CONV_GEOMS[op]
        return BinConv2d(channels, channels, k, stride=stride, dilation=dil, rng=rng)
    if op in SEP_GEOMS:
        k, dil = SEP_GEOMS[op]
        return BinSepConv2d(channels, channels, k, stride=stride, dilation=dil, rng=rng)
    if op is LayerType.MAXPOOL_3x3:
        return MaxPool(stride)
    if op is LayerType.AVGPOOL_3x3:
        return AvgPool(stride)
    if op is LayerType.ZEROISE:
        return Zeroise(stride)
    raise ContractError(f"cannot instantiate op {op}")


class FixedCell(Module):
    """A discrete cell: every node sums its two genotype edges; output is
    the channelwise concat of all nodes plus the adapted inter-cell skip."""

    def __init__(self, nodes, c_prev_prev: int, c_prev: int, channels: int,
                 reduction: bool, prev_reduction: bool, inter_cell_skip: bool,
                 rng: np.random.Generator):
        self.reduction = reduction
        self.channels = channels
        self.prep0 = BinConv2d(c_prev_prev, channels, 1,
                               stride=2 if prev_reduction else 1,
                               padding=0, rng=rng)
        self.prep1 = BinConv2d(c_prev, channels, 1, padding=0, rng=rng)
        self.node_sources: list[tuple[int, int]] = []
        ops = []
        for node in nodes:
            for e in node.edges:
                stride = 2 if reduction and e.source < 2 else 1
                ops.append(_make_op(e.op, channels, stride, rng))
            self.node_sources.append(tuple(e.source for e in node.edges))
        self.ops = ops
        m = len(nodes)
        self.skip = (SkipAdapt(c_prev, m * channels, reduction)
                     if inter_cell_skip else None)
        self.out_channels = m * channels

    def forward(self, c_prev_prev: Var, c_prev: Var, training: bool) -> Var:
        states = [self.prep0.forward(c_prev_prev, training),
                  self.prep1.forward(c_prev, training)]
        k = 0
        for sources in self.node_sources:
            acc = None
            for src in sources:
                out = self.ops[k].forward(states[src], training)
                k += 1
                acc = out if acc is None else ad.add(acc, out)
            states.append(acc)
        out = ad.concat_channels(states[2:])
        if self.skip is not None:
            skip = self.skip.forward(c_prev, training)
            if skip.data.shape != out.data.shape:
                raise GeometryError(
                    f"skip adapter shape {skip.data.shape} != cell output "
                    f"{out.data.shape}"
                )
            out = ad.add(out, skip)
        return out

    def complexity(self, shape_prev_prev, shape_prev, sheet, prefix):
        def record(name, kind, cost):
            sheet.append(LayerCost(**vars(cost), name=prefix + name, kind=kind))

        c0, s0 = self.prep0.complexity(shape_prev_prev)
        record("prep0", "bin_conv_1x1", c0)
        c1, s1 = self.prep1.complexity(shape_prev)
        record("prep1", "bin_conv_1x1", c1)
        shapes = [s0, s1]
        k = 0
        for n, sources in enumerate(self.node_sources):
            out_shape = None
            for src in sources:
                op = self.ops[k]
                cost, oshape = op.complexity(shapes[src])
                record(f"node{n + 2}.edge{k}", type(op).__name__.lower(), cost)
                out_shape = oshape
                k += 1
            shapes.append(out_shape)
        c, h, w = shapes[2]
        out_shape = (self.out_channels, h, w)
        if self.skip is not None:
            cost, _ = self.skip.complexity(shape_prev)
            record("skip_adapt", "skip_adapt", cost)
        return out_shape


class FixedNet(Module):
    """stem -> stacked cells -> global average pool -> linear classifier."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.spec = spec
        cin = spec.input_shape[0]
        self.stem_conv = Conv2d(cin, spec.channels, 3, padding=1, rng=rng)
        self.stem_bn = BatchNorm2d(spec.channels)
        self.cells = []
        c_pp = c_p = spec.channels
        c_work = spec.channels
        prev_red = False
        for i in range(spec.cells):
            red = i in spec.reduction_cells
            if red:
                c_work *= 2
            cell = FixedCell(spec.genotype.normal if not red else spec.genotype.reduce,
                             c_pp, c_p, c_work, red, prev_red,
                             spec.inter_cell_skip, rng)
            self.cells.append(cell)
            c_pp, c_p = c_p, cell.out_channels
            prev_red = red
        self.classifier = Linear(c_p, spec.num_classes, rng=rng)

    def forward(self, x: Var, training: bool) -> Var:
        h = self.stem_bn.forward(self.stem_conv.forward(x, training), training)
        prev_prev = prev = h
        for i, cell in enumerate(self.cells):
            try:
                out = cell.forward(prev_prev, prev, training)
            except GeometryError as exc:
                raise GeometryError(f"cell {i}: {exc}") from exc
            prev_prev, prev = prev, out
        return self.classifier.forward(ad.global_avgpool(prev), training)

    def complexity(self) -> "FlopsReport":
        sheet: list[LayerCost] = []
        cin, h, w = self.spec.input_shape
        cost, shape = self.stem_conv.complexity((cin, h, w))
        sheet.append(LayerCost(**vars(cost), name="stem.conv", kind="conv2d"))
        cost, shape = self.stem_bn.complexity(shape)
        sheet.append(LayerCost(**vars(cost), name="stem.bn", kind="batchnorm"))
        shape_pp = shape_p = shape
        for i, cell in enumerate(self.cells):
            out_shape = cell.complexity(shape_pp, shape_p, sheet, f"cell{i}.")
            shape_pp, shape_p = shape_p, out_shape
        c, hh, ww = shape_p
        sheet.append(LayerCost(float_ops=c * hh * ww, name="global_avgpool",
                               kind="avgpool"))
        cost, _ = self.classifier.complexity(c)
        sheet.append(LayerCost(**vars(cost), name="classifier", kind="linear"))
        return FlopsReport.from_sheet(sheet)


@dataclass
class FlopsReport:
    float_ops: int
    scale_ops: int
    binary_ops: int
    params_float: int
    params_binary_bits: int
    beta_scalars: int
    breakdown: list[LayerCost] = field(repr=False, default_factory=list)

    @classmethod
    def from_sheet(cls, sheet):
        total = Cost()
        for rec in sheet:
            total += rec
        return cls(total.float_ops, total.scale_ops, total.binary_ops,
                   total.params_float, total.params_binary_bits,
                   total.beta_scalars, sheet)

    @property
    def effective_flops(self) -> float:
        return self.float_ops + self.scale_ops + self.binary_ops / 64.0

    @property
    def float_twin_flops(self) -> int:
        """The float twin runs every binary MAC as a float MAC and skips the
        scaling machinery."""
        return self.float_ops + self.binary_ops

    @property
    def float_twin_params(self) -> int:
        return self.params_float + self.params_binary_bits

    @property
    def packed_bytes(self) -> float:
        return (4 * self.params_float + self.params_binary_bits / 8
                + 4 * self.beta_scalars)

    def as_text(self) -> str:
        lines = [
            f"{'layer':<28} {'kind':<16} {'float':>12} {'scale':>10} "
            f"{'binary':>12} {'par_f':>10} {'par_bits':>10}",
        ]
        for r in self.breakdown:
            lines.append(
                f"{r.name:<28} {r.kind:<16} {r.float_ops:>12} {r.scale_ops:>10} "
                f"{r.binary_ops:>12} {r.params_float:>10} {r.params_binary_bits:>10}"
            )
        lines.append(
            f"{'TOTAL':<28} {'':<16} {self.float_ops:>12} {self.scale_ops:>10} "
            f"{self.binary_ops:>12} {self.params_float:>10} {self.params_binary_bits:>10}"
        )
        lines.append(f"effective FLOPs (binary/64): {self.effective_flops:,.0f}")
        lines.append(f"float twin FLOPs:            {self.float_twin_flops:,}")
        return "\n".join(lines)

    def as_csv(self) -> str:
        rows = ["layer,kind,float_ops,scale_ops,binary_ops,params_float,"
                "params_binary_bits,beta_scalars"]
        for r in self.breakdown:
            rows.append(f"{r.name},{r.kind},{r.float_ops},{r.scale_ops},"
                        f"{r.binary_ops},{r.params_float},{r.params_binary_bits},"
                        f"{r.beta_scalars}")
        return "\n".join(rows) + "\n"


def build_network(spec: NetworkSpec, seed: int = 0) -> FixedNet:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB17AE7]))
    return FixedNet(spec, rng)


def count_flops(spec: NetworkSpec) -> FlopsReport:
    return build_network(spec).complexity()


def savings_from_reports(own: FlopsReport, base: FlopsReport) -> float:
    packed_bits = (32 * own.params_float + own.params_binary_bits
                   + 32 * own.beta_scalars)
    return 32 * base.float_twin_params / packed_bits


def speedup_from_reports(own: FlopsReport, base: FlopsReport) -> float:
    return base.float_twin_flops / own.effective_flops


def memory_savings(spec: NetworkSpec, baseline: NetworkSpec | None = None) -> float:
    """32-bit float twin size over binarized size (1 bit per binary weight,
    32 per float parameter and per beta scale).  ``baseline`` pins the twin
    when comparing zeroise-substituted variants against a conv-bearing one."""
    own = count_flops(spec)
    base = count_flops(baseline) if baseline is not None else own
    return savings_from_reports(own, base)


def inference_speedup(spec: NetworkSpec, baseline: NetworkSpec | None = None) -> float:
    """Float-twin FLOPs over effective FLOPs (the 1/64 popcount convention)."""
    own = count_flops(spec)
    base = count_flops(baseline) if baseline is not None else own
    return speedup_from_reports(own, base)
