"""The binary search space: seven layer types, continuously relaxed edges,
and the cell template with inter-cell skip connections.

A cell is a small DAG: two inputs (the previous two cell outputs), M
intermediate nodes each receiving one edge from every earlier state, and a
channelwise concat of the intermediate nodes as output.  During search every
edge is a softmax-weighted mix over the op set; the searched network adds a
parameter-free skip from the previous cell's output to the cell output so
gradients can bypass the quantization noise accumulated inside cells.

Implementation note: search-cell batchnorms are affine-free, so every conv
op fed by the same source state sees the same signed activation.  The cell
exploits that by signing each source once and running all filter banks that
share a patch geometry as a single grouped matmul; ``MixedEdge`` is the
plain one-edge equivalent used by tests and the op-level contract.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Var
from .binary import (
    abs_channel_mean,
    conv_pad_for,
    k_map_from_abs_mean,
    pad_spatial,
    scaled_sign_conv,
    scaled_sign_depthwise_conv,
    sign_ste,
    sign_ste_nhwc,
)
from .errors import ContractError, GeometryError
from .layers import (
    BatchNorm2d,
    BinConv2d,
    Conv2d,
    Cost,
    Linear,
    Module,
    he_init,
    zeroise_forward,
)


class LayerType(Enum):
    BIN_CONV_3x3 = "bin_conv_3x3"
    BIN_CONV_5x5 = "bin_conv_5x5"
    BIN_DIL_CONV_3x3 = "bin_dil_conv_3x3"
    BIN_DIL_CONV_5x5 = "bin_dil_conv_5x5"
    MAXPOOL_3x3 = "max_pool_3x3"
    AVGPOOL_3x3 = "avg_pool_3x3"
    ZEROISE = "zeroise"
    # analysis / keep-sepconv ablation only, not part of the default space
    SEP_CONV_3x3 = "sep_conv_3x3"
    SEP_CONV_5x5 = "sep_conv_5x5"


SEARCH_SPACE: tuple[LayerType, ...] = (
    LayerType.BIN_CONV_3x3,
    LayerType.BIN_CONV_5x5,
    LayerType.BIN_DIL_CONV_3x3,
    LayerType.BIN_DIL_CONV_5x5,
    LayerType.MAXPOOL_3x3,
    LayerType.AVGPOOL_3x3,
    LayerType.ZEROISE,
)

# (kernel, dilation) of the dense binary convs
CONV_GEOMS = {
    LayerType.BIN_CONV_3x3: (3, 1),
    LayerType.BIN_CONV_5x5: (5, 1),
    LayerType.BIN_DIL_CONV_3x3: (3, 2),
    LayerType.BIN_DIL_CONV_5x5: (5, 2),
}
SEP_GEOMS = {
    LayerType.SEP_CONV_3x3: (3, 1),
    LayerType.SEP_CONV_5x5: (5, 1),
}

PARAMETERIZED = frozenset(CONV_GEOMS) | frozenset(SEP_GEOMS)


def is_parameterized(op: LayerType) -> bool:
    return op in PARAMETERIZED


def op_set(
    no_zeroise: bool = False,
    no_dilated: bool = False,
    keep_sepconv: bool = False,
) -> tuple[LayerType, ...]:
    """The op universe after ablation flags; order is the table column order."""
    ops = [op for op in SEARCH_SPACE]
    if no_dilated:
        ops = [op for op in ops if op not in
               (LayerType.BIN_DIL_CONV_3x3, LayerType.BIN_DIL_CONV_5x5)]
    if no_zeroise:
        ops = [op for op in ops if op is not LayerType.ZEROISE]
    if keep_sepconv:
        ops += [LayerType.SEP_CONV_3x3, LayerType.SEP_CONV_5x5]
    if not ops:
        raise ContractError("ablation flags removed every op from the space")
    return tuple(ops)


@dataclass(frozen=True)
class CellTemplate:
    """Wiring of one cell: M intermediate nodes, full in-DAG connectivity,
    concat output, optional inter-cell skip."""

    num_intermediate_nodes: int = 4
    inter_cell_skip: bool = True

    @property
    def edge_count(self) -> int:
        m = self.num_intermediate_nodes
        return sum(2 + i for i in range(m))

    def edges(self):
        """Yields (edge_index, source_state, target_node) in canonical order:
        states 0/1 are the two cell inputs, node i sits at state 2+i."""
        e = 0
        for i in range(self.num_intermediate_nodes):
            for j in range(2 + i):
                yield e, j, 2 + i
                e += 1


@dataclass
class ArchParams:
    """Per-edge architecture parameters for the two cell kinds.

    ``probabilities()`` returns the row-softmax tables p used by both the
    search objective and genotype derivation.
    """

    normal: Parameter
    reduce: Parameter
    ops: tuple[LayerType, ...]

    @classmethod
    def zeros(cls, template: CellTemplate, ops: tuple[LayerType, ...]):
        e = template.edge_count
        return cls(
            normal=Parameter(np.zeros((e, len(ops)), np.float32), name="arch.normal"),
            reduce=Parameter(np.zeros((e, len(ops)), np.float32), name="arch.reduce"),
            ops=ops,
        )

    def tables(self) -> list[tuple[str, Parameter]]:
        return [("normal", self.normal), ("reduce", self.reduce)]

    def probabilities(self) -> dict[str, np.ndarray]:
        out = {}
        for name, table in self.tables():
            z = table.data - table.data.max(axis=1, keepdims=True)
            e = np.exp(z)
            out[name] = e / e.sum(axis=1, keepdims=True)
        return out


class EdgeOpWeights(Module):
    """The learnable state of one edge: a master weight tensor per conv-type
    op (plus a mid batchnorm for separable ops).  Pooling and zeroise entries
    own nothing, which is what makes them parameter-free."""

    def __init__(self, channels: int, ops, rng: np.random.Generator,
                 bn_affine: bool = False):
        for op in ops:
            if op in CONV_GEOMS:
                k, _ = CONV_GEOMS[op]
                setattr(self, "w_" + op.value,
                        Parameter(he_init(rng, (channels, channels, k, k),
                                          channels * k * k)))
            elif op in SEP_GEOMS:
                k, _ = SEP_GEOMS[op]
                setattr(self, "wd_" + op.value,
                        Parameter(he_init(rng, (channels, k, k), k * k)))
                setattr(self, "wp_" + op.value,
                        Parameter(he_init(rng, (channels, channels, 1, 1), channels)))
                setattr(self, "bnmid_" + op.value, BatchNorm2d(channels, bn_affine))

    def conv_weight(self, op: LayerType) -> Parameter:
        return getattr(self, "w_" + op.value)

    def conv_weights(self):
        return [p for name, p in self.named_parameters()
                if name.split(".")[-1].startswith(("w_", "wd_", "wp_"))]

    def sep_parts(self, op: LayerType):
        return (
            getattr(self, "wd_" + op.value),
            getattr(self, "wp_" + op.value),
            getattr(self, "bnmid_" + op.value),
        )


def _sep_edge_forward(parts, h: Var, d_map: np.ndarray, op: LayerType,
                      stride: int, training: bool) -> Var:
    """Separable op on a normalized source: sign -> depthwise 1-bit conv ->
    BN -> sign -> pointwise 1-bit conv."""
    wd, wp, bn_mid = parts
    k, dil = SEP_GEOMS[op]
    pad = dil * (k - 1) // 2
    k1 = k_map_from_abs_mean(d_map, (k, k), stride, dil, pad)
    sp = pad_spatial(sign_ste(h), pad, value=1.0)
    mid = scaled_sign_depthwise_conv(sp, wd, k1, (k, k), stride, dil)
    h2 = bn_mid.forward(mid, training)
    k2 = k_map_from_abs_mean(abs_channel_mean(h2.data), (1, 1), 1, 1, 0)
    return scaled_sign_conv(sign_ste_nhwc(h2, 0), [wp], k2, (1, 1), 1, 1)


class MixedEdge(Module):
    """One continuously relaxed edge: softmax-weighted sum of every op.

    The straightforward per-op evaluation; cells use the grouped equivalent
    but must produce the same numbers (tested).
    """

    def __init__(self, channels: int, stride: int, ops, rng: np.random.Generator):
        self.ops = tuple(ops)
        self.stride = stride
        self.bn = BatchNorm2d(channels, affine=False)
        self.weights = EdgeOpWeights(channels, self.ops, rng)

    def op_outputs(self, x: Var, training: bool) -> list[Var | None]:
        """Outputs aligned with self.ops; zeroise is None (an exact zero)."""
        conv_present = [op for op in self.ops if op in CONV_GEOMS]
        needs_sign = bool(conv_present) or any(op in SEP_GEOMS for op in self.ops)
        if needs_sign:
            h = self.bn.forward(x, training)
            d_map = abs_channel_mean(h.data)
            stage_pad = conv_pad_for(CONV_GEOMS[op] for op in conv_present)
            s = sign_ste_nhwc(h, stage_pad)
        outs: list[Var | None] = []
        for op in self.ops:
            if op in CONV_GEOMS:
                k, dil = CONV_GEOMS[op]
                pad = dil * (k - 1) // 2
                k_map = k_map_from_abs_mean(d_map, (k, k), self.stride, dil, pad)
                outs.append(scaled_sign_conv(
                    s, [self.weights.conv_weight(op)], k_map,
                    (k, k), self.stride, dil, origin=stage_pad - pad))
            elif op in SEP_GEOMS:
                outs.append(_sep_edge_forward(
                    self.weights.sep_parts(op), h, d_map, op, self.stride, training))
            elif op is LayerType.MAXPOOL_3x3:
                outs.append(ad.maxpool2d(x, 3, self.stride, 1))
            elif op is LayerType.AVGPOOL_3x3:
                outs.append(ad.avgpool2d(x, 3, self.stride, 1))
            elif op is LayerType.ZEROISE:
                outs.append(None)
            else:
                raise ContractError(f"unknown op {op}")
        return outs


def mixed_edge_forward(x: Var, alpha_row: Var, edge: MixedEdge,
                       training: bool = True) -> Var:
    """sum_o softmax(alpha_row)_o * op_o(x); gradients reach both alpha and
    the op weights."""
    if alpha_row.data.shape != (len(edge.ops),):
        raise GeometryError(
            f"alpha row has {alpha_row.data.shape}, expected ({len(edge.ops)},)"
        )
    p = ad.softmax(ad.reshape(alpha_row, (1, -1)), axis=-1)
    outs = edge.op_outputs(x, training)
    return ad.weighted_sum(p, 0, outs)


class SkipAdapt(Module):
    """Parameter-free shape adapter for the inter-cell skip: 2x2 average
    pool (stride 2) on reduction cells, then zero channel padding up to the
    cell's concat width."""

    def __init__(self, in_channels: int, out_channels: int, reduction: bool):
        if out_channels < in_channels:
            raise GeometryError(
                f"skip adapter cannot shrink {in_channels} -> {out_channels} channels"
            )
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.reduction = reduction

    def forward(self, x: Var, training: bool) -> Var:
        y = ad.avgpool2d(x, 2, 2, 0) if self.reduction else x
        return ad.pad_channels(y, self.out_channels)

    def complexity(self, in_shape):
        c, h, w = in_shape
        if self.reduction:
            h, w = h // 2, w // 2
            return Cost(float_ops=c * h * w * 4), (self.out_channels, h, w)
        return Cost(), (self.out_channels, h, w)


class SearchCell(Module):
    """One relaxed cell.  Source states are signed once (affine-free BN) and
    all conv banks sharing a patch geometry run as one grouped matmul."""

    def __init__(self, c_prev_prev: int, c_prev: int, channels: int,
                 reduction: bool, prev_reduction: bool, template: CellTemplate,
                 ops, rng: np.random.Generator):
        self.template = template
        self.reduction = reduction
        self.ops = tuple(ops)
        self.channels = channels
        m = template.num_intermediate_nodes
        self.prep0 = BinConv2d(c_prev_prev, channels, 1,
                               stride=2 if prev_reduction else 1,
                               padding=0, rng=rng, bn_affine=False)
        self.prep1 = BinConv2d(c_prev, channels, 1, padding=0, rng=rng,
                               bn_affine=False)
        self.source_bns = [BatchNorm2d(channels, affine=False) for _ in range(m + 1)]
        self.edges = [EdgeOpWeights(channels, self.ops, rng)
                      for _ in range(template.edge_count)]
        self.skip = (
            SkipAdapt(c_prev, m * channels, reduction)
            if template.inter_cell_skip else None
        )
        self.out_channels = m * channels

    def _edge_stride(self, source: int) -> int:
        return 2 if self.reduction and source < 2 else 1

    def forward(self, c_prev_prev: Var, c_prev: Var, table: Var,
                training: bool, forced_ops: list[LayerType] | None = None) -> Var:
        """``table`` holds raw per-edge alphas; each row is softmaxed here to
        the mixing distribution."""
        m = self.template.num_intermediate_nodes
        probs = ad.softmax(table, axis=-1) if forced_ops is None else table
        edges_by_source: dict[int, list[tuple[int, int]]] = {}
        for e, j, i in self.template.edges():
            edges_by_source.setdefault(j, []).append((e, i))

        states = [self.prep0.forward(c_prev_prev, training),
                  self.prep1.forward(c_prev, training)]
        node_terms: dict[int, list[Var]] = {2 + i: [] for i in range(m)}

        for j in range(m + 1):
            x = states[j]
            out_edges = edges_by_source.get(j, [])
            if out_edges:
                stride = self._edge_stride(j)
                edge_ids = [e for e, _ in out_edges]
                outs = self._source_op_outputs(j, x, stride, edge_ids, training,
                                               forced_ops)
                for (e, i) in out_edges:
                    if forced_ops is not None:
                        term = outs[e]
                        if term is not None:
                            node_terms[i].append(term)
                    else:
                        node_terms[i].append(ad.weighted_sum(probs, e, outs[e]))
            if 1 <= j <= m:  # node j+1 has now seen all of its sources
                terms = node_terms[j + 1]
                if terms:
                    node = terms[0]
                    for t in terms[1:]:
                        node = ad.add(node, t)
                else:  # every incoming edge forced to zeroise
                    node = zeroise_forward(states[1], self._edge_stride(0))
                states.append(node)

        out = ad.concat_channels(states[2:])
        if self.skip is not None:
            skip = self.skip.forward(c_prev, training)
            if skip.data.shape != out.data.shape:
                raise GeometryError(
                    f"skip adapter produced {skip.data.shape}, cell output is "
                    f"{out.data.shape}"
                )
            out = ad.add(out, skip)
        return out

    def _source_op_outputs(self, j, x, stride, edge_ids, training, forced_ops):
        """Op outputs for every outgoing edge of source j.

        Relaxed mode: returns {edge: [Var|None per op]} with conv ops of all
        edges sharing one grouped matmul per (kernel, dilation) geometry.
        Forced mode: returns {edge: Var|None} for the single chosen op.
        """
        conv_ops = [op for op in self.ops if op in CONV_GEOMS]
        sep_ops = [op for op in self.ops if op in SEP_GEOMS]
        wanted: dict[int, set] = {}
        if forced_ops is None:
            for e in edge_ids:
                wanted[e] = set(self.ops)
        else:
            for e in edge_ids:
                wanted[e] = {forced_ops[e]}

        need_sign = any(
            op in CONV_GEOMS or op in SEP_GEOMS for e in edge_ids for op in wanted[e]
        )
        per_edge_conv: dict[int, dict[LayerType, Var]] = {e: {} for e in edge_ids}
        if need_sign:
            h = self.source_bns[j].forward(x, training)
            d_map = abs_channel_mean(h.data)
            stage_pad = conv_pad_for(
                CONV_GEOMS[op] for op in conv_ops
                if any(op in wanted[e] for e in edge_ids)
            )
            s = sign_ste_nhwc(h, stage_pad)
            for op in conv_ops:
                group = [e for e in edge_ids if op in wanted[e]]
                if not group:
                    continue
                k, dil = CONV_GEOMS[op]
                pad = dil * (k - 1) // 2
                k_map = k_map_from_abs_mean(d_map, (k, k), stride, dil, pad)
                bank = scaled_sign_conv(
                    s, [self.edges[e].conv_weight(op) for e in group],
                    k_map, (k, k), stride, dil, origin=stage_pad - pad,
                )
                c = self.channels
                for slot, e in enumerate(group):
                    per_edge_conv[e][op] = _slice_channels(bank, slot * c, (slot + 1) * c)
            for op in sep_ops:
                for e in edge_ids:
                    if op in wanted[e]:
                        per_edge_conv[e][op] = _sep_edge_forward(
                            self.edges[e].sep_parts(op), h, d_map, op, stride, training
                        )

        pool_cache: dict[LayerType, Var] = {}

        def pooled(op):
            if op not in pool_cache:
                if op is LayerType.MAXPOOL_3x3:
                    pool_cache[op] = ad.maxpool2d(x, 3, stride, 1)
                else:
                    pool_cache[op] = ad.avgpool2d(x, 3, stride, 1)
            return pool_cache[op]

        def one(e, op):
            if op in CONV_GEOMS or op in SEP_GEOMS:
                return per_edge_conv[e][op]
            if op is LayerType.ZEROISE:
                return None
            return pooled(op)

        if forced_ops is None:
            return {e: [one(e, op) for op in self.ops] for e in edge_ids}
        return {e: one(e, forced_ops[e]) for e in edge_ids}


def _slice_channels(x: Var, lo: int, hi: int) -> Var:
    out = np.ascontiguousarray(x.data[:, lo:hi])

    def vjp(g):
        full = np.zeros_like(x.data)
        full[:, lo:hi] = g
        return (full,)

    return Var(out, (x,), vjp)


class SuperNet(Module):
    """Relaxed search network: float stem, stacked search cells (channels
    double at the two reduction cells), global average pool and a float
    classifier.  The two arch tables live outside the module tree so that
    ``parameters()`` yields network weights only."""

    def __init__(self, cells: int, channels: int, num_classes: int = 10,
                 in_channels: int = 3, template: CellTemplate = CellTemplate(),
                 ops=SEARCH_SPACE, rng: np.random.Generator | None = None):
        if cells < 3:
            raise ContractError(f"supernet needs >= 3 cells, got {cells}")
        if channels < 1:
            raise ContractError(f"channels must be >= 1, got {channels}")
        rng = rng or np.random.default_rng(0)
        self.template = template
        self.ops = tuple(ops)
        self.stem_conv = Conv2d(in_channels, channels, 3, padding=1, rng=rng)
        self.stem_bn = BatchNorm2d(channels)
        self.reduction_cells = (cells // 3, (2 * cells) // 3)
        self.cells = []
        c_pp = c_p = channels
        c_work = channels
        prev_red = False
        for i in range(cells):
            red = i in self.reduction_cells
            if red:
                c_work *= 2
            cell = SearchCell(c_pp, c_p, c_work, red, prev_red, template,
                              self.ops, rng)
            self.cells.append(cell)
            c_pp, c_p = c_p, cell.out_channels
            prev_red = red
        self.classifier = Linear(c_p, num_classes, rng=rng)
        self.arch = ArchParams.zeros(template, self.ops)
        self._arch_ref = None  # keep ArchParams out of the reflective walk

    def arch_parameters(self) -> list[Parameter]:
        return [self.arch.normal, self.arch.reduce]

    def forward(self, x: Var, training: bool,
                normal_table: Var | None = None,
                reduce_table: Var | None = None,
                forced_ops: list[LayerType] | None = None) -> Var:
        normal = self.arch.normal if normal_table is None else normal_table
        reduce = self.arch.reduce if reduce_table is None else reduce_table
        h = self.stem_bn.forward(self.stem_conv.forward(x, training), training)
        prev_prev = prev = h
        for i, cell in enumerate(self.cells):
            table = reduce if cell.reduction else normal
            out = cell.forward(prev_prev, prev, table, training,
                               forced_ops=forced_ops)
            prev_prev, prev = prev, out
        pooled = ad.global_avgpool(prev)
        return self.classifier.forward(pooled, training)


def build_supernet(
    cells: int,
    channels: int,
    no_skip: bool = False,
    no_zeroise: bool = False,
    no_dilated: bool = False,
    keep_sepconv: bool = False,
    num_classes: int = 10,
    in_channels: int = 3,
    num_intermediate_nodes: int = 4,
    seed: int = 0,
) -> SuperNet:
    template = CellTemplate(num_intermediate_nodes, inter_cell_skip=not no_skip)
    ops = op_set(no_zeroise, no_dilated, keep_sepconv)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EA2C4]))
    return SuperNet(cells, channels, num_classes, in_channels, template, ops, rng)
