"""Discrete architecture derivation and its canonical JSON form.

An edge's op is chosen by comparing the zeroise probability, divided by the
transferability knob gamma, against the plain probabilities of every other
op: zeroise wins only when p_z / gamma strictly beats them all.  Each node
then keeps its two strongest incoming edges, where an edge's strength is the
quantity that won the comparison (p_z / gamma for zeroise edges, the chosen
op's probability otherwise).  Zeroise edges are kept as real layers in the
final network, never swapped for a runner-up.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError
from .space import ArchParams, CellTemplate, LayerType, SEARCH_SPACE

SCHEMA_VERSION = 1

_OP_BY_NAME = {op.value: op for op in LayerType}


@dataclass(frozen=True)
class GenotypeEdge:
    source: int  # state index: 0/1 are the cell inputs, 2+ intermediates
    op: LayerType


@dataclass(frozen=True)
class GenotypeNode:
    node: int
    edges: tuple[GenotypeEdge, GenotypeEdge]


@dataclass(frozen=True)
class Genotype:
    version: int
    gamma: float
    normal: tuple[GenotypeNode, ...]
    reduce: tuple[GenotypeNode, ...]
    seed: int = 0
    config_hash: str = ""

    @property
    def num_nodes(self) -> int:
        return len(self.normal)

    def all_edges(self):
        for cell in (self.normal, self.reduce):
            for node in cell:
                yield from node.edges


def select_op(edge_probs: np.ndarray, gamma: float,
              ops: tuple[LayerType, ...] = SEARCH_SPACE) -> LayerType:
    """Eq: p* = max[p_z / gamma, p_op_1, ..., p_op_n].

    Returns zeroise iff its discounted probability strictly exceeds every
    other op's; otherwise the argmax over non-zeroise ops with ties broken
    by the lowest op index.  With gamma = 1 this is a plain argmax (zeroise
    is the last index, so the strict comparison reproduces lowest-index
    tie-breaking).
    """
    if gamma <= 0:
        raise ContractError(f"gamma must be > 0, got {gamma}")
    probs = np.asarray(edge_probs, dtype=np.float64)
    if probs.shape != (len(ops),):
        raise ContractError(
            f"edge probabilities have shape {probs.shape}, expected ({len(ops)},)"
        )
    best_i, best_p = None, -1.0
    z_score = None
    for i, op in enumerate(ops):
        if op is LayerType.ZEROISE:
            z_score = probs[i] / gamma
        elif probs[i] > best_p:
            best_i, best_p = i, probs[i]
    if best_i is None:  # zeroise-only space cannot occur (op_set forbids it)
        return LayerType.ZEROISE
    if z_score is not None and z_score > best_p:
        return LayerType.ZEROISE
    return ops[best_i]


def _edge_strength(edge_probs: np.ndarray, chosen: LayerType, gamma: float,
                   ops: tuple[LayerType, ...]) -> float:
    i = ops.index(chosen)
    p = float(edge_probs[i])
    return p / gamma if chosen is LayerType.ZEROISE else p


def derive(params: ArchParams, gamma: float,
           template: CellTemplate = CellTemplate(),
           seed: int = 0, config_hash: str = "") -> Genotype:
    """Discretize searched parameters: pick each edge's op, then keep the two
    strongest incoming edges per node (ties: lowest source index)."""
    if gamma <= 0:
        raise ContractError(f"gamma must be > 0, got {gamma}")
    probs = params.probabilities()
    cells = {}
    for kind in ("normal", "reduce"):
        table = probs[kind]
        chosen = {}
        for e, j, i in template.edges():
            op = select_op(table[e], gamma, params.ops)
            strength = _edge_strength(table[e], op, gamma, params.ops)
            chosen.setdefault(i, []).append((strength, j, op))
        nodes = []
        for i in sorted(chosen):
            ranked = sorted(chosen[i], key=lambda t: (-t[0], t[1]))
            assert len(ranked) >= 2, "template guarantees >= 2 edges per node"
            picked = sorted(ranked[:2], key=lambda t: t[1])
            nodes.append(GenotypeNode(
                node=i,
                edges=tuple(GenotypeEdge(j, op) for _, j, op in picked),
            ))
        cells[kind] = tuple(nodes)
    return Genotype(SCHEMA_VERSION, float(gamma), cells["normal"],
                    cells["reduce"], seed=seed, config_hash=config_hash)


def op_proportion(g: Genotype, t: LayerType) -> float:
    """Fraction of kept edges (both cells) whose op is t."""
    edges = list(g.all_edges())
    return sum(1 for e in edges if e.op is t) / len(edges)


# ---------------------------------------------------------------------------
# canonical JSON


def to_dict(g: Genotype) -> dict:
    def cell(nodes):
        return [
            {"node": n.node,
             "edges": [{"from": e.source, "op": e.op.value} for e in n.edges]}
            for n in nodes
        ]

    return {
        "version": g.version,
        "gamma": g.gamma,
        "normal": cell(g.normal),
        "reduce": cell(g.reduce),
        "provenance": {"seed": g.seed, "config_hash": g.config_hash},
    }


def serialize(g: Genotype) -> str:
    return json.dumps(to_dict(g), sort_keys=True, separators=(",", ":"))


def _fail(path: str, msg: str):
    raise FormatError(f"genotype field {path}: {msg}")


def _parse_cell(raw, path: str, allowed: tuple[LayerType, ...]):
    if not isinstance(raw, list) or not raw:
        _fail(path, "must be a non-empty list of node records")
    nodes = []
    for idx, rec in enumerate(raw):
        here = f"{path}[{idx}]"
        if not isinstance(rec, dict):
            _fail(here, "must be an object")
        extra = set(rec) - {"node", "edges"}
        if extra:
            _fail(here, f"unknown fields {sorted(extra)}")
        node = rec.get("node")
        if node != idx + 2:
            _fail(f"{here}.node", f"expected {idx + 2}, got {node!r}")
        edges_raw = rec.get("edges")
        if not isinstance(edges_raw, list) or len(edges_raw) != 2:
            _fail(f"{here}.edges", "every node keeps exactly 2 edges")
        edges = []
        for k, er in enumerate(edges_raw):
            epath = f"{here}.edges[{k}]"
            if not isinstance(er, dict) or set(er) != {"from", "op"}:
                _fail(epath, 'must be {"from": int, "op": str}')
            src = er["from"]
            if not isinstance(src, int) or not 0 <= src < node:
                _fail(f"{epath}.from",
                      f"source must be a state index before node {node}, got {src!r}")
            opname = er["op"]
            op = _OP_BY_NAME.get(opname)
            if op is None or op not in allowed:
                _fail(f"{epath}.op",
                      f"{opname!r} is not in the searched op set "
                      f"({[o.value for o in allowed]})")
            edges.append(GenotypeEdge(src, op))
        nodes.append(GenotypeNode(node, tuple(edges)))
    return tuple(nodes)


def deserialize(text: str,
                allowed_ops: tuple[LayerType, ...] = SEARCH_SPACE) -> Genotype:
    """Parse and validate canonical genotype JSON.

    ``allowed_ops`` is the op universe the genotype may reference; pass the
    keep-sepconv set (see op_set) to accept separable convolutions.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"genotype is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise FormatError("genotype must be a JSON object")
    extra = set(raw) - {"version", "gamma", "normal", "reduce", "provenance"}
    if extra:
        _fail("$", f"unknown fields {sorted(extra)}")
    if raw.get("version") != SCHEMA_VERSION:
        _fail("version", f"expected {SCHEMA_VERSION}, got {raw.get('version')!r}")
    gamma = raw.get("gamma")
    if not isinstance(gamma, (int, float)) or gamma <= 0:
        _fail("gamma", f"must be a positive number, got {gamma!r}")
    prov = raw.get("provenance", {})
    if not isinstance(prov, dict) or set(prov) - {"seed", "config_hash"}:
        _fail("provenance", "must be an object with seed and config_hash only")
    normal = _parse_cell(raw.get("normal"), "normal", allowed_ops)
    reduce_ = _parse_cell(raw.get("reduce"), "reduce", allowed_ops)
    if len(normal) != len(reduce_):
        _fail("reduce", f"has {len(reduce_)} nodes but normal has {len(normal)}")
    return Genotype(SCHEMA_VERSION, float(gamma), normal, reduce_,
                    seed=int(prov.get("seed", 0)),
                    config_hash=str(prov.get("config_hash", "")))


def all_zeroise_genotype(num_nodes: int = 4, gamma: float = 1.0) -> Genotype:
    """Degenerate genotype used by the skip-connection probes."""
    def cell():
        return tuple(
            GenotypeNode(2 + i, (GenotypeEdge(0, LayerType.ZEROISE),
                                 GenotypeEdge(1, LayerType.ZEROISE)))
            for i in range(num_nodes)
        )

    return Genotype(SCHEMA_VERSION, gamma, cell(), cell())
