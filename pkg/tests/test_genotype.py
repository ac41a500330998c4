import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitnas.errors import ContractError, FormatError
from bitnas.genotype import (
    Genotype,
    GenotypeEdge,
    GenotypeNode,
    all_zeroise_genotype,
    derive,
    deserialize,
    op_proportion,
    select_op,
    serialize,
    to_dict,
)
from bitnas.space import ArchParams, CellTemplate, LayerType, SEARCH_SPACE, op_set

Z = SEARCH_SPACE.index(LayerType.ZEROISE)


def _probs(**named):
    """Build a 7-prob row: named ops get values, the rest split the
    remainder."""
    p = np.zeros(7)
    used = 0.0
    for key, val in named.items():
        p[SEARCH_SPACE.index(LayerType[key])] = val
        used += val
    free = [i for i in range(7) if p[i] == 0]
    for i in free:
        p[i] = (1 - used) / len(free)
    return p


def test_select_op_plain_argmax_prefers_zeroise_at_gamma_one():
    p = _probs(ZEROISE=0.40, BIN_CONV_3x3=0.35)
    assert select_op(p, 1.0) is LayerType.ZEROISE


def test_select_op_gamma_two_discounts_zeroise():
    p = _probs(ZEROISE=0.40, BIN_CONV_3x3=0.35)
    assert select_op(p, 2.0) is LayerType.BIN_CONV_3x3  # 0.40/2 = 0.20 < 0.35


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_select_op_huge_gamma_never_zeroise(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(7))
    assert select_op(p, 1e9) is not LayerType.ZEROISE


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_select_op_gamma_one_equals_plain_argmax(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(7))
    assert select_op(p, 1.0) is SEARCH_SPACE[int(np.argmax(p))]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
def test_select_op_invariant_to_common_scaling_of_non_zeroise(seed, c):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(7))
    scaled = p.copy()
    for i in range(7):
        if i != Z:
            scaled[i] *= c
    scaled /= scaled.sum()
    a = select_op(p, 1.0)
    b = select_op(scaled, 1.0)
    if a is not LayerType.ZEROISE and b is not LayerType.ZEROISE:
        assert a is b


def test_select_op_contracts():
    with pytest.raises(ContractError):
        select_op(np.full(7, 1 / 7), 0.0)
    with pytest.raises(ContractError):
        select_op(np.full(6, 1 / 6), 1.0)


def _random_params(seed):
    rng = np.random.default_rng(seed)
    params = ArchParams.zeros(CellTemplate(), SEARCH_SPACE)
    params.normal.data[...] = rng.standard_normal((14, 7))
    params.reduce.data[...] = rng.standard_normal((14, 7))
    return params


def test_derive_uniform_params_is_stable_tiebreak():
    params = ArchParams.zeros(CellTemplate(), SEARCH_SPACE)
    g1 = derive(params, 1.0)
    g2 = derive(params, 1.0)
    assert g1 == g2
    for node in g1.normal + g1.reduce:
        assert [e.source for e in node.edges] == [0, 1]
        for e in node.edges:
            assert e.op is LayerType.BIN_CONV_3x3  # lowest-index op on ties


def test_derive_zeroise_dominant_keeps_zeroise():
    params = ArchParams.zeros(CellTemplate(), SEARCH_SPACE)
    params.normal.data[:, Z] = 8.0
    params.reduce.data[:, Z] = 8.0
    g = derive(params, 1.0)
    assert all(e.op is LayerType.ZEROISE for e in g.all_edges())


@pytest.mark.parametrize("seed", range(8))
def test_derive_matches_bruteforce_reimplementation(seed):
    params = _random_params(seed)
    gamma = [0.5, 1.0, 2.0, 5.0][seed % 4]
    got = derive(params, gamma)

    probs = params.probabilities()
    for kind, cell in (("normal", got.normal), ("reduce", got.reduce)):
        table = probs[kind].astype(np.float64)
        e = 0
        for i in range(4):
            cand = []
            for j in range(2 + i):
                row = table[e]
                best, score = None, -1.0
                for o, op in enumerate(SEARCH_SPACE):
                    val = row[o] / gamma if op is LayerType.ZEROISE else row[o]
                    beats = val > score if op is not LayerType.ZEROISE else \
                        val > score  # strict inequality either way
                    if op is LayerType.ZEROISE:
                        continue
                    if row[o] > score:
                        best, score = op, row[o]
                z = row[Z] / gamma
                if z > score:
                    best, score = LayerType.ZEROISE, z
                cand.append((score, j, best))
                e += 1
            cand.sort(key=lambda t: (-t[0], t[1]))
            keep = sorted(cand[:2], key=lambda t: t[1])
            node = cell[i]
            assert [es.source for es in node.edges] == [j for _, j, _ in keep]
            assert [es.op for es in node.edges] == [op for _, _, op in keep]


def test_derive_pure_function():
    params = _random_params(42)
    assert derive(params, 1.3) == derive(params, 1.3)


# ---------------------------------------------------------------------------
# serialization


def test_roundtrip_identity():
    g = derive(_random_params(0), 1.0, seed=11, config_hash="deadbeef")
    assert deserialize(serialize(g)) == g


def test_schema_key_layout():
    g = all_zeroise_genotype()
    raw = json.loads(serialize(g))
    assert set(raw) == {"version", "gamma", "normal", "reduce", "provenance"}
    assert raw["normal"][0] == {
        "node": 2,
        "edges": [{"from": 0, "op": "zeroise"}, {"from": 1, "op": "zeroise"}],
    }


def test_unknown_top_level_field_rejected():
    raw = to_dict(all_zeroise_genotype())
    raw["extra"] = 1
    with pytest.raises(FormatError, match="unknown fields"):
        deserialize(json.dumps(raw))


def test_sepconv_rejected_without_keep_sepconv():
    raw = to_dict(all_zeroise_genotype())
    raw["normal"][0]["edges"][1]["op"] = "sep_conv_3x3"
    text = json.dumps(raw)
    with pytest.raises(FormatError, match=r"normal\[0\].edges\[1\].op"):
        deserialize(text)
    g = deserialize(text, allowed_ops=op_set(keep_sepconv=True))
    assert g.normal[0].edges[1].op is LayerType.SEP_CONV_3x3


def test_bad_version_and_gamma_rejected():
    raw = to_dict(all_zeroise_genotype())
    raw["version"] = 2
    with pytest.raises(FormatError, match="version"):
        deserialize(json.dumps(raw))
    raw["version"] = 1
    raw["gamma"] = 0.0
    with pytest.raises(FormatError, match="gamma"):
        deserialize(json.dumps(raw))


def test_source_must_precede_node():
    raw = to_dict(all_zeroise_genotype())
    raw["reduce"][0]["edges"][0]["from"] = 2  # node 2 cannot feed itself
    with pytest.raises(FormatError, match=r"reduce\[0\].edges\[0\].from"):
        deserialize(json.dumps(raw))


def test_malformed_json_rejected():
    with pytest.raises(FormatError, match="not valid JSON"):
        deserialize("{nope")


# ---------------------------------------------------------------------------
# proportions


def test_op_proportion_all_zeroise():
    assert op_proportion(all_zeroise_genotype(), LayerType.ZEROISE) == 1.0


def test_op_proportion_two_sepconv_in_sixteen_edges():
    def node(i, op0, op1):
        return GenotypeNode(i, (GenotypeEdge(0, op0), GenotypeEdge(1, op1)))

    conv = LayerType.BIN_CONV_3x3
    sep = LayerType.SEP_CONV_3x3
    normal = (node(2, sep, conv), node(3, conv, conv),
              node(4, conv, conv), node(5, conv, conv))
    reduce = (node(2, sep, conv), node(3, conv, conv),
              node(4, conv, conv), node(5, conv, conv))
    g = Genotype(1, 1.0, normal, reduce)
    assert op_proportion(g, sep) == pytest.approx(0.125)  # 2 of 16 edges
