import numpy as np
import pytest

from causalmol import autodiff as ad
from causalmol.context import (ContextGraph, build_context_graph, check_context_graph, context_rows,
                               contextual_concat, encode_context)
from causalmol.encoder import EncoderConfig, MessageCounter
from causalmol.meta import Episode
from causalmol.model import ModelConfig, init_params
from causalmol.records import make_record


def _records(smiles):
    return {i: make_record(i, s) for i, s in enumerate(smiles)}


def _toy():
    recs = _records(["Oc1ccccc1", "Nc1ccccc1", "Oc1ccccc1"])
    ep = Episode(0, [(0, 1), (1, 0)], [(2, 1)], K=1)
    return recs, ep


def _params(d=4, layers=3, n_props=3):
    return init_params(ModelConfig(hidden_dim=d, context_layers=layers), n_props, seed=0)


def test_small_toy_graph_counts():
    recs, ep = _toy()
    cg = build_context_graph(ep, recs)
    assert cg.counts == (3, 3, 1)
    assert cg.num_nodes == 7 and cg.num_edges == 9
    types = [t for _, _, t in cg.edges]
    assert types.count("membership") == 6
    assert types.count("positive_label") == 1 and types.count("negative_label") == 1
    assert types.count("unknown_label") == 1


def test_shared_fragment_dedup():
    recs = _records(["Oc1ccccc1", "OC1CCCCC1"])
    ep = Episode(0, [(0, 1), (1, 0)], [], K=1)
    cg = build_context_graph(ep, recs)
    n_mol, n_frag, n_prop = cg.counts
    f1, f2 = len(recs[0].fragments), len(recs[1].fragments)
    assert n_mol == 2 and n_prop == 1
    assert 1 <= n_frag < f1 + f2 and n_frag == 3  # OH shared, two different rings
    assert sum(t == "membership" for _, _, t in cg.edges) == f1 + f2


def test_no_shared_fragments_sums_counts():
    recs = _records(["Oc1ccccc1", "NC1CCCCC1"])
    cg = build_context_graph(Episode(0, [(0, 1), (1, 0)], [], K=1), recs)
    assert cg.counts[1] == len(recs[0].fragments) + len(recs[1].fragments)


def test_query_labels_never_leak():
    recs, ep = _toy()
    for query_label in (0, 1):
        ep2 = Episode(0, ep.support, [(2, query_label)], K=1)
        assert build_context_graph(ep2, recs).to_dict() == build_context_graph(ep, recs).to_dict()


def test_auxiliary_properties_get_label_edges():
    recs, ep = _toy()
    table = {(0, 1): 1.0, (1, 1): float("nan"), (2, 1): 0.0}
    cg = build_context_graph(ep, recs, auxiliary_properties=[1], aux_label=lambda m, p: table[(m, p)])
    aux = cg.property_index[1]
    assert sorted((s, t) for s, d, t in cg.edges if d == aux) == [(0, "positive_label"), (2, "negative_label")]


def test_support_without_label_rejected():
    recs, _ = _toy()
    with pytest.raises(ValueError, match="no label"):
        build_context_graph(Episode(0, [(0, float("nan"))], [], K=1), recs)


def test_edge_type_discipline():
    recs, ep = _toy()
    cg = build_context_graph(ep, recs)
    f = next(iter(cg.fragment_index.values()))
    p = next(iter(cg.property_index.values()))
    bad_cases = [
        cg.edges + [(0, p, "membership")],
        cg.edges + [(0, f, "positive_label")],
        cg.edges + [(0, p, "similar_to")],
        [e for e in cg.edges if not (e[0] == 2 and e[2] == "membership")],
    ]
    for edges in bad_cases:
        with pytest.raises(ValueError):
            check_context_graph(ContextGraph(cg.node_types, cg.node_refs, edges, "", cg.fragment_features))


def test_message_count_on_seven_node_graph():
    recs, ep = _toy()
    cg = build_context_graph(ep, recs)
    params = _params(layers=3)
    c = MessageCounter()
    encode_context(cg, params, ad.constant(np.ones((3, 4))), EncoderConfig(3, 4), c)
    assert (cg.num_nodes, cg.num_edges) == (7, 9)
    assert c.forward == 27 and c.reverse == 27
    assert c.per_layer == [18, 18, 18]


def test_isolated_node_is_mlp_stack():
    lone = ContextGraph(["property"], [0], [], "", np.zeros((0, 27)))
    params = _params()
    Z = encode_context(lone, params, ad.constant(np.zeros((0, 4))), EncoderConfig(3, 4)).Z.values
    relu = lambda v: np.maximum(v, 0)
    h = params["prop.emb"].values[[0]] @ params["ctx.W_in"].values + params["ctx.b_in"].values
    for k in range(3):
        p = f"ctx.l{k}"
        pre = (1 + params[f"{p}.eps"].values[0]) * h
        h = h + relu(pre @ params[f"{p}.W1"].values + params[f"{p}.b1"].values) @ params[f"{p}.W2"].values \
            + params[f"{p}.b2"].values
    np.testing.assert_allclose(Z, h, atol=1e-12)


def test_zero_layer_weights_give_input_projection():
    recs, ep = _toy()
    cg = build_context_graph(ep, recs)
    params = _params()
    for name, t in params.items():
        if name.startswith("ctx.l"):
            t.values[:] = 0.0
    feats = np.random.default_rng(0).normal(size=(3, 4))
    Z = encode_context(cg, params, ad.constant(feats), EncoderConfig(3, 4)).Z.values
    X = np.concatenate([feats, cg.fragment_features @ params["frag.W"].values, params["prop.emb"].values[[0]]])
    np.testing.assert_allclose(Z, X @ params["ctx.W_in"].values + params["ctx.b_in"].values, atol=1e-12)


def test_context_encoder_equivariant_under_node_relabeling():
    recs, ep = _toy()
    params = _params()
    cfg = EncoderConfig(3, 4)
    feats = np.random.default_rng(1).normal(size=(3, 4))
    a = build_context_graph(ep, recs)
    Za = encode_context(a, params, ad.constant(feats), cfg).Z.values
    # swapping the two support molecules permutes their rows and nothing else
    ep_b = Episode(0, [(1, 0), (0, 1)], ep.query, K=1)
    b = build_context_graph(ep_b, recs)
    Zb = encode_context(b, params, ad.constant(feats[[1, 0, 2]]), cfg).Z.values
    for ref, i in a.molecule_index.items():
        np.testing.assert_allclose(Zb[b.molecule_index[ref]], Za[i], atol=1e-10)
    for ref, i in a.fragment_index.items():
        np.testing.assert_allclose(Zb[b.fragment_index[ref]], Za[i], atol=1e-10)


def test_contextual_concat_shapes_and_slots():
    recs = _records(["C", "Oc1ccccc1"])
    ep = Episode(0, [(0, 1), (1, 0)], [], K=1)
    cg = build_context_graph(ep, recs)
    params = _params(d=2)
    ce = encode_context(cg, params, ad.constant(np.ones((2, 2))), EncoderConfig(3, 2))
    H1 = contextual_concat(ad.constant(np.ones((1, 2))), ce, [0], recs, 0)
    assert H1.shape == (1, 8)
    H = contextual_concat(ad.constant(np.ones((7, 2))), ce, [1], recs, 0).values
    assign = recs[1].assignment
    ring = [i for i in range(7) if assign[i] == assign[1]]
    zf = H[:, 2:4]
    for i in ring:
        np.testing.assert_array_equal(zf[i], zf[ring[0]])
    oxy = [i for i in range(7) if assign[i] != assign[1]][0]
    assert not np.allclose(zf[oxy], zf[ring[0]])
    # molecule and property slots are constant over atoms
    assert np.ptp(H[:, 4:8], axis=0).max() == 0
    assert contextual_concat(ad.constant(np.ones((7, 2))), None, [1], recs, 0).values[:, 2:].max() == 0


def test_unmapped_atom_rejected():
    recs = _records(["Oc1ccccc1", "NC"])
    cg = build_context_graph(Episode(0, [(0, 1)], [], K=1), {0: recs[0]})
    ce = encode_context(cg, _params(), ad.constant(np.ones((1, 4))), EncoderConfig(3, 4))
    with pytest.raises((ValueError, KeyError)):
        context_rows(ce, [1], recs, 0)
    with pytest.raises(ValueError):
        contextual_concat(ad.constant(np.ones((3, 4))), ce, [0], recs, 0)
