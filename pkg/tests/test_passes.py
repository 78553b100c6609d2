import numpy as np
import pytest

from itasim.graph import parse_graph
from itasim.mobilebert import ModelConfig, build_mobilebert, make_inputs
from itasim.passes import fuse_mha, ita_eligible, lower, map_engines, split_heads
from itasim.reference import execute_graph

from helpers import single_gemm_graph, two_mha_graph


def _same(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


def test_one_fused_mha_per_layer(two_layer):
    g, feeds = two_layer
    f = fuse_mha(g)
    assert [n.op for n in f.nodes].count("FusedMHA") == 2
    assert "Softmax" not in [n.op for n in f.nodes]
    assert len(f.nodes) == 2 * 23
    assert _same(execute_graph(g, feeds), execute_graph(f, feeds))


def test_graph_without_softmax_unchanged():
    g = single_gemm_graph()
    assert fuse_mha(g).to_json() == g.to_json()


def test_two_independent_patterns_both_fused():
    g = two_mha_graph()
    f = fuse_mha(g)
    fused = [n for n in f.nodes if n.op == "FusedMHA"]
    assert sorted(n.name for n in fused) == ["m0", "m1"]
    feeds = make_inputs(g, 2)
    assert _same(execute_graph(g, feeds), execute_graph(f, feeds))


def test_near_match_left_alone():
    g = two_mha_graph()
    # the softmax output is also a graph output: fusing would hide it
    g.outputs.append("m0.a")
    f = fuse_mha(g)
    assert [n.name for n in f.nodes if n.op == "FusedMHA"] == ["m1"]


def test_split_heads_four_heads(two_layer):
    g, feeds = two_layer
    s = split_heads(fuse_mha(g))
    heads = [n for n in s.nodes if n.op == "AttentionHead"]
    accums = [n for n in s.nodes if n.op == "HeadAccum"]
    assert len(heads) == 8 and len(accums) == 2
    assert all(len(a.inputs) == 4 for a in accums)
    assert len(s.nodes) == 2 * 27
    assert _same(execute_graph(g, feeds), execute_graph(s, feeds))


def test_split_single_head():
    g = two_mha_graph(H=1)
    s = split_heads(fuse_mha(g))
    accums = [n for n in s.nodes if n.op == "HeadAccum"]
    assert [len(a.inputs) for a in accums] == [1, 1]
    feeds = make_inputs(g, 3)
    assert _same(execute_graph(g, feeds), execute_graph(s, feeds))


def test_split_graph_json_roundtrip(two_layer):
    g, feeds = two_layer
    s = lower(g)
    text = s.to_json()
    assert parse_graph(text).to_json() == text
    out = execute_graph(parse_graph(text), feeds, weights=g.weights)
    assert _same(execute_graph(g, feeds), out)


def test_engine_mapping(two_layer):
    g, _ = two_layer
    ita = lower(g, "ita")
    engines = {n.name: n.engine for n in ita.nodes}
    assert all(engines[n.name] == "ita" for n in ita.nodes if n.op == "AttentionHead")
    assert all(engines[n.name] == "cluster" for n in ita.nodes
               if n.op in ("Add", "Affine", "HeadAccum"))
    assert all(n.engine == "cluster" for n in lower(g, "cluster").nodes)
    with pytest.raises(ValueError):
        map_engines(g, "gpu")
    odd = single_gemm_graph(R=64, K=96, C=64)
    assert not ita_eligible(odd, odd.nodes[0])
