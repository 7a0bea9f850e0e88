from collections import Counter
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egcm.augment import MixupBatch
from egcm.graph import add_virtual_edges, build_graph, load_graph, message_index, neighborhood, save_graph

from conftest import make_record

A, B, C, D = ("1.0.0.1", 1), ("1.0.0.2", 2), ("1.0.0.3", 3), ("1.0.0.4", 4)


def rec(s, d, label=0, f=(1.0, 2.0)):
    return make_record(s, d, f, label)


def random_graph(rng, n_nodes, n_edges, dim=3):
    eps = [(f"10.0.0.{i}", 1) for i in range(n_nodes)]
    recs = [
        make_record(eps[rng.integers(n_nodes)], eps[rng.integers(n_nodes)], rng.normal(size=dim), int(rng.random() < 0.3))
        for _ in range(n_edges)
    ]
    return build_graph(recs)


def test_single_record():
    g = build_graph([rec(A, B)])
    assert (g.num_nodes, g.num_edges) == (2, 1)
    assert neighborhood(g, 0).pairs == ((1, 0),)
    np.testing.assert_array_equal(g.node_features, np.ones((2, 2)))


def test_parallel_edges_kept():
    g = build_graph([rec(A, B), rec(A, B)])
    assert g.num_edges == 2 and g.num_nodes == 2


def test_path_degrees_against_bruteforce():
    recs = [rec(A, B), rec(B, C), rec(C, D)]
    g = build_graph(recs)
    brute = Counter()
    for s, d in zip(g.src, g.dst):
        brute[s] += 1
        brute[d] += 1
    assert [brute[v] for v in range(g.num_nodes)] == g.degrees().tolist() == [1, 2, 2, 1]


def test_empty_graph():
    g = build_graph([])
    assert g.num_nodes == 0 and g.num_edges == 0


def test_graph_arrays_read_only():
    g = build_graph([rec(A, B)])
    with pytest.raises(ValueError):
        g.src[0] = 1


def test_isolated_node_has_empty_neighbourhood():
    g = add_virtual_edges(build_graph([rec(A, B)]), MixupBatch.empty(2))
    assert g.num_nodes == 2
    iso = build_graph([rec(A, B)])
    # append an isolated node by hand
    from egcm.graph import TrafficGraph

    h = TrafficGraph.from_arrays(
        list(iso.endpoints) + [C], np.ones((3, 2)), iso.src, iso.dst, iso.edge_features, iso.labels, iso.virtual
    )
    assert neighborhood(h, 2).pairs == ()


def test_full_and_sampled_neighbourhood():
    hub = [rec(A, x) for x in (B, C, D, ("1.0.0.5", 5), ("1.0.0.6", 6))]
    g = build_graph(hub)
    assert len(neighborhood(g, 0).pairs) == 5
    incident = set(neighborhood(g, 0).pairs)
    s1 = neighborhood(g, 0, fanout=2, rng=np.random.default_rng(3))
    s2 = neighborhood(g, 0, fanout=2, rng=np.random.default_rng(3))
    assert s1 == s2 and len(s1.pairs) == 2
    assert set(s1.pairs) <= incident
    assert len(neighborhood(build_graph(hub[:3]), 0).pairs) == 3


def test_invalid_node_id():
    g = build_graph([rec(A, B)])
    with pytest.raises(IndexError):
        neighborhood(g, 5)


def test_add_virtual_single():
    g = build_graph([rec(A, B)])
    batch = SimpleNamespace(features=np.array([[0.5, 0.5]]), labels=np.array([1]))
    h = add_virtual_edges(g, batch)
    assert (h.num_nodes, h.num_edges) == (4, 2)
    assert h.virtual.tolist() == [False, True]
    assert h.labels.tolist() == [0, 1]
    assert neighborhood(h, 2).pairs == ((3, 1),)
    # original untouched
    assert (g.num_nodes, g.num_edges) == (2, 1)


def test_add_virtual_empty_is_identity():
    g = build_graph([rec(A, B)])
    assert add_virtual_edges(g, MixupBatch.empty(2)) is g


def test_add_virtual_dimension_mismatch():
    g = build_graph([rec(A, B)])
    with pytest.raises(ValueError):
        add_virtual_edges(g, SimpleNamespace(features=np.ones((1, 3)), labels=np.array([1])))


def test_add_virtual_sigma_200():
    g = random_graph(np.random.default_rng(0), 10, 20)
    batch = SimpleNamespace(features=np.zeros((200, 3)), labels=np.ones(200, dtype=int))
    h = add_virtual_edges(g, batch)
    assert h.num_nodes == g.num_nodes + 400 and h.num_edges == g.num_edges + 200
    np.testing.assert_array_equal(h.src[: g.num_edges], g.src)
    np.testing.assert_array_equal(h.edge_features[: g.num_edges], g.edge_features)
    np.testing.assert_array_equal(h.node_features, 1.0)


def test_save_load_roundtrip(tmp_path):
    g = random_graph(np.random.default_rng(1), 6, 9)
    g = add_virtual_edges(g, SimpleNamespace(features=np.ones((2, 3)), labels=np.array([0, 1])))
    save_graph(g, tmp_path / "g.npz", split=np.arange(g.num_edges))
    back, extra = load_graph(tmp_path / "g.npz")
    assert back.endpoints == g.endpoints
    for name in ("src", "dst", "edge_features", "labels", "virtual", "node_features"):
        np.testing.assert_array_equal(getattr(back, name), getattr(g, name))
    np.testing.assert_array_equal(extra["split"], np.arange(g.num_edges))
    for a, b in zip(back.incidence, g.incidence):
        np.testing.assert_array_equal(a, b)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(0, 30), st.integers(0, 2**32 - 1))
def test_structural_invariants(n_nodes, n_edges, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n_nodes, n_edges)
    g.validate()
    distinct = len({e for s, d in zip(g.src, g.dst) for e in (g.endpoints[s], g.endpoints[d])})
    assert g.num_nodes == distinct
    assert g.degrees().sum() == 2 * g.num_edges
    # incidence consistent with the edge list (rebuild and compare)
    for v in range(g.num_nodes):
        expected = Counter()
        for e, (s, d) in enumerate(zip(g.src, g.dst)):
            if s == v:
                expected[(int(d), e)] += 1
            if d == v:
                expected[(int(s), e)] += 1
        assert Counter(neighborhood(g, v).pairs) == expected
    # virtual dyads add 2 nodes per edge
    if g.num_edges == 0:
        return
    k = int(rng.integers(0, 5))
    h = add_virtual_edges(g, SimpleNamespace(features=rng.normal(size=(k, 3)), labels=np.ones(k, dtype=int)))
    assert h.num_nodes == distinct + 2 * k
    assert h.degrees().sum() == 2 * h.num_edges


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10), st.integers(1, 25), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_sampled_message_index_respects_fanout(n_nodes, n_edges, fanout, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n_nodes, n_edges)
    idx = message_index(g, fanout=fanout, rng=rng)
    rows = np.diff(idx.mean_op.indptr)
    full = g.degrees()[idx.order]
    assert (rows == np.minimum(full, fanout)).all()
