import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from socialtrans.data import (DataError, EventLog, SampledSubgraph, SocialGraph, build_graph, build_sequences,
                              load_events, read_subgraph_cache, sample_subgraph, write_subgraph_cache)


def write(path, rows):
    path.write_text("".join("\t".join(str(x) for x in r) + "\n" for r in rows))
    return path


def test_load_events_densifies_and_sorts(tmp_path):
    p = write(tmp_path / "e.tsv", [(50, 900, 3), (7, 400, 9), (50, 400, 1), (7, 900, 2)])
    log = load_events(p, map_dir=tmp_path)
    assert log.user_ids == (7, 50) and log.item_ids == (0, 400, 900)
    assert log.users.tolist() == [0, 0, 1, 1]
    assert log.items.tolist() == [2, 1, 1, 2]
    assert log.times.tolist() == [2, 9, 1, 3]
    assert (tmp_path / "user_map.tsv").read_text() == "7\t0\n50\t1\n"
    assert (tmp_path / "item_map.tsv").read_text() == "400\t1\n900\t2\n"


def test_equal_timestamps_keep_file_order():
    log = EventLog.from_records([(0, 3, 5), (0, 1, 5), (0, 2, 5)])
    assert log.items.tolist() == [3, 1, 2]


@pytest.mark.parametrize("rows, message", [
    ([(1, 2)], "expected 3"),
    ([(1, "x", 3)], "non-integer"),
    ([(1, 0, 3)], "reserved"),
])
def test_load_events_errors_name_the_problem(tmp_path, rows, message):
    p = write(tmp_path / "bad.tsv", [(1, 1, 1)] + rows)
    with pytest.raises(DataError, match=message) as exc:
        load_events(p)
    if message != "reserved":
        assert ":2:" in str(exc.value)


def test_sequences_left_padded_and_truncated():
    log = EventLog.from_records([(0, i, i) for i in range(1, 8)], n_users=1, n_items=7)
    pairs = build_sequences(log, m=3)
    assert len(pairs) == 6  # every event but the first is a target
    first, target = pairs[0]
    assert first.items.tolist() == [0, 0, 1] and target == 2 and first.true_length == 1
    last, target = pairs[-1]
    assert last.items.tolist() == [4, 5, 6] and target == 7 and last.cut_time == 7


def test_single_event_user_yields_nothing():
    log = EventLog.from_records([(0, 1, 1), (1, 1, 1), (1, 2, 2)])
    assert [s.user_id for s, _ in build_sequences(log, 4)] == [1]


def test_stride_keeps_final_event():
    log = EventLog.from_records([(0, i, i) for i in range(1, 11)])
    pairs = build_sequences(log, 4, stride=3)
    assert [t for _, t in pairs] == [4, 7, 10]


def test_window_before_is_strict():
    log = EventLog.from_records([(0, 1, 1), (0, 2, 2), (0, 3, 2), (0, 4, 3)])
    assert log.window_before(0, 2, 5).items.tolist() == [0, 0, 0, 0, 1]
    assert log.window_before(0, 3, 2).items.tolist() == [2, 3]
    assert log.window_before(5, 3, 2).items.tolist() == [0, 0]


def test_graph_symmetric_with_hand_attributes(four_node):
    log, graph = four_node
    for u in range(4):
        for v in graph.neighbors_of(u):
            assert u in graph.neighbors_of(v)
    # users 0 and 1: item sets {1,2,3,6} and {1,2,4,5} share 2 items; degrees 2 and 3
    np.testing.assert_allclose(graph.attr(0, 1), [math.log1p(2), math.log1p(2)])
    np.testing.assert_allclose(graph.attr(1, 0), graph.attr(0, 1))


def test_self_loops_and_duplicates_dropped():
    g = SocialGraph.from_edges([(0, 1), (1, 0), (2, 2), (0, 1)], 3)
    assert g.edges() == [(0, 1)] and g.degree(2) == 0


def test_build_graph_unknown_user_gets_new_id(tmp_path):
    log = load_events(write(tmp_path / "e.tsv", [(10, 1, 1), (20, 1, 2)]))
    g = build_graph(write(tmp_path / "g.tsv", [(10, 20), (20, 99)]), log)
    assert g.n_users == 3 and g.user_ids == (10, 20, 99)
    assert g.neighbors_of(1) == (0, 2)


def star(n_leaves: int, weights=None) -> SocialGraph:
    edges = [(0, i) for i in range(1, n_leaves + 1)]
    g = SocialGraph.from_edges(edges, n_leaves + 1)
    if weights is not None:
        for i, w in enumerate(weights, start=1):
            g.edge_attrs[(0, i)] = np.array([w, 0.0])
    return g


def test_fanout_caps_and_sorted_and_deterministic():
    g = star(30)
    a = sample_subgraph(g, 0, [5], rng_seed=[1, 2])
    b = sample_subgraph(g, 0, [5], rng_seed=[1, 2])
    nbrs = [v for v, _ in a.layers[0][0]]
    assert len(nbrs) == 5 == len(set(nbrs)) and nbrs == sorted(nbrs)
    assert nbrs == [v for v, _ in b.layers[0][0]]


def test_uniform_sampling_inclusion_chi_square():
    g = star(10)
    counts = Counter()
    trials = 4000
    for s in range(trials):
        counts.update(v for v, _ in sample_subgraph(g, 0, [3], rng_seed=s).layers[0][0])
    observed = np.array([counts[i] for i in range(1, 11)])
    expected = np.full(10, trials * 3 / 10)
    assert stats.chisquare(observed, expected).pvalue > 1e-3


def test_attribute_weighted_prefers_heavy_edges_and_fills_with_zero_weight():
    g = star(4, weights=[3.0, 1.0, 0.0, 0.0])
    counts = Counter()
    for s in range(3000):
        counts.update(v for v, _ in sample_subgraph(g, 0, [1], "attribute_weighted", rng_seed=s).layers[0][0])
    assert counts[3] == counts[4] == 0
    assert abs(counts[1] / 3000 - 0.75) < 0.03
    # three slots: both weighted neighbors plus one zero-weight filler
    picked = [v for v, _ in sample_subgraph(g, 0, [3], "attribute_weighted").layers[0][0]]
    assert {1, 2} <= set(picked) and len(picked) == 3


def test_two_hop_and_absent_root(four_node):
    _, graph = four_node
    sg = sample_subgraph(graph, 0, [10, 10])
    assert sorted(sg.layers[0]) == [0] and sorted(sg.layers[1]) == [1, 2]
    assert sg.nodes() == [0, 1, 2, 3]
    assert sg.nodes_within(0) == [0] and sg.nodes_within(1) == [0, 1, 2]
    lonely = sample_subgraph(graph, 99, [3])
    assert lonely.layers == [{99: []}] and lonely.nodes() == [99]


def test_subgraph_cache_roundtrip(tmp_path, four_node):
    _, graph = four_node
    recs = [(u, 0, sample_subgraph(graph, u, [2, 2], rng_seed=u)) for u in range(4)]
    write_subgraph_cache(tmp_path / "c.tsv", recs)
    back = read_subgraph_cache(tmp_path / "c.tsv")
    for (r1, k1, s1), (r2, k2, s2) in zip(recs, back):
        assert (r1, k1) == (r2, k2)
        for l1, l2 in zip(s1.layers, s2.layers):
            assert l1.keys() == l2.keys()
            for node in l1:
                assert [v for v, _ in l1[node]] == [v for v, _ in l2[node]]
                for (_, e1), (_, e2) in zip(l1[node], l2[node]):
                    assert np.array_equal(e1, e2)
    (tmp_path / "bad.tsv").write_text("#other\tv9\n")
    with pytest.raises(DataError):
        read_subgraph_cache(tmp_path / "bad.tsv")


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(1, 9), st.integers(0, 20)), min_size=1, max_size=40),
       st.integers(1, 6))
def test_sequences_property(records, m):
    log = EventLog.from_records(records, n_users=6, n_items=9)
    pairs = build_sequences(log, m)
    expected = sum(max(len(log.history(u)[0]) - 1, 0) for u in range(6))
    assert len(pairs) == expected
    for seq, target in pairs:
        assert len(seq.items) == m
        real = seq.items[seq.items != 0]
        assert len(real) == seq.true_length <= m
        # pads only on the left
        assert np.all(seq.items[: m - seq.true_length] == 0)
        assert 1 <= target <= 9
