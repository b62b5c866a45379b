import numpy as np
import pytest

from pfhin.errors import DataError
from pfhin.graph import load_hin, make_hin, neighbors, save_hin, split_links, write_vocab


def _toy_files(tmp_path, node_lines, edge_lines):
    nf = tmp_path / "nodes.tsv"
    ef = tmp_path / "edges.tsv"
    nf.write_text("\n".join(node_lines) + "\n")
    ef.write_text("\n".join(edge_lines) + "\n")
    return str(ef), str(nf)


NODES = [
    "# comment line",
    "author\ta1\tml",
    "author\ta2\t-",
    "paper\tp1\tml",
    "paper\tp2\tdb",
    "venue\tv1",
]
EDGES = [
    "author\ta1\twrites\tpaper\tp1",
    "author\ta2\twrites\tpaper\tp1",
    "paper\tp1\tappears\tvenue\tv1",
    "paper\tp2\tappears\tvenue\tv1",
    "author\ta1\twrites\tpaper\tp2",
]


def test_load_basic(tmp_path):
    ef, nf = _toy_files(tmp_path, NODES, EDGES)
    hin = load_hin(ef, nf)
    assert hin.num_nodes == 5
    assert hin.num_edges == 5
    assert hin.node_types == ("author", "paper", "venue")
    assert hin.edge_types == ("writes", "appears")
    np.testing.assert_array_equal(hin.node_type, [0, 0, 1, 1, 2])
    assert hin.raw_ids == ("a1", "a2", "p1", "p2", "v1")
    assert hin.labels == ("ml", None, "ml", "db", None)
    # first edge row preserved verbatim
    np.testing.assert_array_equal(hin.edges[0], [0, 2, 0])


def test_neighbors_undirected_sorted(tmp_path):
    ef, nf = _toy_files(tmp_path, NODES, EDGES)
    hin = load_hin(ef, nf)
    # p1 (dense 2) touches a1, a2, v1
    assert [v for v, _ in neighbors(hin, 2)] == [0, 1, 4]
    # venue sees both papers even though edges were written paper->venue
    assert [v for v, _ in neighbors(hin, 4)] == [2, 3]
    assert hin.has_edge(4, 2) and hin.has_edge(2, 4)
    assert not hin.has_edge(0, 1)
    assert hin.degree(2) == 3


def test_parallel_edges_collapse_in_adjacency(tmp_path):
    ef, nf = _toy_files(tmp_path, NODES, EDGES + ["author\ta1\twrites\tpaper\tp1"])
    hin = load_hin(ef, nf)
    assert hin.num_edges == 6          # multiset kept
    assert hin.degree(0) == 2          # adjacency collapsed
    assert [v for v, _ in neighbors(hin, 0)] == [2, 3]


def test_adjacency_matches_bruteforce_scan(tmp_path):
    rng = np.random.default_rng(7)
    n = 40
    node_type = rng.integers(0, 3, size=n)
    pairs = set()
    edges = []
    while len(edges) < 120:
        u, v = rng.integers(0, n, size=2)
        if u == v:
            continue
        edges.append((int(u), int(v), int(rng.integers(0, 2))))
        pairs.add((min(u, v), max(u, v)))
    hin = make_hin(node_type, edges, ["t0", "t1", "t2"], ["e0", "e1"])
    for v in range(n):
        expect = sorted({b for a, b, _ in edges if a == v}
                        | {a for a, b, _ in edges if b == v})
        got = [w for w, _ in neighbors(hin, v)]
        assert got == expect
    for u in range(n):
        for v in range(n):
            if u != v:
                assert hin.has_edge(u, v) == ((min(u, v), max(u, v)) in pairs)


def test_roundtrip(tmp_path):
    ef, nf = _toy_files(tmp_path, NODES, EDGES)
    hin = load_hin(ef, nf)
    ef2, nf2 = str(tmp_path / "e2.tsv"), str(tmp_path / "n2.tsv")
    save_hin(hin, ef2, nf2)
    hin2 = load_hin(ef2, nf2)
    np.testing.assert_array_equal(hin.edges, hin2.edges)
    np.testing.assert_array_equal(hin.node_type, hin2.node_type)
    assert hin.raw_ids == hin2.raw_ids
    assert hin.labels == hin2.labels
    assert hin.node_types == hin2.node_types


def test_vocab_file(tmp_path):
    ef, nf = _toy_files(tmp_path, NODES, EDGES)
    hin = load_hin(ef, nf)
    vp = tmp_path / "g.vocab.tsv"
    write_vocab(hin, str(vp))
    lines = vp.read_text().strip().split("\n")
    assert lines[0] == "0\tauthor\ta1"
    assert lines[4] == "4\tvenue\tv1"


@pytest.mark.parametrize("bad_edge,msg", [
    ("author\ta1\twrites\tpaper\tnope", "dangling"),
    ("author\ta1\twrites\tghost\tp1", "unknown node type"),
    ("author\ta1\twrites\tauthor\ta1", "self-loop"),
    ("author\ta1\twrites\tpaper", "fields"),
])
def test_malformed_edges_report_line(tmp_path, bad_edge, msg):
    ef, nf = _toy_files(tmp_path, NODES, EDGES + [bad_edge])
    with pytest.raises(DataError, match=msg) as exc:
        load_hin(ef, nf)
    assert ":6:" in str(exc.value)  # appended after the 5 good edge lines


def test_duplicate_node_id(tmp_path):
    ef, nf = _toy_files(tmp_path, NODES + ["author\ta1\tdup"], EDGES)
    with pytest.raises(DataError, match="duplicate node id"):
        load_hin(ef, nf)


def test_same_raw_id_across_types_ok(tmp_path):
    nodes = ["author\tx", "paper\tx"]
    edges = ["author\tx\tw\tpaper\tx"]
    ef, nf = _toy_files(tmp_path, nodes, edges)
    hin = load_hin(ef, nf)
    assert hin.num_nodes == 2 and hin.num_edges == 1


def test_empty_node_file(tmp_path):
    ef, nf = _toy_files(tmp_path, ["# nothing"], ["# nothing"])
    with pytest.raises(DataError, match="no nodes"):
        load_hin(ef, nf)


def test_edgeless_graph_ok():
    hin = make_hin([0, 0, 1], np.empty((0, 3)), ["a", "b"], [])
    assert hin.num_edges == 0
    assert neighbors(hin, 0) == []


def test_split_links_order_and_dedup():
    # 10 edges on 8 nodes; last 4 are the test tail, one duplicates a train pair
    edges = [(0, 1, 0), (1, 2, 0), (2, 3, 0), (3, 4, 0), (4, 5, 0), (5, 6, 0),
             (6, 7, 0), (0, 2, 0), (1, 0, 0), (3, 5, 0)]
    hin = make_hin([0] * 8, edges, ["t"], ["e"])
    sp = split_links(hin, 0.6, rng_seed=3)
    assert len(sp.train_edges) == 6
    np.testing.assert_array_equal(sp.train_edges, np.asarray(edges[:6]))
    # (1,0) duplicates train pair (0,1) so it is dropped
    got = {(min(u, v), max(u, v)) for u, v, _ in sp.test_pos}
    assert got == {(6, 7), (0, 2), (3, 5)}
    assert len(sp.test_neg) == len(sp.test_pos)
    all_pairs = {(min(u, v), max(u, v)) for u, v, _ in edges}
    for u, v in sp.test_neg:
        assert u != v
        assert (min(u, v), max(u, v)) not in all_pairs
    # deterministic under the seed
    sp2 = split_links(hin, 0.6, rng_seed=3)
    np.testing.assert_array_equal(sp.test_neg, sp2.test_neg)


def test_split_links_rejects_dense_graph():
    # complete graph on 4 nodes: no negatives available
    edges = [(u, v, 0) for u in range(4) for v in range(u + 1, 4)]
    hin = make_hin([0] * 4, edges, ["t"], ["e"])
    with pytest.raises(DataError, match="non-edges"):
        split_links(hin, 0.5, rng_seed=0)


def test_split_links_bad_ratio():
    hin = make_hin([0] * 3, [(0, 1, 0), (1, 2, 0)], ["t"], ["e"])
    for r in (0.0, 1.0, -0.2):
        with pytest.raises(DataError, match="train_ratio"):
            split_links(hin, r, rng_seed=0)
