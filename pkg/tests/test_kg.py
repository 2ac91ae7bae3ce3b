import datetime
import io

import numpy as np
import pytest

from kgdiff.kg import (
    KgFormatError,
    KgGenConfig,
    KgNode,
    KnowledgeGraph,
    NodeKind,
    TypedEdge,
    generate_toy_kg,
    kg_stats,
    load_edge_list,
    prune_to_neighborhood,
    serialize,
)


def _nodes(*specs):
    return [KgNode(nid, kind, nid) for nid, kind in specs]


def test_load_empty_streams():
    kg = load_edge_list(io.StringIO(""), io.StringIO(""))
    assert kg.n_nodes == 0 and kg.n_edges == 0


def test_load_dedups_repeated_edge():
    nodes = "a\tDisease\tA\nb\tDrug\tB\n"
    edges = "!relation treats\n" + "a\tb\ttreats\tsrc\t-\t-\n" * 3
    kg = load_edge_list(io.StringIO(edges), io.StringIO(nodes))
    assert kg.n_nodes == 2 and kg.n_edges == 1


def test_load_errors_carry_line_numbers():
    nodes = "a\tDisease\tA\n"
    with pytest.raises(KgFormatError, match="line 2"):
        load_edge_list(io.StringIO(""), io.StringIO(nodes + "a\tDisease\n"))
    with pytest.raises(KgFormatError, match="duplicate node id"):
        load_edge_list(io.StringIO(""), io.StringIO(nodes + "a\tDrug\tA2\n"))
    edges = "!relation r\na\tmissing\tr\ts\t-\t-\n"
    with pytest.raises(KgFormatError, match="undeclared node"):
        load_edge_list(io.StringIO(edges), io.StringIO(nodes))
    with pytest.raises(KgFormatError, match="undeclared relation"):
        load_edge_list(io.StringIO("a\ta\tr\ts\t-\t-\n"), io.StringIO(nodes))


def _random_kg(rng, n_nodes=50, n_edges=120):
    kinds = list(NodeKind)
    nodes = [KgNode(f"n{i:03d}", kinds[rng.integers(0, len(kinds))], f"node {i}") for i in range(n_nodes)]
    relations = ["r0", "r1", "r2"]
    edges = []
    for _ in range(n_edges):
        a, b = rng.integers(0, n_nodes, size=2)
        rel = relations[rng.integers(0, 3)]
        start = end = None
        if rng.random() < 0.3:
            start = datetime.date(2018, 1, 1) + datetime.timedelta(days=int(rng.integers(0, 1000)))
            end = start + datetime.timedelta(days=int(rng.integers(0, 500)))
        edges.append(TypedEdge(f"n{a:03d}", f"n{b:03d}", rel, "src", start, end))
    return KnowledgeGraph(nodes, edges, relations)


def test_serialize_roundtrip_is_identity():
    rng = np.random.default_rng(11)
    for _ in range(5):
        kg = _random_kg(rng)
        node_text, edge_text = serialize(kg)
        back = load_edge_list(io.StringIO(edge_text), io.StringIO(node_text))
        assert set(kg.nodes) == set(back.nodes)
        assert {(e.key(), e.provenance, e.valid_from, e.valid_to) for e in kg.edges} == {
            (e.key(), e.provenance, e.valid_from, e.valid_to) for e in back.edges
        }


def test_adjacency_index_matches_edge_list():
    rng = np.random.default_rng(3)
    kg = _random_kg(rng)
    for rel in kg.relations:
        for nid in kg.nodes:
            expected = [e for e in kg.edges if e.src == nid and e.relation == rel]
            got = kg.out_edges(nid, rel)
            assert sorted(e.key() for e in got) == sorted(e.key() for e in expected)


def test_duplicate_merge_keeps_widest_validity():
    nodes = _nodes(("a", NodeKind.DISEASE), ("b", NodeKind.DRUG))
    e1 = TypedEdge("a", "b", "r", "p1", datetime.date(2020, 1, 1), datetime.date(2020, 6, 1))
    e2 = TypedEdge("a", "b", "r", "p2", datetime.date(2019, 1, 1), datetime.date(2019, 6, 1))
    kg = KnowledgeGraph(nodes, [e1, e2], ["r"])
    (edge,) = kg.edges
    assert edge.valid_from == datetime.date(2019, 1, 1)
    assert edge.valid_to == datetime.date(2020, 6, 1)
    assert edge.provenance == "p1,p2"
    # an unbounded duplicate makes the merged edge unbounded
    e3 = TypedEdge("a", "b", "r", "p3")
    kg2 = KnowledgeGraph(nodes, [e1, e3], ["r"])
    (edge2,) = kg2.edges
    assert edge2.valid_from is None and edge2.valid_to is None


def test_restricted_to_date_filters_edges():
    nodes = _nodes(("a", NodeKind.DISEASE), ("b", NodeKind.DRUG))
    dated = TypedEdge("a", "b", "r", "p", datetime.date(2020, 1, 1), datetime.date(2020, 12, 31))
    open_ended = TypedEdge("b", "a", "r", "p")
    kg = KnowledgeGraph(nodes, [dated, open_ended], ["r"])
    assert kg.restricted_to_date(datetime.date(2020, 6, 1)).n_edges == 2
    assert kg.restricted_to_date(datetime.date(2021, 6, 1)).n_edges == 1


# --- pruning ---------------------------------------------------------------


def _chain_kg():
    names = ["A", "B", "C", "D", "E"]
    nodes = _nodes(*[(n, NodeKind.DISEASE) for n in names])
    edges = [TypedEdge(a, b, "next") for a, b in zip(names, names[1:])]
    return KnowledgeGraph(nodes, edges, ["next"])


def test_prune_zero_hops_keeps_only_anchor():
    kg = _chain_kg()
    sub = prune_to_neighborhood(kg, "A", 0)
    assert set(sub.nodes) == {"A"} and sub.n_edges == 0


def test_prune_chain_three_hops():
    sub = prune_to_neighborhood(_chain_kg(), "A", 3)
    assert set(sub.nodes) == {"A", "B", "C", "D"}
    assert sub.n_edges == 3


def test_prune_anchor_missing():
    with pytest.raises(KeyError):
        prune_to_neighborhood(_chain_kg(), "Z", 2)


def _bfs_distances(kg, anchor):
    dist = {anchor: 0}
    frontier = [anchor]
    while frontier:
        nxt = []
        for node in frontier:
            for nbr in kg.undirected_neighbors(node):
                if nbr not in dist:
                    dist[nbr] = dist[node] + 1
                    nxt.append(nbr)
        frontier = nxt
    return dist


def test_prune_matches_bfs_oracle():
    rng = np.random.default_rng(17)
    for trial in range(20):
        kg = _random_kg(rng, n_nodes=40, n_edges=70)
        anchor = f"n{rng.integers(0, 40):03d}"
        dist = _bfs_distances(kg, anchor)
        sub = prune_to_neighborhood(kg, anchor, 3)
        assert set(sub.nodes) == {n for n, d in dist.items() if d <= 3}
        # all surviving edges connect retained nodes
        for e in sub.edges:
            assert e.src in sub.nodes and e.dst in sub.nodes


def test_prune_idempotent_and_unbounded():
    rng = np.random.default_rng(23)
    kg = _random_kg(rng, n_nodes=30, n_edges=60)
    anchor = "n000"
    once = prune_to_neighborhood(kg, anchor, 2)
    twice = prune_to_neighborhood(once, anchor, 2)
    assert set(once.nodes) == set(twice.nodes)
    assert {e.key() for e in once.edges} == {e.key() for e in twice.edges}
    full = prune_to_neighborhood(kg, anchor, None)
    assert set(full.nodes) == set(_bfs_distances(kg, anchor))


# --- toy generator ---------------------------------------------------------


def test_generate_degenerate_config():
    cfg = KgGenConfig({NodeKind.DISEASE: 10}, {})
    kg = generate_toy_kg(cfg, 0)
    assert kg.n_nodes == 10 and kg.n_edges == 0


def test_generate_deterministic():
    cfg = KgGenConfig(
        {NodeKind.DISEASE: 20, NodeKind.PHENOTYPE: 15, NodeKind.LAB_TEST: 10},
        {"has_phenotype": 1.5, "phenotype_lab": 1.0},
        validity_fraction=0.3,
    )
    a = serialize(generate_toy_kg(cfg, 42))
    b = serialize(generate_toy_kg(cfg, 42))
    assert a == b
    c = serialize(generate_toy_kg(cfg, 43))
    assert a != c


def test_generate_kind_shares_near_targets():
    shares = {
        NodeKind.DISEASE: 0.27, NodeKind.PHENOTYPE: 0.18, NodeKind.DRUG: 0.22,
        NodeKind.LAB_TEST: 0.12, NodeKind.ADVERSE_EVENT: 0.16, NodeKind.GENE: 0.05,
    }
    cfg = KgGenConfig.from_shares(1000, shares, {"has_phenotype": 1.0})
    kg = generate_toy_kg(cfg, 5)
    stats = kg_stats(kg)
    assert stats["n_nodes"] == 1000
    for kind, target in shares.items():
        assert abs(stats["kind_shares"][kind.value] - target) <= 0.02


def test_generate_every_disease_has_outgoing_edge():
    cfg = KgGenConfig(
        {NodeKind.DISEASE: 30, NodeKind.PHENOTYPE: 10},
        {"has_phenotype": 0.2},  # sparse enough that the floor pass must act
    )
    kg = generate_toy_kg(cfg, 9)
    with_out = {e.src for e in kg.edges}
    for node in kg.nodes_of_kind(NodeKind.DISEASE):
        assert node.id in with_out


def test_generate_rejects_missing_kind():
    cfg = KgGenConfig({NodeKind.DISEASE: 5}, {"has_phenotype": 1.0})
    with pytest.raises(ValueError, match="has_phenotype"):
        generate_toy_kg(cfg, 1)


# --- stats -----------------------------------------------------------------


def test_stats_empty_graph():
    stats = kg_stats(KnowledgeGraph([], [], []))
    assert stats["n_nodes"] == 0 and stats["n_edges"] == 0
    assert all(v == 0 for v in stats["kind_counts"].values())


def test_stats_hand_built():
    nodes = _nodes(("a", NodeKind.DISEASE), ("b", NodeKind.DRUG), ("c", NodeKind.LAB_TEST))
    edges = [TypedEdge("a", "b", "r1"), TypedEdge("a", "c", "r2")]
    stats = kg_stats(KnowledgeGraph(nodes, edges, ["r1", "r2"]))
    assert stats["n_nodes"] == 3 and stats["n_edges"] == 2
    assert stats["relation_counts"] == {"r1": 1, "r2": 1}


def test_stats_match_rescan_oracle():
    rng = np.random.default_rng(31)
    kg = _random_kg(rng)
    stats = kg_stats(kg)
    assert stats["n_edges"] == len(kg.edges)
    for rel in kg.relations:
        assert stats["relation_counts"][rel] == sum(1 for e in kg.edges if e.relation == rel)
    for kind in NodeKind:
        assert stats["kind_counts"][kind.value] == sum(
            1 for n in kg.nodes.values() if n.kind == kind
        )
