import numpy as np
import pytest

from htrnembed.graph import GraphError, RelationDef, Schema
from htrnembed.metapath import extract_all, extract_subgraph, parse_metapath

from conftest import dblp_metapaths, make_graph, oracle_subgraph, random_htrn, random_metapath


class TestParse:
    def test_pa_binds_write_relation(self, dblp_schema):
        mp = parse_metapath("PA", dblp_schema)
        assert mp.node_types == (0, 1)
        assert mp.relations == (dblp_schema.relation_id("PA"),)

    def test_pap_length_two_intermediate_author(self, dblp_schema):
        mp = parse_metapath("PAP", dblp_schema)
        assert mp.length == 2
        assert mp.node_types == (0, 1, 0)
        assert mp.relations == (1, 1)

    def test_unknown_type_errors(self, dblp_schema):
        with pytest.raises(GraphError, match="unknown node type 'X'"):
            parse_metapath("PX", dblp_schema)

    def test_no_relation_for_hop(self):
        schema = Schema(
            node_types=("P", "A", "V"),
            relations=(RelationDef("PA", 0, 1),),
        )
        with pytest.raises(GraphError, match="no schema relation joins"):
            parse_metapath("PV", schema)

    def test_ambiguous_hop_needs_explicit_relation(self):
        schema = Schema(
            node_types=("P", "A"),
            relations=(RelationDef("writes", 0, 1), RelationDef("reviews", 0, 1)),
        )
        with pytest.raises(GraphError, match="ambiguous"):
            parse_metapath("PA", schema)
        mp = parse_metapath("PA", schema, relations=["reviews"])
        assert mp.relations == (1,)

    def test_hyphenated_multichar_types(self):
        schema = Schema(
            node_types=("paper", "author"),
            relations=(RelationDef("writes", 0, 1),),
        )
        mp = parse_metapath("paper-author", schema)
        assert mp.node_types == (0, 1)

    def test_reverse_direction_hop(self, dblp_schema):
        # AP walks the PA relation backwards
        mp = parse_metapath("AP", dblp_schema)
        assert mp.relations == (1,)
        assert mp.node_types == (1, 0)


class TestExtract:
    def test_worked_example(self, dblp_schema, paper_author_graph):
        g = paper_author_graph  # p1=0, p2=1, p3=2, a1=3
        pap = parse_metapath("PAP", dblp_schema)
        pa = parse_metapath("PA", dblp_schema)
        sub = extract_subgraph(g, 0, pap, cap=None)
        assert sub.neighbors == (1,)
        assert sub.intermediates == (3,)
        assert extract_subgraph(g, 2, pap, cap=None).neighbors == ()
        sub_pa = extract_subgraph(g, 0, pa, cap=None)
        assert sub_pa.neighbors == (3,)
        assert sub_pa.intermediates == ()

    def test_type_mismatch_errors(self, dblp_schema, paper_author_graph):
        pap = parse_metapath("PAP", dblp_schema)
        with pytest.raises(GraphError, match="starts at"):
            extract_subgraph(paper_author_graph, 3, pap)

    def test_oracle_equivalence_random_graphs(self):
        rng = np.random.default_rng(11)
        checked = 0
        for _ in range(40):
            g = random_htrn(rng)
            mp = random_metapath(g, rng)
            if mp is None:
                continue
            starts = [n for n in range(g.num_nodes) if int(g.node_type[n]) == mp.node_types[0]]
            for node in starts[:10]:
                sub = extract_subgraph(g, node, mp, cap=None)
                nb, inter = oracle_subgraph(g, node, mp)
                assert set(sub.neighbors) == nb
                assert set(sub.intermediates) == inter
                checked += 1
        assert checked > 100

    def test_self_exclusion_on_symmetric_paths(self, dblp_schema):
        g = make_graph(
            dblp_schema,
            [("p1", "P", "x"), ("p2", "P", "y"), ("a", "A", "z")],
            [("p1", "a", "PA"), ("p2", "a", "PA")],
        )
        pap = parse_metapath("PAP", dblp_schema)
        for node in (0, 1):
            assert node not in extract_subgraph(g, node, pap, cap=None).neighbors

    def test_cap_sampling(self, dblp_schema):
        nodes = [("p0", "P", "t")] + [(f"p{i}", "P", "t") for i in range(1, 6)] + [("a", "A", "z")]
        edges = [(f"p{i}", "a", "PA") for i in range(6)]
        g = make_graph(dblp_schema, nodes, edges)
        pap = parse_metapath("PAP", dblp_schema)
        full = set(extract_subgraph(g, 0, pap, cap=None).neighbors)
        assert len(full) == 5
        capped = extract_subgraph(g, 0, pap, cap=1, seed=3)
        assert len(capped.neighbors) == 1
        assert set(capped.neighbors) <= full
        for cap in (2, 3, 7):
            sub = extract_subgraph(g, 0, pap, cap=cap, seed=3)
            assert len(sub.neighbors) == min(cap, 5)
            assert set(sub.neighbors) <= full

    def test_intermediates_restricted_to_retained(self, dblp_schema):
        # two disjoint author routes; capping to one neighbor must drop the
        # other route's intermediate
        g = make_graph(
            dblp_schema,
            [("p0", "P", "t"), ("p1", "P", "t"), ("p2", "P", "t"), ("a1", "A", "x"), ("a2", "A", "y")],
            [("p0", "a1", "PA"), ("p1", "a1", "PA"), ("p0", "a2", "PA"), ("p2", "a2", "PA")],
        )
        pap = parse_metapath("PAP", dblp_schema)
        sub = extract_subgraph(g, 0, pap, cap=1, seed=0)
        (kept,) = sub.neighbors
        expected_inter = {1: 3, 2: 4}[kept]
        assert sub.intermediates == (expected_inter,)

    def test_determinism(self, small_graph, small_metapaths):
        g = small_graph
        node = int(g.nodes_of_type(0)[0])
        for mp in small_metapaths:
            a = extract_subgraph(g, node, mp, cap=3, seed=9)
            b = extract_subgraph(g, node, mp, cap=3, seed=9)
            assert a == b


class TestExtractAll:
    def test_paper_node_gets_three_entries(self, small_graph, small_metapaths):
        node = int(small_graph.nodes_of_type(0)[0])
        subs = extract_all(small_graph, node, small_metapaths, cap=5, seed=0)
        assert set(subs) == {"PA", "PAP", "PVP"}

    def test_author_node_on_paper_rooted_set_is_empty(self, small_graph, small_metapaths):
        node = int(small_graph.nodes_of_type(1)[0])
        assert extract_all(small_graph, node, small_metapaths, cap=5, seed=0) == {}

    def test_deterministic_for_seed(self, small_graph, small_metapaths):
        node = int(small_graph.nodes_of_type(0)[3])
        a = extract_all(small_graph, node, small_metapaths, cap=2, seed=4)
        b = extract_all(small_graph, node, small_metapaths, cap=2, seed=4)
        assert a == b
