import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from se_mapper.ir_graph import (
    GraphGenParams,
    IRFormatError,
    IRGraph,
    CycleError,
    node_features,
    parse_ir,
    random_graph,
    serialize_ir,
    topological_order,
    validate_graph,
)

from oracles import memory_groups_unionfind


class TestValidateGraph:
    def test_distance_fixture_is_valid(self, distance_graph):
        assert validate_graph(distance_graph) == []

    def test_self_edge_flagged(self):
        g = IRGraph.build("bad", [(0, "a", [])], [(0, 0)])
        assert any("self-edge" in v for v in validate_graph(g))

    def test_duplicate_edge_flagged(self):
        g = IRGraph.build("bad", [(0, "a", []), (1, "b", [])], [(0, 1), (0, 1)])
        assert any("duplicate" in v for v in validate_graph(g))

    def test_edge_out_of_range_flagged(self):
        g = IRGraph(name="bad", nodes=IRGraph.build("x", [(0, "a", [])], []).nodes, edges=((0, 9),))
        assert any("out of range" in v for v in validate_graph(g))

    def test_cycle_flagged(self):
        g = IRGraph.build("loop", [(0, "a", []), (1, "b", [])], [(0, 1), (1, 0)])
        assert any("cycle" in v for v in validate_graph(g))

    def test_sibling_colocation_conflict(self):
        # Two children of one parent share a tile-memory var: they must be
        # on the same tile and must not be, so no placement can exist.
        g = IRGraph.build(
            "conflict",
            [(0, "a", []), (1, "b", ["x0"]), (2, "c", ["x0"])],
            [(0, 1), (0, 2)],
        )
        problems = validate_graph(g)
        assert any("colocation conflict" in v and "siblings" in v for v in problems)

    def test_two_start_colocation_conflict(self):
        g = IRGraph.build("conflict", [(0, "a", ["v"]), (1, "b", ["v"])], [])
        problems = validate_graph(g)
        assert any("start an SDF" in v for v in problems)

    def test_transitive_colocation_conflict(self):
        # 1 and 2 share nothing directly but are chained through 3.
        g = IRGraph.build(
            "conflict",
            [(0, "a", []), (1, "b", ["p"]), (2, "c", ["q"]), (3, "d", ["p", "q"])],
            [(0, 1), (0, 2), (1, 3)],
        )
        problems = validate_graph(g)
        assert any("siblings" in v for v in problems)


class TestTopologicalOrder:
    def test_chain(self, chain3):
        assert topological_order(chain3) == [0, 1, 2]

    def test_diamond_tie_break(self, diamond):
        assert topological_order(diamond) == [0, 1, 2, 3]

    def test_distance_fixture_phases(self, distance_graph):
        order = topological_order(distance_graph)
        pos = {n: i for i, n in enumerate(order)}
        subs, muls, adds = (0, 1, 2), (3, 4, 5), (6, 7)
        assert max(pos[n] for n in subs) < min(pos[n] for n in muls)
        assert max(pos[n] for n in muls) < min(pos[n] for n in adds)

    def test_order_respects_edges(self, fft_graph):
        order = topological_order(fft_graph)
        pos = {n: i for i, n in enumerate(order)}
        for u, v in fft_graph.edges:
            assert pos[u] < pos[v]

    def test_cycle_raises_naming_cycle(self):
        g = IRGraph.build("loop", [(0, "a", []), (1, "b", []), (2, "c", [])], [(0, 1), (1, 2), (2, 1)])
        with pytest.raises(CycleError, match="->"):
            topological_order(g)


class TestRandomGraph:
    def test_deterministic_serialization(self):
        a = serialize_ir(random_graph(10, seed=1))
        b = serialize_ir(random_graph(10, seed=1))
        assert a == b

    def test_single_node(self):
        g = random_graph(1, seed=0)
        assert g.num_nodes == 1 and g.edges == ()

    def test_valid_at_30_nodes(self):
        assert validate_graph(random_graph(30, seed=7)) == []

    @pytest.mark.parametrize("seed", range(12))
    def test_generated_graphs_valid_and_orderable(self, seed):
        g = random_graph(5 + seed, seed=seed)
        assert validate_graph(g) == []
        order = topological_order(g)
        pos = {n: i for i, n in enumerate(order)}
        assert all(pos[u] < pos[v] for u, v in g.edges)

    def test_memory_fraction_produces_groups(self):
        g = random_graph(40, seed=3, params=GraphGenParams(mem_frac=0.5))
        assert any(n.tile_memory_vars for n in g.nodes)

    def test_start_nodes_are_indegree_zero(self):
        g = random_graph(25, seed=5)
        indeg = {n.id: 0 for n in g.nodes}
        for _, v in g.edges:
            indeg[v] += 1
        assert g.sdf_start_nodes == {n for n, d in indeg.items() if d == 0}

    @settings(max_examples=40, deadline=None)
    @given(num_nodes=st.integers(1, 24), seed=st.integers(0, 2**31 - 1))
    def test_any_generated_graph_is_well_formed(self, num_nodes, seed):
        g = random_graph(num_nodes, seed=seed)
        assert validate_graph(g) == []
        pos = {n: i for i, n in enumerate(topological_order(g))}
        assert all(pos[u] < pos[v] for u, v in g.edges)
        oracle = memory_groups_unionfind(g)
        by_code: dict[int, set[int]] = {}
        for nid, code in enumerate(g.memory_groups):
            if code:
                by_code.setdefault(code, set()).add(nid)
        assert sorted(by_code.values(), key=min) == oracle

    @pytest.mark.parametrize("seed", range(8))
    def test_memory_groups_match_unionfind(self, seed):
        g = random_graph(20, seed=seed, params=GraphGenParams(mem_frac=0.4, mem_group_size=3))
        oracle = memory_groups_unionfind(g)
        codes = g.memory_groups
        by_code: dict[int, set[int]] = {}
        for nid, code in enumerate(codes):
            if code:
                by_code.setdefault(code, set()).add(nid)
        assert sorted(by_code.values(), key=min) == oracle
        assert all(codes[n.id] == 0 for n in g.nodes if not n.tile_memory_vars)


class TestSerialization:
    def test_round_trip_distance(self, distance_graph):
        assert parse_ir(serialize_ir(distance_graph)) == distance_graph

    def test_serialization_canonical(self, fft_graph):
        text = serialize_ir(fft_graph)
        assert serialize_ir(parse_ir(text)) == text

    def test_unknown_node_id_in_edge(self):
        doc = {"name": "x", "nodes": [{"id": 0, "opcode": "a", "tile_memory_vars": []}], "edges": [[0, 99]]}
        with pytest.raises(IRFormatError, match=r"edges\[0\]"):
            parse_ir(json.dumps(doc))

    def test_unknown_top_level_key(self):
        doc = {"name": "x", "nodes": [], "edges": [], "extra": 1}
        with pytest.raises(IRFormatError, match="extra"):
            parse_ir(json.dumps(doc))

    def test_unknown_node_key(self):
        doc = {
            "name": "x",
            "nodes": [{"id": 0, "opcode": "a", "tile_memory_vars": [], "color": "red"}],
            "edges": [],
        }
        with pytest.raises(IRFormatError, match=r"nodes\[0\]"):
            parse_ir(json.dumps(doc))

    def test_fft_fixture_has_four_components(self, fft_graph):
        text = serialize_ir(fft_graph)
        g = parse_ir(text)
        assert len({n.sdf_id for n in g.nodes}) == 4

    def test_noncontiguous_ids_rejected(self):
        doc = {
            "name": "x",
            "nodes": [{"id": 0, "opcode": "a", "tile_memory_vars": []},
                      {"id": 2, "opcode": "b", "tile_memory_vars": []}],
            "edges": [],
        }
        with pytest.raises(IRFormatError, match="contiguous"):
            parse_ir(json.dumps(doc))


class TestNodeFeatures:
    def test_isolated_single_node(self):
        g = IRGraph.build("one", [(0, "a", [])], [])
        assert node_features(g)[0].tolist() == [0, 0, 0, 1, 0, 0]

    def test_chain_middle_node(self, chain3):
        feats = node_features(chain3)
        assert feats[1].tolist() == [1, 1, 1, 0, 0, 0]

    def test_shared_var_nodes_same_nonzero_code(self):
        g = IRGraph.build(
            "acc", [(0, "a", ["acc"]), (1, "b", []), (2, "c", ["acc"])], [(0, 1), (1, 2)]
        )
        feats = node_features(g)
        code0, code2 = feats[0][5], feats[2][5]
        assert code0 == code2 != 0
        assert feats[1][5] == 0

    def test_all_entries_finite_nonnegative(self, fft_graph):
        feats = node_features(fft_graph)
        assert np.isfinite(feats).all()
        assert (feats >= 0).all()
        assert feats.shape == (fft_graph.num_nodes, 6)

    def test_sibling_counts(self, distance_graph):
        # Each mul has a distinct sub parent, so no mul has siblings.
        feats = node_features(distance_graph)
        assert feats[3][4] == 0
        g = IRGraph.build("sib", [(0, "p", []), (1, "x", []), (2, "y", [])], [(0, 1), (0, 2)])
        f = node_features(g)
        assert f[1][4] == 1 and f[2][4] == 1
