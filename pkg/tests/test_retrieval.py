import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import arc_weight, dijkstra_distance, random_bipartite, ranked_paths
from pathrec.datastore import ProfileStore
from pathrec.errors import MissingProfile, MissingRepresentation, MissingTitle, UnknownNode
from pathrec.graph import BipartiteGraph, NodeId, item, user
from pathrec.retrieval import (NodeReps, RetrievalConfig, RetrievalPath, WeightedDigraph,
                               check_path, edge_weight, path_length, render_path, render_prompt,
                               retrieve, retrieve_detailed, top_k_paths, weight_edges)
from pathrec.userrep import VectorTable

GOLDEN = Path(__file__).parent / "data" / "prompt_golden.txt"


def reps_for(g, rng, dim=4):
    users = [n.id for n in g.nodes if n.kind == "user"]
    items = [n.id for n in g.nodes if n.kind == "item"]
    return NodeReps(VectorTable(users, rng.normal(size=(len(users), dim))),
                    VectorTable(items, rng.normal(size=(len(items), dim))))


def random_arcs(rng, n_nodes, integer=False):
    """Random bipartite digraph with independent weights per direction."""
    n_users = int(rng.integers(1, n_nodes))
    edges = random_bipartite(rng, n_users, n_nodes - n_users, float(rng.uniform(0.2, 0.7)))
    arcs = {}
    for u, i in edges:
        for a, b in ((("user", u), ("item", i)), (("item", i), ("user", u))):
            if integer:
                arcs[(a, b)] = float(rng.integers(0, 3))
            else:
                arcs[(a, b)] = float(rng.uniform(0, 5)) if rng.random() > 0.1 else 0.0
    return arcs


def to_digraph(arcs):
    return WeightedDigraph.from_arcs({(NodeId(*a), NodeId(*b)): w for (a, b), w in arcs.items()})


class TestEdgeWeight:
    def test_spot_values(self):
        assert edge_weight(0.3, 7, terminal=True) == 1.0
        assert abs(edge_weight(1.0, 1)) <= 1e-12
        assert edge_weight(0.0, 2) == pytest.approx(math.log(4), abs=1e-9)
        assert edge_weight(0.0, 2) == pytest.approx(1.386294, abs=1e-6)

    def test_clips_cosine(self):
        assert edge_weight(1.0 + 1e-12, 1) == 0.0

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-1, 1), st.integers(1, 100))
    def test_non_negative_and_oracle(self, cos, deg):
        w = edge_weight(cos, deg)
        assert w >= 0
        assert w == pytest.approx(arc_weight(cos, deg, False), abs=1e-12)


class TestWeightEdges:
    def setup_method(self):
        self.g = BipartiteGraph.from_edges([("u", "a"), ("u", "b"), ("w", "a"), ("w", "v"),
                                            ("x", "v"), ("x", "b")])
        rng = np.random.default_rng(0)
        self.reps = reps_for(self.g, rng)
        self.sub = self.g.as_subgraph()

    def cos(self, a, b):
        va, vb = self.reps.vector(a), self.reps.vector(b)
        return float(va @ vb / np.linalg.norm(va) / np.linalg.norm(vb))

    @pytest.mark.parametrize("rule", ["source", "target"])
    def test_every_arc(self, rule):
        query_user, query_item = user("u"), item("v")
        arcs = weight_edges(self.sub, self.reps, query_user, query_item, rule).arcs()
        assert len(arcs) == 2 * self.g.n_edges
        for (a, b), w in arcs.items():
            assert a.kind != b.kind and w >= 0
            if b == query_item:
                assert w == 1.0
                continue
            anchor = query_item if (rule == "target" and b.kind == "user") else query_user
            expected = arc_weight(self.cos(b, anchor), self.sub.degree(b), False)
            assert w == pytest.approx(expected, abs=1e-12)

    def test_degrees_from_subgraph(self):
        sub = self.sub.without_edge(user("x"), item("b"))
        arcs = weight_edges(sub, self.reps, user("u"), item("v")).arcs()
        expected = arc_weight(self.cos(user("x"), user("u")), 1, False)
        assert arcs[(item("v"), user("x"))] == pytest.approx(expected, abs=1e-12)

    def test_missing_representation(self):
        reps = NodeReps(VectorTable(["u"], np.ones((1, 4))), self.reps.items)
        with pytest.raises(MissingRepresentation):
            weight_edges(self.sub, reps, user("u"), item("v"))

    def test_scale_invariance(self):
        base = weight_edges(self.sub, self.reps, user("u"), item("v")).arcs()
        scaled = NodeReps(VectorTable(self.reps.users.ids, 3.7 * self.reps.users.matrix),
                          VectorTable(self.reps.items.ids, 3.7 * self.reps.items.matrix))
        other = weight_edges(self.sub, scaled, user("u"), item("v")).arcs()
        for key, w in base.items():
            assert other[key] == pytest.approx(w, abs=1e-12)

    def test_rejects_negative_weights(self):
        with pytest.raises(ValueError):
            WeightedDigraph.from_arcs({(user("u"), item("a")): -0.1})


class TestTopK:
    def test_single_path(self):
        arcs = {(("user", "u"), ("item", "a")): 0.5, (("item", "a"), ("user", "w")): 0.25,
                (("user", "w"), ("item", "v")): 1.0}
        paths = top_k_paths(to_digraph(arcs), user("u"), item("v"), k=3)
        assert [p.ids() for p in paths] == [["u", "a", "w", "v"]]
        assert paths[0].length == 1.75

    def test_no_path(self):
        arcs = {(("user", "u"), ("item", "a")): 1.0, (("user", "w"), ("item", "v")): 1.0}
        assert top_k_paths(to_digraph(arcs), user("u"), item("v")) == []

    def test_unknown_node(self):
        wg = to_digraph({(("user", "u"), ("item", "a")): 1.0})
        with pytest.raises(UnknownNode):
            top_k_paths(wg, user("u"), item("zzz"))

    @pytest.mark.parametrize("seed", range(40))
    @pytest.mark.parametrize("integer", [False, True])
    def test_matches_enumeration(self, seed, integer):
        rng = np.random.default_rng(seed)
        arcs = random_arcs(rng, int(rng.integers(4, 13)), integer)
        users = sorted({a for a, _ in arcs if a[0] == "user"})
        items = sorted({a for a, _ in arcs if a[0] == "item"})
        if not users or not items:
            return
        wg = to_digraph(arcs)
        for src in users[:2]:
            for dst in items[:2]:
                for k in (1, 3, 10):
                    got = top_k_paths(wg, NodeId(*src), NodeId(*dst), k)
                    expected = ranked_paths(arcs, src, dst, k)
                    assert [[(n.kind, n.id) for n in p.nodes] for p in got] == \
                        [path for path, _ in expected]
                    assert [p.length for p in got] == [length for _, length in expected]

    @pytest.mark.parametrize("seed", range(20))
    def test_k1_is_dijkstra(self, seed):
        rng = np.random.default_rng(100 + seed)
        arcs = random_arcs(rng, 10)
        users = sorted({a for a, _ in arcs if a[0] == "user"})
        items = sorted({a for a, _ in arcs if a[0] == "item"})
        if not users or not items:
            return
        best = dijkstra_distance(arcs, users[0], items[-1])
        got = top_k_paths(to_digraph(arcs), NodeId(*users[0]), NodeId(*items[-1]), 1)
        if best == math.inf:
            assert got == []
        else:
            assert got[0].length == pytest.approx(best, abs=1e-12)

    def test_lengths_sorted_and_recomputed(self):
        rng = np.random.default_rng(5)
        arcs = random_arcs(rng, 12)
        wg = to_digraph(arcs)
        src = min(a for a, _ in arcs if a[0] == "user")
        dst = max(a for a, _ in arcs if a[0] == "item")
        paths = top_k_paths(wg, NodeId(*src), NodeId(*dst), 20)
        lengths = [p.length for p in paths]
        assert lengths == sorted(lengths)
        for p in paths:
            assert path_length(wg, p.nodes) == p.length
            check_path(p, NodeId(*src), NodeId(*dst))


def profiles():
    return ProfileStore(
        {"u1": "Enjoys quiet wooden toys", "u2": "Buys eco-friendly nursery goods"},
        {"i1": "A wooden stacking ring set", "i2": "An organic cotton swaddle"},
        {"i2": "Organic Swaddle Blanket"})


class TestRender:
    def test_one_hop(self):
        p = RetrievalPath((user("u1"), item("i1")), 0.0)
        expected = "Enjoys quiet wooden toys -> buys -> A wooden stacking ring set"
        assert render_path(p, profiles()) == expected

    def test_three_hop(self):
        p = ProfileStore({"u": "Pu", "u2": "Pu2"}, {"i": "Pi", "i2": "Pi2"})
        nodes = (user("u"), item("i"), user("u2"), item("i2"))
        assert render_path(nodes, p) == "Pu -> buys -> Pi -> bought by -> Pu2 -> buys -> Pi2"

    def test_missing_profile(self):
        with pytest.raises(MissingProfile):
            render_path((user("u1"), item("nope")), profiles())

    def test_golden(self):
        path = RetrievalPath((user("u1"), item("i1"), user("u2"), item("i2")), 3.0)
        text = render_prompt("u1", "i2", [path], profiles())
        assert text.encode("utf-8") == GOLDEN.read_bytes()

    def test_zero_paths(self):
        text = render_prompt(user("u1"), item("i2"), [], profiles())
        assert "preference. \n. Explanations:" in text
        assert text.endswith("Explanations:")

    def test_numbered_paths(self):
        paths = [RetrievalPath((user("u1"), item("i1"), user("u2"), item("i2")), x)
                 for x in (1.0, 2.0, 3.0)]
        text = render_prompt("u1", "i2", paths, profiles())
        assert [text.index(f"Path {n}: ") for n in (1, 2, 3)] == sorted(
            text.index(f"Path {n}: ") for n in (1, 2, 3))
        assert text.count("\nPath ") == 2

    def test_missing_title(self):
        p = profiles()
        p.item_titles.clear()
        with pytest.raises(MissingTitle):
            render_prompt("u1", "i2", [], p)


class TestRetrieve:
    def test_disconnected(self):
        g = BipartiteGraph.from_edges([("u", "a"), ("w", "v")])
        reps = reps_for(g, np.random.default_rng(0))
        out = retrieve_detailed(g, reps, user("u"), item("v"))
        assert out.paths == []
        assert len(out.attempts) == 3  # 2-core, 1-core, then one more hop

    def test_single_chain(self):
        g = BipartiteGraph.from_edges([("u", "a"), ("w", "a"), ("w", "v")])
        reps = reps_for(g, np.random.default_rng(1))
        paths = retrieve(g, reps, user("u"), item("v"))
        assert [p.ids() for p in paths] == [["u", "a", "w", "v"]]

    def test_target_edge_removed(self):
        g = BipartiteGraph.from_edges([("u", "v"), ("u", "a"), ("w", "a"), ("w", "v")])
        reps = reps_for(g, np.random.default_rng(2))
        assert all(p.hops > 1 for p in retrieve(g, reps, user("u"), item("v")))
        kept = retrieve(g, reps, user("u"), item("v"),
                        RetrievalConfig(remove_target_edge=False, k_core=1))
        assert kept[0].ids() == ["u", "v"]

    def test_no_fallback(self):
        g = BipartiteGraph.from_edges([("u", "a"), ("w", "a"), ("w", "v")])
        reps = reps_for(g, np.random.default_rng(1))
        # every node on the only chain has degree <= 2, so a 3-core strips it
        cfg = RetrievalConfig(k_core=3, fallback=False)
        assert retrieve(g, reps, user("u"), item("v"), cfg) == []
        assert retrieve(g, reps, user("u"), item("v"), RetrievalConfig(k_core=3))

    def test_invariant_sweep(self):
        rng = np.random.default_rng(3)
        g = BipartiteGraph.from_edges(random_bipartite(rng, 40, 30, 0.08))
        reps = reps_for(g, rng)
        for n in g.nodes[:40]:
            if n.kind != "user":
                continue
            for v in g.nodes[-15:]:
                if v.kind != "item":
                    continue
                paths = retrieve(g, reps, n, v)
                assert [p.length for p in paths] == sorted(p.length for p in paths)
                for p in paths:
                    check_path(p, n, v)
