"""Explainable path retrieval: edge weighting, top-k loopless shortest paths
and prompt rendering.

Arc weights follow the rule ``ln[(2 - cos(endpoint, anchor)) * deg(endpoint)]``
on the pruned subgraph, with every arc into the target item costing exactly
1.  Lower is more explainable.  Paths are ranked by
``(length, hop count, node-id sequence)``.
"""

import heapq
import math
import time
from bisect import bisect_left
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from .errors import MissingProfile, MissingRepresentation, MissingTitle, UnknownNode
from .graph import ITEM, USER, NodeId, k_core, l_hop_subgraph

TERMINAL_WEIGHT = 1.0

PROMPT_TEMPLATE = (
    "Given the item title, item profile, user profile and some retrieval paths about the user, "
    "please explain why the user would enjoy this item. Item title: {title}. "
    "Item profile: {item_profile}. User Profile: {user_profile}."
    "Here are several related paths which may reflect his/her preference. {paths}. "
    "Explanations:"
)


@dataclass
class RetrievalConfig:
    l_hop: int = 3
    k_core: int = 2
    k_paths: int = 3
    remove_target_edge: bool = True
    # "source": user endpoints compared with the query user; "target": with the query item
    user_arc_rule: str = "source"
    fallback: bool = True


# -- representations ----------------------------------------------------------


class NodeReps:
    """User and item vectors addressable by graph node.

    ``users`` and ``items`` are tables with ``ids``/``index``/``matrix``
    (see :class:`pathrec.userrep.VectorTable`).  Normalized rows are cached
    per parent graph so weighting a subgraph is a single matrix product.
    """

    def __init__(self, users, items):
        self.users = users
        self.items = items
        self._cache = {}

    def vector(self, node):
        table = self.users if node.kind == USER else self.items
        if node.id not in table.index:
            raise MissingRepresentation(f"no representation for {node}")
        return table.matrix[table.index[node.id]]

    def aligned(self, graph):
        """(unit rows aligned to ``graph.nodes``, has-representation mask)."""
        key = id(graph)
        hit = self._cache.get(key)
        if hit is not None and hit[0] is graph:
            return hit[1], hit[2]
        dim = self.users.matrix.shape[1] if len(self.users.ids) else self.items.matrix.shape[1]
        out = np.zeros((len(graph.nodes), dim))
        present = np.zeros(len(graph.nodes), dtype=bool)
        for k, node in enumerate(graph.nodes):
            table = self.users if node.kind == USER else self.items
            row = table.index.get(node.id)
            if row is not None:
                out[k] = table.matrix[row]
                present[k] = True
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        unit = np.where(norms < 1e-12, 0.0, out / np.where(norms < 1e-12, 1.0, norms))
        self._cache[key] = (graph, unit, present)
        return unit, present


# -- weighting ----------------------------------------------------------------


def edge_weight(cos, deg, terminal=False):
    """Scalar arc weight; ``terminal`` marks an arc into the target item."""
    if terminal:
        return TERMINAL_WEIGHT
    cos = min(1.0, max(-1.0, float(cos)))
    return math.log((2.0 - cos) * deg)


class WeightedDigraph:
    """Directed arcs over sorted nodes; ``weights[j]`` belongs to arc
    ``src -> indices[j]`` where ``src`` owns CSR slot ``j``."""

    def __init__(self, nodes, indptr, indices, weights, lookup=None):
        self.nodes = tuple(nodes)
        self._lookup = lookup
        self.index = None if lookup else {n: i for i, n in enumerate(self.nodes)}
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.weights = np.asarray(weights, dtype=np.float64)
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("arc weights must be finite and non-negative")
        self._lists = None

    def __len__(self):
        return len(self.nodes)

    def local(self, node):
        if self._lookup is not None:
            return self._lookup(node)
        try:
            return self.index[node]
        except KeyError:
            raise UnknownNode(f"node {node} is not in the weighted graph") from None

    @classmethod
    def from_arcs(cls, arcs):
        """Build from ``{(src NodeId, dst NodeId): weight}``."""
        nodes = sorted({a for a, _ in arcs} | {b for _, b in arcs})
        index = {n: i for i, n in enumerate(nodes)}
        triples = sorted((index[a], index[b], w) for (a, b), w in arcs.items())
        indptr = np.zeros(len(nodes) + 1, dtype=np.int64)
        for a, _, _ in triples:
            indptr[a + 1] += 1
        np.cumsum(indptr, out=indptr)
        return cls(nodes, indptr, [b for _, b, _ in triples], [w for _, _, w in triples])

    def arcs(self):
        out = {}
        for a in range(len(self.nodes)):
            for j in range(self.indptr[a], self.indptr[a + 1]):
                out[(self.nodes[a], self.nodes[self.indices[j]])] = float(self.weights[j])
        return out

    def lists(self):
        if self._lists is None:
            self._lists = (self.indptr.tolist(), self.indices.tolist(), self.weights.tolist())
        return self._lists

    def weight(self, a, b):
        """Weight of arc between local indices ``a`` -> ``b``."""
        ptr, idx, w = self.lists()
        j = bisect_left(idx, b, ptr[a], ptr[a + 1])
        if j == ptr[a + 1] or idx[j] != b:
            raise KeyError((a, b))
        return w[j]


def weight_edges(sub, reps, query_user, query_item, user_arc_rule="source"):
    """Weighted digraph over ``sub`` with both arc directions per edge.

    Degrees are taken in ``sub``.  Arc weights depend only on the arc's
    destination: items are compared with ``query_user``; users with ``query_user``
    (``user_arc_rule="source"``) or with ``query_item`` (``"target"``).
    """
    if user_arc_rule not in ("source", "target"):
        raise ValueError(f"unknown user arc rule {user_arc_rule!r}")
    unit, present = reps.aligned(sub.parent)
    members = sub.members
    missing = np.flatnonzero(~present[members])
    if len(missing):
        raise MissingRepresentation(f"no representation for {sub.nodes[missing[0]]}")
    src_rep = unit[sub.parent.local(query_user)]
    tgt_rep = unit[sub.parent.local(query_item)]
    rows = unit[members]
    is_user = sub.parent.kinds[members]
    cos = rows @ src_rep
    if user_arc_rule == "target":
        cos = np.where(is_user, rows @ tgt_rep, cos)
    cos = np.clip(cos, -1.0, 1.0)
    deg = np.maximum(sub.degrees, 1)
    node_w = np.log((2.0 - cos) * deg)
    if query_item in sub:
        node_w[sub.local(query_item)] = TERMINAL_WEIGHT
    weights = node_w[sub.indices]
    if np.any(weights < 0):
        raise AssertionError("negative arc weight")
    return WeightedDigraph(sub.nodes, sub.indptr, sub.indices, weights, lookup=sub.local)


# -- search -------------------------------------------------------------------


@dataclass(frozen=True)
class RetrievalPath:
    nodes: tuple
    length: float

    @property
    def hops(self):
        return len(self.nodes) - 1

    def ids(self):
        return [n.id for n in self.nodes]

    def key(self):
        return (self.length, self.hops, tuple(n.key for n in self.nodes))


def distances_to(wg, target):
    """Exact shortest distance from every node to ``target`` (inf if unreachable)."""
    n = len(wg)
    mat = sp.csr_matrix((wg.weights, wg.indices, wg.indptr), shape=(n, n))
    return csgraph.dijkstra(mat.transpose().tocsr(), directed=True, indices=target)


def _search(lists, h, source_label, target, banned_nodes=frozenset(), banned_arcs=frozenset()):
    """Best path label ``(dist, hops, seq)`` from the label's last node to ``target``.

    A* over the arcs in ``lists`` with ``h`` the exact distance-to-target in
    the unrestricted graph: a consistent bound, so the search settles nodes
    with their final labels.  Labels are compared as ``(dist, hops, seq)``:
    among equal lengths fewer hops win, then the lexicographically smaller
    local-index sequence (local index order equals node-id order).  The heap
    is keyed on ``dist + h`` first.
    """
    ptr, idx, wts = lists
    dist0, hops0, seq0 = source_label
    start = seq0[-1]
    if h[start] == math.inf:
        return None
    best = {start: (dist0, hops0, seq0)}
    done = set()
    heap = [(dist0 + h[start], dist0, hops0, seq0)]
    while heap:
        _, d, hops, seq = heapq.heappop(heap)
        node = seq[-1]
        if node in done:
            continue
        done.add(node)
        if node == target:
            return d, hops, seq
        for j in range(ptr[node], ptr[node + 1]):
            nb = idx[j]
            hn = h[nb]
            if hn == math.inf or nb in done or nb in banned_nodes:
                continue
            if banned_arcs and (node, nb) in banned_arcs:
                continue
            label = (d + wts[j], hops + 1, seq + (nb,))
            cur = best.get(nb)
            if cur is None or label < cur:
                best[nb] = label
                heapq.heappush(heap, (label[0] + hn,) + label)
    return None


def _prefix_length(wg, seq, upto):
    total = 0.0
    for a, b in zip(seq[:upto], seq[1:upto + 1]):
        total += wg.weight(a, b)
    return total


def top_k_paths(wg, query_user, query_item, k=3):
    """Up to ``k`` loopless shortest paths (Yen's algorithm), best first."""
    if k < 1:
        raise ValueError("k must be >= 1")
    s, t = wg.local(query_user), wg.local(query_item)
    if s == t:
        return []
    lists = wg.lists()
    h = distances_to(wg, t).tolist()
    first = _search(lists, h, (0.0, 0, (s,)), t)
    if first is None:
        return []
    found = [first]
    seen = {first[2]}
    candidates = []
    while len(found) < k:
        prev = found[-1][2]
        for i in range(len(prev) - 1):
            root = prev[:i + 1]
            banned_arcs = {p[2][i:i + 2] for p in found if p[2][:i + 1] == root}
            banned_nodes = frozenset(root[:-1])
            label = (_prefix_length(wg, prev, i), i, root)
            spur = _search(lists, h, label, t, banned_nodes, banned_arcs)
            if spur is not None and spur[2] not in seen:
                seen.add(spur[2])
                heapq.heappush(candidates, spur)
        if not candidates:
            break
        found.append(heapq.heappop(candidates))
    nodes = wg.nodes
    return [RetrievalPath(tuple(nodes[x] for x in seq), d) for d, _, seq in found]


def path_length(wg, nodes):
    """Sequential sum of arc weights along ``nodes`` (NodeIds)."""
    seq = [wg.local(n) for n in nodes]
    return _prefix_length(wg, seq, len(seq) - 1)


def check_path(path, query_user, query_item):
    """Raise AssertionError unless ``path`` satisfies every path invariant."""
    nodes = path.nodes
    assert nodes[0] == query_user and nodes[-1] == query_item, "endpoints"
    assert len(set(nodes)) == len(nodes), "path is not simple"
    for a, b in zip(nodes, nodes[1:]):
        assert a.kind != b.kind, "kinds do not alternate"
    assert path.hops % 2 == 1, "hop count must be odd"
    assert path.length >= 0


# -- pipeline -----------------------------------------------------------------


@dataclass
class RetrievalOutcome:
    paths: list
    attempts: list = field(default_factory=list)  # (l_hop, k_core, n_nodes, n_paths)
    seconds: float = 0.0


def _ladder(config):
    steps = [(config.l_hop, config.k_core)]
    if config.fallback:
        steps += [(config.l_hop, c) for c in range(config.k_core - 1, 0, -1)]
        steps.append((config.l_hop + 1, 1))
    return steps


def retrieve_detailed(g, reps, query_user, query_item, config=None):
    config = config or RetrievalConfig()
    g.local(query_user)
    g.local(query_item)
    t0 = time.perf_counter()
    outcome = RetrievalOutcome([])
    for hops, core in _ladder(config):
        sub = l_hop_subgraph(g, query_user, query_item, hops)
        if config.remove_target_edge:
            sub = sub.without_edge(query_user, query_item)
        sub = k_core(sub, core, anchors=(query_user, query_item))
        wg = weight_edges(sub, reps, query_user, query_item, config.user_arc_rule)
        paths = top_k_paths(wg, query_user, query_item, config.k_paths)
        outcome.attempts.append((hops, core, len(sub), len(paths)))
        if paths:
            outcome.paths = paths
            break
    outcome.seconds = time.perf_counter() - t0
    return outcome


def retrieve(g, reps, query_user, query_item, config=None):
    """L-hop extraction, k-core pruning, weighting and top-k search with fallback."""
    return retrieve_detailed(g, reps, query_user, query_item, config).paths


# -- rendering ----------------------------------------------------------------


def _profile(node, profiles):
    table = profiles.user_profiles if node.kind == USER else profiles.item_profiles
    text = table.get(node.id)
    if not text:
        raise MissingProfile(f"no profile for {node}")
    return text


def render_path(path, profiles):
    nodes = path.nodes if isinstance(path, RetrievalPath) else tuple(path)
    parts = []
    for pos, node in enumerate(nodes):
        parts.append(_profile(node, profiles))
        if pos < len(nodes) - 1:
            parts.append(" -> buys -> " if node.kind == USER else " -> bought by -> ")
    return "".join(parts)


def render_prompt(query_user, query_item, paths, profiles):
    if isinstance(query_user, str):
        query_user = NodeId(USER, query_user)
    if isinstance(query_item, str):
        query_item = NodeId(ITEM, query_item)
    title = profiles.item_titles.get(query_item.id)
    if not title:
        raise MissingTitle(f"no title for {query_item}")
    block = "\n".join(f"Path {n}: {render_path(p, profiles)}" for n, p in enumerate(paths, 1))
    return PROMPT_TEMPLATE.format(
        title=title,
        item_profile=_profile(query_item, profiles),
        user_profile=_profile(query_user, profiles),
        paths=block + "\n",
    )
