"""Bipartite user-item graph, L-hop extraction and anchor-preserving k-core.

Nodes are kept in a single sorted order (by id, then kind) and adjacency is
stored as CSR arrays over that order, so every neighbor list is sorted and
local index order coincides with node-id order.  Subgraphs reuse the same
representation over a subset of parent indices.
"""

from collections import deque
from dataclasses import dataclass
from functools import total_ordering

import numpy as np

from .errors import UnknownNode

USER = "user"
ITEM = "item"


@total_ordering
@dataclass(frozen=True)
class NodeId:
    kind: str
    id: str

    def __post_init__(self):
        if self.kind not in (USER, ITEM):
            raise ValueError(f"node kind must be 'user' or 'item', got {self.kind!r}")

    @property
    def key(self):
        return (self.id, self.kind)

    def __lt__(self, other):
        if not isinstance(other, NodeId):
            return NotImplemented
        return self.key < other.key

    def __str__(self):
        return f"{self.kind}:{self.id}"

    @classmethod
    def parse(cls, text):
        kind, _, ident = text.partition(":")
        return cls(kind, ident)


def user(ident):
    return NodeId(USER, ident)


def item(ident):
    return NodeId(ITEM, ident)


def _gather(indptr, indices, rows):
    """Concatenated neighbor lists of ``rows`` plus the owning row of each entry."""
    rows = np.asarray(rows, dtype=np.int64)
    starts = indptr[rows]
    lens = indptr[rows + 1] - starts
    total = int(lens.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    owner = np.repeat(np.arange(len(rows)), lens)
    pos = np.arange(total) - np.repeat(np.cumsum(lens) - lens, lens) + np.repeat(starts, lens)
    return indices[pos], owner


def _csr_from_pairs(n, src, dst, presorted=False):
    """CSR arrays from arc lists; ``presorted`` means already ordered by (src, dst)."""
    if not presorted:
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n), out=indptr[1:])
    return indptr, dst.astype(np.int64)


class _Adjacency:
    """Shared read-only API over CSR arrays and a sorted node tuple."""

    nodes: tuple
    indptr: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return len(self.nodes)

    @property
    def degrees(self):
        return np.diff(self.indptr)

    @property
    def n_edges(self):
        return int(self.indptr[-1]) // 2

    def local(self, node):
        raise NotImplementedError

    def __contains__(self, node):
        try:
            self.local(node)
        except UnknownNode:
            return False
        return True

    def degree(self, node):
        i = self.local(node)
        return int(self.indptr[i + 1] - self.indptr[i])

    def neighbors(self, node):
        i = self.local(node)
        return tuple(self.nodes[j] for j in self.indices[self.indptr[i]:self.indptr[i + 1]])

    @property
    def adjacency(self):
        return {n: self.neighbors(n) for n in self.nodes}

    def edge_set(self):
        """Undirected edges as ``(user, item)`` pairs."""
        out = set()
        for i, node in enumerate(self.nodes):
            if node.kind != USER:
                continue
            for j in self.indices[self.indptr[i]:self.indptr[i + 1]]:
                out.add((node, self.nodes[j]))
        return out

    def node_set(self):
        return frozenset(self.nodes)


class BipartiteGraph(_Adjacency):
    def __init__(self, nodes, indptr, indices):
        self.nodes = tuple(nodes)
        self.index = {n: i for i, n in enumerate(self.nodes)}
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.kinds = np.array([n.kind == USER for n in self.nodes], dtype=bool)

    def local(self, node):
        try:
            return self.index[node]
        except KeyError:
            raise UnknownNode(f"node {node} is not in the graph") from None

    @property
    def n_users(self):
        return int(self.kinds.sum())

    @property
    def n_items(self):
        return len(self.nodes) - self.n_users

    @classmethod
    def from_edges(cls, pairs):
        """``pairs`` of (user id, item id); duplicates collapse."""
        pairs = sorted(set(pairs))
        nodes = sorted({user(u) for u, _ in pairs} | {item(i) for _, i in pairs})
        index = {n: k for k, n in enumerate(nodes)}
        src = np.array([index[user(u)] for u, _ in pairs], dtype=np.int64)
        dst = np.array([index[item(i)] for _, i in pairs], dtype=np.int64)
        indptr, indices = _csr_from_pairs(len(nodes), np.concatenate([src, dst]),
                                          np.concatenate([dst, src]))
        return cls(nodes, indptr, indices)

    def as_subgraph(self):
        return Subgraph(self, np.arange(len(self.nodes)), self.indptr, self.indices)


def build(log):
    """One undirected edge per distinct (user, item) pair of the log."""
    return BipartiteGraph.from_edges((u, i) for u, i, _ in log)


class Subgraph(_Adjacency):
    """A node subset of a parent graph with (by default induced) adjacency.

    ``members`` holds sorted parent indices; local index ``k`` refers to
    parent node ``members[k]``.
    """

    def __init__(self, parent, members, indptr, indices):
        self.parent = parent
        self.members = np.asarray(members, dtype=np.int64)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self._nodes = None

    @property
    def nodes(self):
        if self._nodes is None:
            pn = self.parent.nodes
            self._nodes = tuple(pn[i] for i in self.members)
        return self._nodes

    def __len__(self):
        return len(self.members)

    def local(self, node):
        p = self.parent.local(node)
        k = int(np.searchsorted(self.members, p))
        if k >= len(self.members) or self.members[k] != p:
            raise UnknownNode(f"node {node} is not in the subgraph")
        return k

    def local_of_parent(self, p):
        k = int(np.searchsorted(self.members, p))
        if k >= len(self.members) or self.members[k] != p:
            return -1
        return k

    def without_edge(self, a, b):
        """Copy with the undirected edge ``a``-``b`` removed (no-op if absent)."""
        if a not in self or b not in self:
            return self
        ia, ib = self.local(a), self.local(b)
        src = np.repeat(np.arange(len(self)), self.degrees)
        keep = ~(((src == ia) & (self.indices == ib)) | ((src == ib) & (self.indices == ia)))
        if keep.all():
            return self
        indptr, indices = _csr_from_pairs(len(self), src[keep], self.indices[keep],
                                          presorted=True)
        return Subgraph(self.parent, self.members, indptr, indices)

    def restrict(self, keep_local):
        """Induced sub-subgraph on the local indices flagged in ``keep_local``."""
        keep_local = np.asarray(keep_local, dtype=bool)
        new_of_old = np.full(len(self), -1, dtype=np.int64)
        kept = np.flatnonzero(keep_local)
        new_of_old[kept] = np.arange(len(kept))
        src = np.repeat(np.arange(len(self)), self.degrees)
        mask = keep_local[src] & keep_local[self.indices]
        indptr, indices = _csr_from_pairs(len(kept), new_of_old[src[mask]],
                                          new_of_old[self.indices[mask]], presorted=True)
        return Subgraph(self.parent, self.members[kept], indptr, indices)


def induced_subgraph(g, members):
    """Induced subgraph of ``g`` on sorted parent indices ``members``."""
    members = np.unique(np.asarray(members, dtype=np.int64))
    local_of = np.full(len(g.nodes), -1, dtype=np.int64)
    local_of[members] = np.arange(len(members))
    nbrs, owner = _gather(g.indptr, g.indices, members)
    mapped = local_of[nbrs]
    keep = mapped >= 0
    # owners ascend and parent neighbor lists are sorted, so the arcs are too
    indptr, indices = _csr_from_pairs(len(members), owner[keep], mapped[keep], presorted=True)
    return Subgraph(g, members, indptr, indices)


def ball(g, sources, radius):
    """Parent indices within ``radius`` hops of any of ``sources``."""
    seen = np.zeros(len(g.nodes), dtype=bool)
    frontier = np.unique(np.asarray(sources, dtype=np.int64))
    seen[frontier] = True
    for _ in range(radius):
        if len(frontier) == 0:
            break
        nbrs, _ = _gather(g.indptr, g.indices, frontier)
        nbrs = np.unique(nbrs)
        frontier = nbrs[~seen[nbrs]]
        seen[frontier] = True
    return np.flatnonzero(seen)


def l_hop_subgraph(g, u, v, L=3):
    """Induced subgraph on the union of the radius-L balls around u and v."""
    if L < 1:
        raise ValueError("L must be >= 1")
    sources = [g.local(u), g.local(v)]
    return induced_subgraph(g, ball(g, sources, L))


def k_core(sub, k, anchors=()):
    """Anchor-preserving k-core by iterative peeling.

    Nodes below degree ``k`` are removed in waves (every queued node of the
    current wave at once), neighbor degrees are decremented, and newly
    deficient nodes form the next wave.  Anchors are never queued.  The
    result equals the sequential queue algorithm (see :func:`k_core_queue`).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(sub)
    if n == 0:
        return sub
    protected = np.zeros(n, dtype=bool)
    for a in anchors:
        protected[sub.local(a)] = True
    deg = sub.degrees.copy()
    alive = np.ones(n, dtype=bool)
    wave = np.flatnonzero((deg < k) & ~protected)
    while len(wave):
        alive[wave] = False
        nbrs, _ = _gather(sub.indptr, sub.indices, wave)
        nbrs = nbrs[alive[nbrs]]
        np.subtract.at(deg, nbrs, 1)
        cand = np.unique(nbrs)
        wave = cand[(deg[cand] < k) & ~protected[cand]]
    if alive.all():
        return sub
    return sub.restrict(alive)


def k_core_queue(sub, k, anchors=(), rng=None):
    """Literal queue-based peeling; ``rng`` randomizes the queue discipline."""
    n = len(sub)
    protected = {sub.local(a) for a in anchors}
    deg = sub.degrees.astype(np.int64).tolist()
    ptr = sub.indptr.tolist()
    idx = sub.indices.tolist()
    alive = [True] * n
    queue = deque(i for i in range(n) if deg[i] < k and i not in protected)
    if rng is not None:
        queue = deque(rng.permutation(list(queue)).tolist())
    while queue:
        if rng is not None and len(queue) > 1:
            pick = int(rng.integers(len(queue)))
            queue.rotate(-pick)
        node = queue.popleft()
        if not alive[node]:
            continue
        alive[node] = False
        for nb in idx[ptr[node]:ptr[node + 1]]:
            if not alive[nb]:
                continue
            deg[nb] -= 1
            if deg[nb] < k and nb not in protected:
                queue.append(nb)
    return sub.restrict(np.array(alive, dtype=bool))
