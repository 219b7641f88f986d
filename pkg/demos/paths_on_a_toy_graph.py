"""Walk through path retrieval on a toy shop.

Builds a small interaction graph, shows what each pruning step keeps,
weights the surviving arcs and prints the ranked paths and the prompt.
"""

import numpy as np

from pathrec import (BipartiteGraph, NodeReps, ProfileStore, RetrievalConfig, k_core,
                     l_hop_subgraph, render_prompt, retrieve, top_k_paths, weight_edges)
from pathrec.graph import item, user
from pathrec.userrep import VectorTable

edges = [("ana", "blocks"), ("ana", "rattle"), ("ben", "blocks"), ("ben", "swaddle"),
         ("cai", "rattle"), ("cai", "swaddle"), ("cai", "mobile"), ("dee", "mobile"),
         ("dee", "blocks"), ("eli", "bib")]
g = BipartiteGraph.from_edges(edges)
print(f"graph: {g.n_users} users, {g.n_items} items, {g.n_edges} edges")

u, v = user("ana"), item("swaddle")

# the ball around both endpoints
sub = l_hop_subgraph(g, u, v, 3)
print("3-hop subgraph:", sorted(n.id for n in sub.nodes))

# peel low-degree nodes, keeping the endpoints
core = k_core(sub, 2, anchors=(u, v))
print("2-core:", sorted(n.id for n in core.nodes))

# user and item vectors; here random, in the pipeline they come from the sequence encoder
rng = np.random.default_rng(0)
users = sorted({a for a, _ in edges})
items = sorted({b for _, b in edges})
reps = NodeReps(VectorTable(users, rng.normal(size=(len(users), 8))),
                VectorTable(items, rng.normal(size=(len(items), 8))))

wg = weight_edges(core, reps, u, v)
print("\narc weights (log of dissimilarity times degree, 1 into the target):")
for (a, b), w in sorted(wg.arcs().items()):
    print(f"  {a.id:>8} -> {b.id:<8} {w:.3f}")

print("\ntop paths:")
for p in top_k_paths(wg, u, v, 3):
    print(f"  {p.length:6.3f}  " + " -> ".join(p.ids()))

# the same thing in one call, with the fallback ladder
paths = retrieve(g, reps, u, v, RetrievalConfig(k_paths=2))

profiles = ProfileStore(
    {"ana": "New parent who likes wooden toys", "ben": "Buys organic baby basics",
     "cai": "Shops for nursery decor", "dee": "Grandparent buying gifts", "eli": "Bargain hunter"},
    {"blocks": "Wooden alphabet blocks", "rattle": "Maple wood rattle",
     "swaddle": "Organic muslin swaddle", "mobile": "Felt animal crib mobile",
     "bib": "Silicone bib"},
    {"swaddle": "Muslin Swaddle 3-Pack"})
print("\n" + render_prompt(u, v, paths, profiles))
