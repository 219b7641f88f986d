"""Synthetic datasets with planted structure.

``planted_dataset`` builds users and items split into communities, each
community holding several item clusters.  Users buy mostly from one
favourite cluster inside their community, so both the graph and the item
embeddings carry the same latent structure.  ``sparse_graph`` builds a
large, sparse interaction graph (with random node vectors) for timing.
"""

from dataclasses import dataclass

import numpy as np

from .datastore import DataStore, EmbeddingTable, InteractionLog, ProfileStore
from .seeding import rng_for
from .userrep import VectorTable


@dataclass
class PlantedData:
    store: DataStore
    user_community: dict
    item_community: dict
    item_cluster: dict
    user_cluster: dict
    pairs: list  # (user, item) query pairs: each user's last interaction


def planted_dataset(n_users=500, n_items=200, communities=2, clusters_per_community=5,
                    text_dim=96, visual_dim=64, seq_len=(8, 14), p_favourite=0.7,
                    p_cross=0.03, noise=0.6, seed=0):
    rng = rng_for(seed, "synthetic/planted")
    n_clusters = communities * clusters_per_community
    item_ids = [f"i{k:04d}" for k in range(n_items)]
    user_ids = [f"u{k:04d}" for k in range(n_users)]
    item_cluster = {i: k % n_clusters for k, i in enumerate(item_ids)}
    item_community = {i: c // clusters_per_community for i, c in item_cluster.items()}
    by_cluster = {c: [i for i in item_ids if item_cluster[i] == c] for c in range(n_clusters)}
    by_comm = {m: [i for i in item_ids if item_community[i] == m] for m in range(communities)}

    def modality(dim, label):
        r = rng_for(seed, f"synthetic/{label}")
        centers = r.normal(0.0, 1.0, (n_clusters, dim))
        rows = np.array([centers[item_cluster[i]] for i in item_ids])
        return rows + noise * r.normal(0.0, 1.0, rows.shape)

    text = EmbeddingTable("text", text_dim, item_ids, modality(text_dim, "text"))
    visual = EmbeddingTable("visual", visual_dim, item_ids, modality(visual_dim, "visual"))

    entries = []
    user_community, user_cluster, pairs = {}, {}, []
    for k, u in enumerate(user_ids):
        comm = k % communities
        fav = comm * clusters_per_community + int(rng.integers(clusters_per_community))
        user_community[u], user_cluster[u] = comm, fav
        length = int(rng.integers(seq_len[0], seq_len[1] + 1))
        chosen = []
        for step in range(length):
            last = step == length - 1
            roll = rng.random()
            if last or roll < p_favourite:
                pool = by_cluster[fav]
            elif roll < 1.0 - p_cross:
                pool = by_comm[comm]
            else:
                pool = item_ids
            fresh = [i for i in pool if i not in chosen] or pool
            chosen.append(fresh[int(rng.integers(len(fresh)))])
        clock = int(rng.integers(0, 1_000_000))
        for it in chosen:
            clock += int(rng.integers(1, 1000))
            entries.append((u, it, clock))
        pairs.append((u, chosen[-1]))
    # users interleave in time; each user's own order is preserved
    entries.sort(key=lambda e: e[2])
    log = InteractionLog(tuple(entries))

    profiles = ProfileStore()
    for u in user_ids:
        profiles.user_profiles[u] = (f"A shopper in community {user_community[u]} who mostly "
                                     f"buys style {user_cluster[u]} products")
    for i in item_ids:
        profiles.item_profiles[i] = (f"A style {item_cluster[i]} product for community "
                                     f"{item_community[i]}")
        profiles.item_titles[i] = f"Product {i}"
    store = DataStore(text, visual, log, profiles)
    return PlantedData(store, user_community, item_community, item_cluster, user_cluster, pairs)


@dataclass
class SparseGraphData:
    log: InteractionLog
    users: VectorTable
    items: VectorTable


def sparse_graph(n_nodes=10_000, user_share=0.73, user_degree=8, dim=32, seed=0):
    """Sparse bipartite log with skewed item popularity plus random node vectors.

    The default user/item split and mean user degree follow the proportions
    of a typical Amazon review subset.
    """
    rng = rng_for(seed, "synthetic/sparse")
    n_users = int(round(n_nodes * user_share))
    n_items = n_nodes - n_users
    popularity = 1.0 / np.arange(1, n_items + 1) ** 0.6
    popularity /= popularity.sum()
    entries = []
    for u in range(n_users):
        deg = max(1, int(rng.poisson(user_degree - 1)) + 1)
        items = rng.choice(n_items, size=min(deg, n_items), replace=False, p=popularity)
        for it in items:
            entries.append((f"u{u:05d}", f"i{int(it):05d}", int(rng.integers(0, 10**9))))
    # items never drawn still need to exist so the node count is exact
    bought = {i for _, i, _ in entries}
    for it in range(n_items):
        name = f"i{it:05d}"
        if name not in bought:
            u = int(rng.integers(n_users))
            entries.append((f"u{u:05d}", name, int(rng.integers(0, 10**9))))
    users = VectorTable([f"u{u:05d}" for u in range(n_users)], rng.normal(size=(n_users, dim)))
    items = VectorTable([f"i{i:05d}" for i in range(n_items)], rng.normal(size=(n_items, dim)))
    return SparseGraphData(InteractionLog(tuple(entries)), users, items)
