"""Root-seed splitting.

Every stage draws from its own generator derived from ``(root_seed, label)``
so adding randomness to one stage never shifts the stream of another.
"""

import hashlib

import numpy as np


def label_key(label):
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(root_seed, label):
    ss = np.random.SeedSequence([int(root_seed) & 0xFFFFFFFFFFFFFFFF, label_key(label)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_for(root_seed, label):
    return np.random.default_rng(derive_seed(root_seed, label))
