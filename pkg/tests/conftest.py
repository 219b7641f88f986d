import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from pathrec.datastore import STORE_FILES, save_store  # noqa: E402
from pathrec.synthetic import planted_dataset  # noqa: E402

# settings small enough for a full pipeline run in a few seconds
TINY = dict(L_codebooks=2, K=8, d=8, kmeans_iters=10, projection_epochs=2, user_epochs=2,
            negatives=4, batch_size=16, gnn_dim=8, d_out=16, n_experts=2)


def input_paths(directory):
    return {"embeddings_text": str(directory / STORE_FILES["text"]),
            "embeddings_visual": str(directory / STORE_FILES["visual"]),
            "interactions": str(directory / STORE_FILES["interactions"]),
            "profiles": str(directory / STORE_FILES["profiles"])}


@pytest.fixture(scope="session")
def tiny_inputs(tmp_path_factory):
    data = planted_dataset(n_users=40, n_items=30, text_dim=12, visual_dim=10, seed=1)
    directory = tmp_path_factory.mktemp("tiny") / "in"
    save_store(data.store, directory)
    return input_paths(directory)
