"""Explainable path retrieval over user-item interaction graphs.

The package turns multimodal item embeddings, text profiles and an
interaction log into ranked user-to-item paths, an instruction prompt and a
soft-prompt vector per (user, item) pair.
"""

__version__ = "0.1.0"

from .config import PipelineConfig, load_config
from .datastore import (DataStore, EmbeddingTable, InteractionLog, ProfileStore, UserSequence,
                        derive_sequences, load_embeddings, load_interactions, load_profiles,
                        load_store, save_store)
from .encoder import (GNNParams, MoEParams, SoftPromptBundle, concat_paths, export_bundle,
                      gnn_encode, moe_forward, retrieval_subgraph)
from .errors import *  # noqa: F401,F403
from .graph import BipartiteGraph, NodeId, Subgraph, build, k_core, l_hop_subgraph
from .pipeline import Pipeline, bench_retrieval, run_pipeline
from .retrieval import (NodeReps, RetrievalConfig, RetrievalPath, edge_weight, render_prompt,
                        retrieve, top_k_paths, weight_edges)
from .rq import (CodebookStack, ProjectionParams, SemanticId, commit_loss, fit_codebooks,
                 quantize, train_projection)
from .userrep import (FeatureContext, SeqEncoderParams, encode_user, infonce, item_feature,
                      train_user_rep)
