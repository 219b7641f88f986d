"""Graph encoding of retrieval paths and the mixture-of-experts adapter.

For each retrieved path the path nodes plus their 1-hop neighbors form a
small subgraph.  A mean-aggregation graph convolution encodes it, the
per-path encodings are concatenated (zero-padded to ``k`` slots) and the
MoE adapter maps the result to a soft-prompt vector.  Only the forward pass
lives here; weights are plain arrays that round-trip through files.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datastore import parse_embeddings, write_matrix
from .errors import DimMismatch, TooManyPaths
from .graph import ball, induced_subgraph
from .seeding import rng_for

EXPORT_SCHEMA_VERSION = 1
DEFAULT_GNN_DIM = 64
DEFAULT_EXPERTS = 4
DEFAULT_OUT_DIM = 2048

ACTIVATIONS = {
    "relu": lambda x: np.maximum(x, 0.0),
    "identity": lambda x: x,
}


@dataclass
class GNNParams:
    weight: np.ndarray  # (d_in, d_g)
    bias: np.ndarray  # (d_g,)
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (self.weight.shape[1],):
            raise DimMismatch("GNN bias does not match weight")

    @property
    def d_in(self):
        return self.weight.shape[0]

    @property
    def d_out(self):
        return self.weight.shape[1]

    @classmethod
    def init(cls, d_in, d_g=DEFAULT_GNN_DIM, seed=0, activation="relu"):
        rng = rng_for(seed, "gnn")
        return cls(rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, d_g)), np.zeros(d_g), activation)


@dataclass
class MoEParams:
    experts: np.ndarray  # (n, d_in, d_out)
    biases: np.ndarray  # (n, d_in), added to the input before the expert map
    gate: np.ndarray  # (d_in, n)
    dropout: float = 0.0

    def __post_init__(self):
        self.experts = np.asarray(self.experts, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        self.gate = np.asarray(self.gate, dtype=np.float64)
        n, d_in, _ = self.experts.shape
        if n < 1:
            raise ValueError("need at least one expert")
        if self.biases.shape != (n, d_in) or self.gate.shape != (d_in, n):
            raise DimMismatch("MoE parameter shapes are inconsistent")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def n_experts(self):
        return self.experts.shape[0]

    @property
    def d_in(self):
        return self.experts.shape[1]

    @property
    def d_out(self):
        return self.experts.shape[2]

    @classmethod
    def init(cls, d_in, d_out=DEFAULT_OUT_DIM, n_experts=DEFAULT_EXPERTS, seed=0, dropout=0.0):
        rng = rng_for(seed, "moe")
        scale = 1.0 / np.sqrt(d_in)
        return cls(rng.normal(0.0, scale, (n_experts, d_in, d_out)),
                   np.zeros((n_experts, d_in)),
                   rng.normal(0.0, scale, (d_in, n_experts)), dropout)


# -- graph encoder ------------------------------------------------------------


def retrieval_subgraph(g, path):
    """Path nodes plus their 1-hop neighbors in ``g``, with induced edges."""
    nodes = path.nodes if hasattr(path, "nodes") else tuple(path)
    members = ball(g, [g.local(n) for n in nodes], 1)
    return induced_subgraph(g, members)


def _rows(sub, reps):
    return np.array([reps.vector(node) for node in sub.nodes]).reshape(len(sub), -1)


def gnn_encode(sub, reps, params):
    """Mean over nodes of ``act(W . mean(self and neighbors) + b)``."""
    x = _rows(sub, reps)
    if x.shape[1] != params.d_in:
        raise DimMismatch(f"representation dim {x.shape[1]} != {params.d_in}")
    deg = sub.degrees
    owner = np.repeat(np.arange(len(sub)), deg)
    agg = x.copy()
    np.add.at(agg, owner, x[sub.indices])
    message = agg / (deg + 1)[:, None]
    out = ACTIVATIONS[params.activation](message @ params.weight + params.bias)
    return out.mean(axis=0)


def concat_paths(encodings, k, dim=None):
    """Concatenate per-path encodings, zero-padding to exactly ``k`` blocks."""
    if len(encodings) > k:
        raise TooManyPaths(f"{len(encodings)} encodings for {k} slots")
    if dim is None:
        if not encodings:
            raise ValueError("dim is required when there are no encodings")
        dim = len(encodings[0])
    out = np.zeros(k * dim)
    for slot, enc in enumerate(encodings):
        enc = np.asarray(enc, dtype=np.float64)
        if enc.shape != (dim,):
            raise DimMismatch(f"encoding shape {enc.shape} != ({dim},)")
        out[slot * dim:(slot + 1) * dim] = enc
    return out


# -- mixture of experts -------------------------------------------------------


def gate_weights(x, params):
    logits = np.asarray(x, dtype=np.float64) @ params.gate
    logits = logits - logits.max()
    w = np.exp(logits)
    return w / w.sum()


def moe_forward(x, params, training=False, rng=None):
    """Gate-weighted sum of expert maps, each applied to ``dropout(x) + bias``.

    The gate is ``softmax(x @ params.gate)``.

    Dropout is inverted and only applied when ``training`` is set.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.d_in,):
        raise DimMismatch(f"input shape {x.shape} != ({params.d_in},)")
    gate = gate_weights(x, params)
    xd = x
    if training and params.dropout > 0.0:
        rng = rng if rng is not None else np.random.default_rng(0)
        keep = rng.random(x.shape) >= params.dropout
        xd = x * keep / (1.0 - params.dropout)
    expert_out = np.einsum("ni,nio->no", xd[None, :] + params.biases, params.experts)
    return gate @ expert_out


def expert_outputs(x, params):
    return np.einsum("ni,nio->no", np.asarray(x)[None, :] + params.biases, params.experts)


def soft_prompt(g, reps, paths, gnn, moe, k):
    encodings = [gnn_encode(retrieval_subgraph(g, p), reps, gnn) for p in paths]
    return moe_forward(concat_paths(encodings, k, gnn.d_out), moe)


# -- weight files -------------------------------------------------------------


def _save_tensor(directory, name, arr):
    arr = np.asarray(arr, dtype=np.float64)
    flat = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(1, -1)
    write_matrix(directory / f"{name}.tsv", [str(i) for i in range(len(flat))], flat)
    return list(arr.shape)


def _load_tensor(directory, name, shape):
    table = parse_embeddings((directory / f"{name}.tsv").read_text().splitlines(), None)
    return table.matrix.reshape(shape)


def save_gnn(params, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shapes = {n: _save_tensor(directory, f"gnn_{n}", getattr(params, n))
              for n in ("weight", "bias")}
    (directory / "gnn.json").write_text(json.dumps(
        {"shapes": shapes, "activation": params.activation}, indent=2, sort_keys=True) + "\n")


def load_gnn(directory):
    directory = Path(directory)
    meta = json.loads((directory / "gnn.json").read_text())
    return GNNParams(_load_tensor(directory, "gnn_weight", meta["shapes"]["weight"]),
                     _load_tensor(directory, "gnn_bias", meta["shapes"]["bias"]),
                     meta["activation"])


def save_moe(params, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shapes = {n: _save_tensor(directory, f"moe_{n}", getattr(params, n))
              for n in ("experts", "biases", "gate")}
    (directory / "moe.json").write_text(json.dumps(
        {"shapes": shapes, "dropout": params.dropout}, indent=2, sort_keys=True) + "\n")


def load_moe(directory):
    directory = Path(directory)
    meta = json.loads((directory / "moe.json").read_text())
    arrs = {n: _load_tensor(directory, f"moe_{n}", meta["shapes"][n])
            for n in ("experts", "biases", "gate")}
    return MoEParams(dropout=meta["dropout"], **arrs)


# -- export -------------------------------------------------------------------


@dataclass
class SoftPromptBundle:
    user: str
    item: str
    prompt: str
    paths: list  # list of node-id lists
    soft_prompt: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_json(self):
        if not np.all(np.isfinite(self.soft_prompt)):
            raise ValueError("soft prompt contains non-finite values")
        rec = {
            "user": self.user,
            "item": self.item,
            "prompt": self.prompt,
            "paths": [list(p) for p in self.paths],
            "soft_prompt": [float(x) for x in self.soft_prompt],
            "meta": self.meta,
        }
        return json.dumps(rec, ensure_ascii=False, sort_keys=False)


def config_hash(mapping):
    blob = json.dumps(mapping, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def export_bundle(u, v, paths, prompt, soft_prompt_vec, out, config_digest="", seed=0):
    """Append one JSON line for the pair to the text stream ``out``."""
    node_paths = [[n.id for n in p.nodes] if hasattr(p, "nodes") else list(p) for p in paths]
    bundle = SoftPromptBundle(u, v, prompt, node_paths, np.asarray(soft_prompt_vec),
                              {"config_hash": config_digest, "seed": seed,
                               "version": EXPORT_SCHEMA_VERSION})
    out.write(bundle.to_json() + "\n")
    return 1


def read_bundles(path):
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]

