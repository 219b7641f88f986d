"""Multimodal item features and the sequence encoder for user representations.

An item feature concatenates four blocks of latent dim ``d``: text latent,
text quantized, visual latent and visual quantized.
A user is encoded by mean-pooling the features of their sequence and applying
a learned square linear map.  Training uses InfoNCE over sampled negatives.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, EmptySequence, MissingModality, NonFiniteLoss, UnknownItem
from .rq import LinearMap, ProjectionParams, quantize_batch
from .seeding import rng_for

log = logging.getLogger(__name__)

DEFAULT_NEGATIVES = 32


@dataclass(frozen=True)
class ItemFeature:
    item: str
    vector: np.ndarray


@dataclass(frozen=True)
class UserRep:
    user: str
    vector: np.ndarray


class VectorTable:
    """Ids plus a row-aligned matrix; used for item features and user reps."""

    def __init__(self, ids, matrix):
        self.ids = tuple(ids)
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.index = {k: i for i, k in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def __contains__(self, key):
        return key in self.index

    def __getitem__(self, key):
        return self.matrix[self.index[key]]

    def take(self, keys):
        return self.matrix[[self.index[k] for k in keys]]


@dataclass
class SeqEncoderParams:
    projection: ProjectionParams
    weight: np.ndarray  # (4d, 4d), h = weight @ pooled + bias
    bias: np.ndarray

    @classmethod
    def init(cls, projection, seed=0, noise=1e-2):
        dim = 4 * projection.latent_dim
        rng = rng_for(seed, "seqenc/weight")
        return cls(projection.copy(), np.eye(dim) + rng.normal(0.0, noise, (dim, dim)),
                   np.zeros(dim))

    def copy(self):
        return SeqEncoderParams(self.projection.copy(), self.weight.copy(), self.bias.copy())

    def flat(self):
        return np.concatenate([self.weight.ravel(), self.bias, self.projection.flat()])

    def with_flat(self, vec):
        n = self.weight.size
        d = len(self.bias)
        return SeqEncoderParams(self.projection.with_flat(vec[n + d:]),
                                vec[:n].reshape(self.weight.shape).copy(), vec[n:n + d].copy())


class FeatureContext:
    """Raw per-modality inputs aligned on item ids, plus the frozen codebooks."""

    def __init__(self, text, visual, stacks):
        self.text = text
        self.visual = visual
        self.stacks = stacks
        self.item_ids = tuple(i for i in text.ids if i in visual)
        self.index = {k: i for i, k in enumerate(self.item_ids)}
        self.inputs = {"text": text.take(self.item_ids), "visual": visual.take(self.item_ids)}

    def rows(self, items):
        out = []
        for item in items:
            if item not in self.index:
                if item in self.text or item in self.visual:
                    raise MissingModality(f"item {item!r} is missing a modality")
                raise UnknownItem(f"unknown item {item!r}")
            out.append(self.index[item])
        return np.asarray(out, dtype=np.int64)

    def features(self, projection, rows=None):
        """Feature matrix for ``rows`` (all items when None)."""
        blocks = []
        for m in ("text", "visual"):
            x = self.inputs[m] if rows is None else self.inputs[m][rows]
            z = projection[m](x)
            _, zq, _ = quantize_batch(z, self.stacks[m])
            blocks += [z, zq]
        return np.concatenate(blocks, axis=1)

    def feature_table(self, projection):
        return VectorTable(self.item_ids, self.features(projection))


def item_feature(item, context, projection):
    """Four-block feature of a single item."""
    if item not in context.text and item not in context.visual:
        raise UnknownItem(f"unknown item {item!r}")
    if item not in context.text or item not in context.visual:
        raise MissingModality(f"item {item!r} is missing a modality")
    vec = context.features(projection, context.rows([item]))[0]
    return ItemFeature(item, vec)


def encode_user(seq, features, params):
    if len(seq.items) == 0:
        raise EmptySequence(f"user {seq.user!r} has an empty sequence")
    missing = [i for i in seq.items if i not in features]
    if missing:
        raise UnknownItem(f"no feature for item {missing[0]!r}")
    pooled = features.take(seq.items).mean(axis=0)
    return UserRep(seq.user, params.weight @ pooled + params.bias)


def encode_users(sequences, features, params):
    ids, rows = [], []
    for seq in sequences:
        ids.append(seq.user)
        rows.append(encode_user(seq, features, params).vector)
    dim = len(params.bias)
    return VectorTable(ids, np.array(rows).reshape(len(ids), dim))


def _vec(x):
    return x.vector if isinstance(x, (ItemFeature, UserRep)) else np.asarray(x, dtype=np.float64)


def infonce(h, pos, negs, temperature=1.0):
    """``-log softmax`` of the positive logit among positive plus negatives."""
    if len(negs) == 0:
        raise ValueError("need at least one negative")
    h = _vec(h)
    cands = np.stack([_vec(pos)] + [_vec(n) for n in negs])
    logits = cands @ h / temperature
    m = logits.max()
    return float(m + np.log(np.exp(logits - m).sum()) - logits[0])


def cosine_sim(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# -- training -----------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    context: tuple  # item ids fed to the encoder
    positive: str
    negatives: tuple


def batch_loss_grad(params, batch, context, temperature=1.0, with_grad=True):
    """Mean InfoNCE over ``batch`` and its gradient as a ``SeqEncoderParams``.

    Quantized feature blocks are piecewise constant in the projection, so
    only the two projected blocks carry gradient back into the encoders.
    """
    involved = sorted({i for s in batch for i in s.context + (s.positive,) + s.negatives})
    local = {item: k for k, item in enumerate(involved)}
    rows = context.rows(involved)
    feats = context.features(params.projection, rows)
    b = len(batch)
    pool = np.zeros((b, len(involved)))
    for s_idx, s in enumerate(batch):
        if not s.context:
            raise EmptySequence("sample with empty context")
        for item in s.context:
            pool[s_idx, local[item]] += 1.0 / len(s.context)
    n_neg = len(batch[0].negatives)
    cands = np.array([[local[s.positive]] + [local[n] for n in s.negatives] for s in batch])
    if cands.shape[1] != n_neg + 1:
        raise ValueError("all samples in a batch need the same number of negatives")

    pooled = pool @ feats
    hs = pooled @ params.weight.T + params.bias
    cf = feats[cands]  # (b, 1+neg, D)
    logits = np.einsum("bd,bkd->bk", hs, cf) / temperature
    mx = logits.max(1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(logits - mx).sum(1))
    loss = float(np.mean(lse - logits[:, 0]))
    if not with_grad:
        return loss, None

    probs = np.exp(logits - lse[:, None])
    g = probs.copy()
    g[:, 0] -= 1.0
    g /= b * temperature
    d_h = np.einsum("bk,bkd->bd", g, cf)
    d_feat = np.zeros_like(feats)
    np.add.at(d_feat, cands, g[..., None] * hs[:, None, :])
    d_weight = d_h.T @ pooled
    d_bias = d_h.sum(0)
    d_feat += pool.T @ (d_h @ params.weight)

    d = params.projection.latent_dim
    grads = {}
    for block, m in ((0, "text"), (2, "visual")):
        gz = d_feat[:, block * d:(block + 1) * d]
        x = context.inputs[m][rows]
        grads[m] = LinearMap(x.T @ gz, gz.sum(0))
    return loss, SeqEncoderParams(ProjectionParams(grads), d_weight, d_bias)


def train_step(params, batch, lr, context, temperature=1.0):
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    loss, grad = batch_loss_grad(params, batch, context, temperature)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"InfoNCE loss became {loss}")
    if lr == 0:
        return params.copy(), loss
    return params.with_flat(params.flat() - lr * grad.flat()), loss


def sample_negatives(rng, n_items, exclude, count):
    """Uniform draw of ``count`` distinct item rows outside ``exclude``."""
    allowed = np.setdiff1d(np.arange(n_items), np.fromiter(exclude, dtype=np.int64))
    if len(allowed) == 0:
        raise ValueError("no items left to sample negatives from")
    replace = len(allowed) < count
    return rng.choice(allowed, size=count, replace=replace)


def make_samples(sequences, context, rng, negatives=DEFAULT_NEGATIVES):
    """One next-item sample per user with a random split point."""
    samples = []
    n_items = len(context.item_ids)
    for seq in sequences:
        if len(seq.items) < 2:
            continue
        cut = int(rng.integers(1, len(seq.items)))
        exclude = set(context.rows(seq.items).tolist())
        negs = sample_negatives(rng, n_items, exclude, negatives)
        samples.append(Sample(tuple(seq.items[:cut]), seq.items[cut],
                              tuple(context.item_ids[k] for k in negs)))
    return samples


@dataclass
class UserRepTrainResult:
    params: SeqEncoderParams
    losses: list  # mean loss per epoch


def train_user_rep(sequences, context, params, epochs=30, lr=0.05, negatives=DEFAULT_NEGATIVES,
                   batch_size=64, seed=0, temperature=1.0):
    rng = rng_for(seed, "userrep/train")
    losses = []
    for epoch in range(epochs):
        samples = make_samples(sequences, context, rng, negatives)
        order = rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(samples), batch_size):
            batch = [samples[k] for k in order[start:start + batch_size]]
            params, loss = train_step(params, batch, lr, context, temperature)
            total += loss * len(batch)
        losses.append(total / max(len(samples), 1))
        log.info("user-rep epoch %d: loss %.6g", epoch, losses[-1])
    return UserRepTrainResult(params, losses)


def recall_at_k(params, context, sequences, k=10):
    """Hold out each user's last item, rank all items by dot product with the user vector.

    Items already in the user's context are excluded from the ranking.
    """
    feats = context.feature_table(params.projection)
    hits, total = 0, 0
    for seq in sequences:
        if len(seq.items) < 2:
            continue
        ctx, target = seq.items[:-1], seq.items[-1]
        h = encode_user(type(seq)(seq.user, ctx), feats, params).vector
        scores = feats.matrix @ h
        seen = [feats.index[i] for i in ctx if i != target]
        scores[seen] = -np.inf
        top = np.argsort(-scores, kind="stable")[:k]
        hits += int(feats.index[target] in top)
        total += 1
    return hits / total if total else 0.0
