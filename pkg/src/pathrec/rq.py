"""Residual quantization of item embeddings into semantic ids.

The encoder is a linear map per modality and the decoder is the identity in
latent space, so every quantity is an explicit numpy expression.  Codebooks
are fitted greedily, one layer at a time, with Lloyd's k-means on the
residuals left by the previous layers.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import BatchTooSmall, DimMismatch, EmptyInput, NonFiniteLoss, NotFitted
from .seeding import rng_for

log = logging.getLogger(__name__)

DEFAULT_LAYERS = 4
DEFAULT_CODEBOOK_SIZE = 256
DEFAULT_LATENT_DIM = 64
DEFAULT_BETA = 0.25
DEFAULT_TAU = 0.07


class DegenerateLayerWarning(UserWarning):
    """A layer had fewer distinct residuals than codewords."""


@dataclass
class LinearMap:
    weight: np.ndarray  # (d_in, d_out)
    bias: np.ndarray  # (d_out,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.bias.shape != (self.weight.shape[1],):
            raise DimMismatch(f"bias shape {self.bias.shape} != ({self.weight.shape[1]},)")

    @property
    def d_in(self):
        return self.weight.shape[0]

    @property
    def d_out(self):
        return self.weight.shape[1]

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d_in:
            raise DimMismatch(f"input dim {x.shape[-1]} != {self.d_in}")
        return x @ self.weight + self.bias

    def copy(self):
        return LinearMap(self.weight.copy(), self.bias.copy())

    @classmethod
    def init(cls, d_in, d_out, rng):
        return cls(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out)), np.zeros(d_out))


@dataclass
class ProjectionParams:
    """One linear encoder per modality, all mapping into the same latent dim."""

    maps: dict = field(default_factory=dict)

    def __getitem__(self, modality):
        return self.maps[modality]

    def __contains__(self, modality):
        return modality in self.maps

    @property
    def latent_dim(self):
        return next(iter(self.maps.values())).d_out

    def copy(self):
        return ProjectionParams({m: p.copy() for m, p in self.maps.items()})

    @classmethod
    def init(cls, dims, latent_dim=DEFAULT_LATENT_DIM, seed=0):
        """``dims`` maps modality -> input dim."""
        return cls({m: LinearMap.init(d, latent_dim, rng_for(seed, f"projection/{m}"))
                    for m, d in sorted(dims.items())})

    def flat(self):
        return np.concatenate([np.concatenate([self.maps[m].weight.ravel(), self.maps[m].bias])
                               for m in sorted(self.maps)])

    def with_flat(self, vec):
        out, pos = {}, 0
        for m in sorted(self.maps):
            w = self.maps[m].weight
            n = w.size
            weight = vec[pos:pos + n].reshape(w.shape)
            pos += n
            bias = vec[pos:pos + w.shape[1]]
            pos += w.shape[1]
            out[m] = LinearMap(weight.copy(), bias.copy())
        return ProjectionParams(out)


@dataclass
class CodebookStack:
    modality: str
    codebooks: np.ndarray  # (L, K, d)
    seed: int = 0
    fitted: bool = True

    @property
    def layers(self):
        return self.codebooks.shape[0]

    @property
    def size(self):
        return self.codebooks.shape[1]

    @property
    def dim(self):
        return self.codebooks.shape[2]


@dataclass(frozen=True)
class SemanticId:
    modality: str
    indices: tuple

    def __str__(self):
        return ",".join(str(i) for i in self.indices)


@dataclass
class QuantizationResult:
    sid: SemanticId
    quantized: np.ndarray
    residuals: list  # r_1 .. r_{L+1}


# -- fitting ------------------------------------------------------------------


def _sq_dists(x, centers):
    """Pairwise squared distances, clipped at zero against cancellation."""
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _seed_centers(x, k, rng):
    """k-means++ seeding whose first center is the mean of ``x``.

    Starting from the mean guarantees the fitted layer never ends with more
    energy than the variance of its input.
    """
    centers = np.empty((k, x.shape[1]))
    centers[0] = x.mean(axis=0)
    closest = ((x - centers[0]) ** 2).sum(1)
    degenerate = False
    for c in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            degenerate = True
            centers[c:] = centers[0] if c == 1 else centers[c - 1]
            break
        pick = rng.choice(len(x), p=closest / total)
        centers[c] = x[pick]
        closest = np.minimum(closest, ((x - centers[c]) ** 2).sum(1))
    return centers, degenerate


def kmeans(x, k, rng, max_iters=50, tol=1e-6):
    """Lloyd's algorithm; returns (centers, labels, mean squared error)."""
    centers, degenerate = _seed_centers(x, k, rng)
    labels = _sq_dists(x, centers).argmin(1)
    energy = ((x - centers[labels]) ** 2).sum(1).mean()
    for _ in range(max_iters):
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=k)
        nonempty = counts > 0
        # empty clusters keep their previous center
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        labels = _sq_dists(x, centers).argmin(1)
        new_energy = ((x - centers[labels]) ** 2).sum(1).mean()
        done = energy - new_energy <= tol * max(energy, 1e-300)
        energy = new_energy
        if done:
            break
    return centers, labels, energy, degenerate


def fit_latent_codebooks(z, layers=DEFAULT_LAYERS, size=DEFAULT_CODEBOOK_SIZE, seed=0,
                         max_iters=50, tol=1e-6, modality="text"):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or len(z) == 0:
        raise EmptyInput("cannot fit codebooks on an empty table")
    if layers < 1 or size < 1:
        raise ValueError("layers and codebook size must be >= 1")
    residual = z.copy()
    books = np.empty((layers, size, z.shape[1]))
    for layer in range(layers):
        rng = rng_for(seed, f"codebook/{modality}/{layer}")
        centers, labels, energy, degenerate = kmeans(residual, size, rng, max_iters, tol)
        if degenerate and size > 1:
            warnings.warn(f"{modality} layer {layer}: fewer distinct residuals than {size} "
                          "codewords; remaining codewords duplicated", DegenerateLayerWarning,
                          stacklevel=2)
        books[layer] = centers
        residual = residual - centers[labels]
        log.debug("%s layer %d: residual energy %.6g", modality, layer, energy)
    return CodebookStack(modality, books, seed=seed, fitted=True)


def fit_codebooks(table, projection, L=DEFAULT_LAYERS, K=DEFAULT_CODEBOOK_SIZE, seed=0,
                  max_iters=50, tol=1e-6):
    if len(table) == 0:
        raise EmptyInput(f"{table.modality} table is empty")
    z = projection[table.modality](table.matrix)
    return fit_latent_codebooks(z, L, K, seed, max_iters, tol, modality=table.modality)


# -- quantization -------------------------------------------------------------


def _check_fitted(stack):
    if stack is None or not stack.fitted:
        raise NotFitted("codebook stack has not been fitted")


def quantize_latent(z, stack):
    _check_fitted(stack)
    r = np.asarray(z, dtype=np.float64)
    if r.shape != (stack.dim,):
        raise DimMismatch(f"latent dim {r.shape} != ({stack.dim},)")
    residuals = [r]
    indices = []
    quantized = np.zeros(stack.dim)
    for book in stack.codebooks:
        dist = ((book - r) ** 2).sum(1)
        c = int(np.argmin(dist))  # first minimum, i.e. lowest index on ties
        indices.append(c)
        quantized = quantized + book[c]
        r = r - book[c]
        residuals.append(r)
    return QuantizationResult(SemanticId(stack.modality, tuple(indices)), quantized, residuals)


def quantize(e, stack, projection):
    return quantize_latent(projection[stack.modality](e), stack)


def _nearest_exact(x, book, book_sq):
    """Index of the nearest codeword per row, identical to an exact-difference argmin.

    The expanded form screens candidates; rows whose runner-up lies within
    the rounding margin are resolved with exact differences.
    """
    x_sq = (x * x).sum(1)
    approx = x_sq[:, None] - 2.0 * x @ book.T + book_sq[None, :]
    best = approx.min(1)
    margin = 1e-9 * (x_sq + book_sq.max()) + 1e-300
    close = approx <= (best + margin)[:, None]
    out = approx.argmin(1)
    tied = np.flatnonzero(close.sum(1) > 1)
    if len(tied):
        exact = ((x[tied, None, :] - book[None, :, :]) ** 2).sum(-1)
        exact[~close[tied]] = np.inf
        out[tied] = exact.argmin(1)
    return out


def quantize_batch(z, stack, chunk=1024):
    """Vectorized residual quantization of rows of ``z``.

    Returns ``(indices (n, L), quantized (n, d), residual stack (L+1, n, d))``.
    Distances are exact differences so ties resolve like :func:`quantize_latent`.
    """
    _check_fitted(stack)
    z = np.asarray(z, dtype=np.float64)
    n = len(z)
    indices = np.zeros((n, stack.layers), dtype=np.int64)
    residuals = np.empty((stack.layers + 1, n, stack.dim))
    residuals[0] = z
    r = z.copy()
    for layer, book in enumerate(stack.codebooks):
        book_sq = (book * book).sum(1)
        for start in range(0, n, chunk):
            block = r[start:start + chunk]
            indices[start:start + chunk, layer] = _nearest_exact(block, book, book_sq)
        r = r - book[indices[:, layer]]
        residuals[layer + 1] = r
    quantized = np.zeros_like(z)
    for layer, book in enumerate(stack.codebooks):
        quantized = quantized + book[indices[:, layer]]
    return indices, quantized, residuals


def layer_energies(residuals):
    """Mean squared norm of each residual level r_1 .. r_{L+1}."""
    return np.array([(r * r).sum(-1).mean() for r in residuals])


# -- losses -------------------------------------------------------------------


def recon_loss(e, result, projection):
    z = projection[result.sid.modality](e)
    diff = z - result.quantized
    return float(diff @ diff)


def commit_loss(result, stack, beta=DEFAULT_BETA):
    """Codebook plus commitment terms; stop-gradients do not change the value."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    total = 0.0
    for layer, c in enumerate(result.sid.indices):
        diff = result.residuals[layer] - stack.codebooks[layer][c]
        total += float(diff @ diff)
    return (1.0 + beta) * total


def _normalize(x):
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.where(norms < 1e-12, 1.0, norms)
    return np.where(norms < 1e-12, 0.0, x / safe), norms


def _log_softmax_cols(logits):
    m = logits.max(axis=0, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=0, keepdims=True))


def align_loss(zt, zv, tau=DEFAULT_TAU):
    """Cross-modal InfoNCE with in-batch negatives.

    For visual anchor j the candidates are all text vectors j'; the matched
    text vector j is the positive.
    """
    loss, _, _ = align_loss_grad(zt, zv, tau)
    return loss


def align_loss_grad(zt, zv, tau=DEFAULT_TAU):
    zt = np.asarray(zt, dtype=np.float64)
    zv = np.asarray(zv, dtype=np.float64)
    if zt.shape != zv.shape:
        raise DimMismatch(f"batch shapes differ: {zt.shape} vs {zv.shape}")
    b = len(zt)
    if b < 2:
        raise BatchTooSmall(f"need at least 2 pairs, got {b}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    at, nt = _normalize(zt)
    av, nv = _normalize(zv)
    sim = at @ av.T  # sim[j', j] = cos(zt_j', zv_j)
    logp = _log_softmax_cols(sim / tau)
    loss = -np.mean(np.diag(logp))
    dsim = (np.exp(logp) - np.eye(b)) / (tau * b)
    g_at = dsim @ av
    g_av = dsim.T @ at

    def through_norm(g, a, n):
        safe = np.where(n < 1e-12, 1.0, n)
        out = (g - (g * a).sum(-1, keepdims=True) * a) / safe
        return np.where(n < 1e-12, 0.0, out)

    return float(loss), through_norm(g_at, at, nt), through_norm(g_av, av, nv)


# -- joint objective and projection training ----------------------------------


@dataclass
class MultiLossParts:
    align: float
    commit: dict
    recon: dict

    @property
    def total(self):
        return self.align + sum(self.commit.values()) + sum(self.recon.values())


def multi_loss(projection, inputs, stacks, beta=DEFAULT_BETA, tau=DEFAULT_TAU):
    """Joint loss over aligned item rows; commit/recon are per-item means.

    ``inputs`` maps modality -> (n, d_in) matrix with rows aligned on item id.
    """
    zq = {}
    commit, recon = {}, {}
    for m in sorted(inputs):
        z = projection[m](inputs[m])
        _, zq[m], res = quantize_batch(z, stacks[m])
        level = (res[1:] ** 2).sum(-1)  # (L, n) squared norms of the residual after each layer
        commit[m] = float((1.0 + beta) * level.sum(0).mean())
        recon[m] = float(level[-1].mean())
    align = align_loss(zq["text"], zq["visual"], tau) if len(inputs) == 2 else 0.0
    return MultiLossParts(align, commit, recon)


def projection_objective(projection, inputs, stacks, beta=DEFAULT_BETA, tau=DEFAULT_TAU,
                         offsets=None):
    """The part of the joint loss that the projection actually receives gradient from.

    Stop-gradient terms (``||sg[r] - v||^2``) are constant w.r.t. the
    projection and dropped.  With ``offsets`` (modality -> frozen ``zq - z``)
    the quantized vectors become ``z + offset``, which is the straight-through
    view; without it they are re-quantized and piecewise constant.
    """
    total = 0.0
    zq = {}
    for m in sorted(inputs):
        z = projection[m](inputs[m])
        _, q, res = quantize_batch(z, stacks[m])
        if offsets is not None:
            q = z + offsets[m]
        zq[m] = q
        level = (res[1:] ** 2).sum(-1)
        total += beta * level.sum(0).mean() + level[-1].mean()
    if len(inputs) == 2:
        total += align_loss(zq["text"], zq["visual"], tau)
    return float(total)


def multi_loss_grad(projection, inputs, stacks, beta=DEFAULT_BETA, tau=DEFAULT_TAU,
                    straight_through=False):
    """Value of the joint loss and its gradient w.r.t. the projection.

    Codewords are constants.  The gradient of the commitment term keeps only
    the ``beta`` branch.  When ``straight_through`` is set the alignment
    gradient on the quantized vectors is passed to the latent unchanged.

    Returns ``(MultiLossParts, ProjectionParams-shaped gradient, offsets)``.
    """
    grads = {}
    zq = {}
    offsets = {}
    commit, recon = {}, {}
    cache = {}
    for m in sorted(inputs):
        x = np.asarray(inputs[m], dtype=np.float64)
        n = len(x)
        z = projection[m](x)
        _, q, res = quantize_batch(z, stacks[m])
        zq[m] = q
        offsets[m] = q - z
        level = (res[1:] ** 2).sum(-1)
        commit[m] = float((1.0 + beta) * level.sum(0).mean())
        recon[m] = float(level[-1].mean())
        gz = (2.0 * beta * res[1:].sum(0) + 2.0 * res[-1]) / n
        cache[m] = (x, gz)
    align = 0.0
    if len(inputs) == 2:
        align, g_t, g_v = align_loss_grad(zq["text"], zq["visual"], tau)
        if straight_through:
            cache["text"] = (cache["text"][0], cache["text"][1] + g_t)
            cache["visual"] = (cache["visual"][0], cache["visual"][1] + g_v)
    for m, (x, gz) in cache.items():
        grads[m] = LinearMap(x.T @ gz, gz.sum(0))
    parts = MultiLossParts(float(align), commit, recon)
    return parts, ProjectionParams(grads), offsets


@dataclass
class ProjectionTrainResult:
    projection: ProjectionParams
    stacks: dict
    history: list  # per epoch: {"epoch", "train", "heldout"}


def train_projection(text, visual, projection=None, L=DEFAULT_LAYERS, K=DEFAULT_CODEBOOK_SIZE,
                     latent_dim=DEFAULT_LATENT_DIM, epochs=20, lr=1e-3, refit_every=5,
                     beta=DEFAULT_BETA, tau=DEFAULT_TAU, heldout_fraction=0.1,
                     straight_through=True, seed=0, max_iters=25):
    """Full-batch gradient descent on the joint loss through the projections.

    Codebooks are refitted with k-means on the training slice every
    ``refit_every`` epochs (and before the first epoch).
    """
    ids = [i for i in text.ids if i in visual]
    if len(ids) < 2:
        raise EmptyInput("need at least two items present in both modalities")
    inputs = {"text": text.take(ids), "visual": visual.take(ids)}
    n_held = int(round(len(ids) * heldout_fraction))
    if len(ids) - n_held < 2:
        n_held = 0
    train = {m: x[: len(ids) - n_held] for m, x in inputs.items()}
    held = {m: x[len(ids) - n_held:] for m, x in inputs.items()} if n_held >= 2 else None

    if projection is None:
        projection = ProjectionParams.init({"text": text.dim, "visual": visual.dim},
                                           latent_dim, seed)
    projection = projection.copy()

    def refit(proj, epoch):
        return {m: fit_latent_codebooks(proj[m](train[m]), L, K, seed=seed + epoch,
                                        max_iters=max_iters, modality=m)
                for m in train}

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateLayerWarning)
        stacks = refit(projection, 0)
    history = []
    for epoch in range(epochs + 1):
        if epoch and refit_every and epoch % refit_every == 0:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegenerateLayerWarning)
                stacks = refit(projection, epoch)
        parts, grad, _ = multi_loss_grad(projection, train, stacks, beta, tau, straight_through)
        loss = parts.total
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"joint loss became {loss} at epoch {epoch} (lr={lr})")
        heldout = multi_loss(projection, held, stacks, beta, tau).total if held else None
        history.append({"epoch": epoch, "train": loss, "heldout": heldout})
        log.info("projection epoch %d: train %.6g heldout %s", epoch, loss, heldout)
        if epoch == epochs:
            break
        projection = projection.with_flat(projection.flat() - lr * grad.flat())
    return ProjectionTrainResult(projection, stacks, history)
