"""Connectors that map patch features into the text embedding space.

Five designs, all pure functions of (params, features):

* ``align``     -- project each feature to a probability distribution over
                   the text vocabulary (two projections with layernorms,
                   then a row softmax) and output the probability-weighted
                   sum of text embeddings. Every output row is a convex
                   combination of embedding rows, so it stays inside the
                   per-dimension bounds of the table.
* ``mlp``       -- affine projection plus pointwise activation.
* ``vet``       -- softmax over K learned codes, weighted sum of a separate
                   learned codebook.
* ``perceiver`` -- L latent queries cross-attend to the patch features;
                   output length is always L.
* ``hreducer``  -- concatenate each horizontal run of 4 neighboring patch
                   features and project, reducing token count 4x.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


class EmbeddingTable:
    """Text-token embedding matrix (V x D) with per-dimension bound checks."""

    def __init__(self, vectors: Tensor):
        if vectors.data.ndim != 2 or vectors.data.shape[0] < 2:
            raise ConfigError(f"embedding table needs >= 2 rows, got {vectors.data.shape}")
        if not np.all(np.isfinite(vectors.data)):
            raise ConfigError("non-finite embedding table")
        self.vectors = vectors

    @property
    def vocab_size(self):
        return self.vectors.data.shape[0]

    @property
    def dim(self):
        return self.vectors.data.shape[1]

    def bounds(self):
        """Current per-dimension (min, max) over rows."""
        return self.vectors.data.min(axis=0), self.vectors.data.max(axis=0)

    def hull_excess(self, rows):
        """Largest per-coordinate overshoot of the table's bounding box.

        <= 0 means every coordinate lies inside the per-dimension bounds
        (a necessary condition for convex-hull membership).
        """
        lo, hi = self.bounds()
        over = np.maximum(rows - hi, 0.0).max() if rows.size else 0.0
        under = np.maximum(lo - rows, 0.0).max() if rows.size else 0.0
        return float(max(over, under))


def init_embedding_table(vocab, dim, rng, std=0.02, common_offset=0.15,
                         dtype=np.float32) -> EmbeddingTable:
    """Seeded embedding init: gaussian rows around a shared offset direction.

    The offset mimics the anisotropy of trained language-model embeddings
    (a large common component shared by all tokens); per-token structure
    lives in the gaussian part.
    """
    rows = rng.normal(size=(vocab, dim)) * std + common_offset
    return EmbeddingTable(Tensor(rows.astype(dtype), requires_grad=True))


# ---------------------------------------------------------------------------
# vocabulary-alignment connector

@dataclass
class AlignParams:
    feat_proj: Tensor   # (d, D) right-multiply form of the D x d projection
    ln_feat_g: Tensor   # (D,)
    ln_feat_b: Tensor   # (D,)
    vocab_proj: Tensor  # (D, V) right-multiply form of the V x D head
    ln_vocab_g: Tensor  # (V,)
    ln_vocab_b: Tensor  # (V,)

    def named(self, prefix="connector"):
        return {f"{prefix}.feat_proj": self.feat_proj,
                f"{prefix}.ln_feat_g": self.ln_feat_g,
                f"{prefix}.ln_feat_b": self.ln_feat_b,
                f"{prefix}.vocab_proj": self.vocab_proj,
                f"{prefix}.ln_vocab_g": self.ln_vocab_g,
                f"{prefix}.ln_vocab_b": self.ln_vocab_b}

    def tensors(self):
        return list(self.named().values())


def init_align_from_head(head, d, rng, dtype=np.float32) -> AlignParams:
    """Build alignment params with the vocab projection copied from the
    language-model head (V x D); the feature projection is a fresh
    std-0.02 normal and both layernorms start as identity."""
    head = np.asarray(head.data if isinstance(head, Tensor) else head)
    if head.ndim != 2:
        raise ConfigError(f"head must be a V x D matrix, got {head.shape}")
    vocab, dim = head.shape

    def t(a, grad=True):
        return Tensor(np.ascontiguousarray(a, dtype=dtype), requires_grad=grad)

    return AlignParams(
        feat_proj=t(rng.normal(size=(d, dim)) * 0.02),
        ln_feat_g=t(np.ones(dim)), ln_feat_b=t(np.zeros(dim)),
        vocab_proj=t(head.T.copy()),
        ln_vocab_g=t(np.ones(vocab)), ln_vocab_b=t(np.zeros(vocab)))


def align_forward(feats: Tensor, params: AlignParams, table: EmbeddingTable,
                  eps=1e-5):
    """Vocabulary-distribution connector.

    Returns (probs, blended): probs is (num_patches x V) with each row on
    the probability simplex; blended is probs @ E, one embedding-space
    vector per patch.
    """
    if params.vocab_proj.data.shape[1] != table.vocab_size:
        raise ConfigError(
            f"vocab projection width {params.vocab_proj.data.shape[1]} != "
            f"embedding table rows {table.vocab_size}")
    h = ad.matmul(feats, params.feat_proj)
    h = ad.layernorm_rows(h, params.ln_feat_g, params.ln_feat_b, eps)
    logits = ad.matmul(h, params.vocab_proj)
    logits = ad.layernorm_rows(logits, params.ln_vocab_g, params.ln_vocab_b, eps)
    probs = ad.softmax_rows(logits)
    return probs, weighted_embedding_sum(probs, table)


def weighted_embedding_sum(probs: Tensor, table: EmbeddingTable) -> Tensor:
    """Blend embedding rows by per-patch weights: probs @ E."""
    return ad.matmul(probs, table.vectors)


# ---------------------------------------------------------------------------
# baselines

@dataclass
class MlpParams:
    weight: Tensor  # (d, D)
    bias: Tensor    # (D,)
    activation: str = "relu"

    def named(self, prefix="connector"):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

    def tensors(self):
        return [self.weight, self.bias]


def init_mlp(d, dim, rng, activation="relu", dtype=np.float32) -> MlpParams:
    w = Tensor((rng.normal(size=(d, dim)) / np.sqrt(d)).astype(dtype),
               requires_grad=True)
    b = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
    return MlpParams(weight=w, bias=b, activation=activation)


_ACTIVATIONS = {"relu": ad.relu, "gelu": ad.gelu}


def mlp_forward(feats: Tensor, params: MlpParams) -> Tensor:
    try:
        act = _ACTIVATIONS[params.activation]
    except KeyError:
        raise ConfigError(f"unknown activation {params.activation!r}") from None
    return act(ad.add_row(ad.matmul(feats, params.weight), params.bias))


@dataclass
class VetParams:
    logit_proj: Tensor  # (d, K)
    codebook: Tensor    # (K, D)

    def named(self, prefix="connector"):
        return {f"{prefix}.logit_proj": self.logit_proj,
                f"{prefix}.codebook": self.codebook}

    def tensors(self):
        return [self.logit_proj, self.codebook]


def init_vet(d, dim, codes, rng, dtype=np.float32) -> VetParams:
    if codes < 2:
        raise ConfigError(f"need >= 2 visual codes, got {codes}")
    w = Tensor((rng.normal(size=(d, codes)) / np.sqrt(d)).astype(dtype),
               requires_grad=True)
    e = Tensor((rng.normal(size=(codes, dim)) * 0.02).astype(dtype),
               requires_grad=True)
    return VetParams(logit_proj=w, codebook=e)


def vet_forward(feats: Tensor, params: VetParams) -> Tensor:
    """Soft codebook lookup: softmax over K codes, blend codebook rows."""
    if params.logit_proj.data.shape[1] != params.codebook.data.shape[0]:
        raise ConfigError(
            f"code count mismatch: {params.logit_proj.data.shape[1]} logits "
            f"vs {params.codebook.data.shape[0]} codebook rows")
    weights = ad.softmax_rows(ad.matmul(feats, params.logit_proj))
    return ad.matmul(weights, params.codebook)


@dataclass
class PerceiverParams:
    latents: Tensor     # (L, D)
    key_proj: Tensor    # (d, D)
    value_proj: Tensor  # (d, D)
    out_proj: Tensor    # (D, D)

    def named(self, prefix="connector"):
        return {f"{prefix}.latents": self.latents,
                f"{prefix}.key_proj": self.key_proj,
                f"{prefix}.value_proj": self.value_proj,
                f"{prefix}.out_proj": self.out_proj}

    def tensors(self):
        return [self.latents, self.key_proj, self.value_proj, self.out_proj]


def init_perceiver(d, dim, latents, rng, dtype=np.float32) -> PerceiverParams:
    if latents < 1:
        raise ConfigError("need at least one latent query")

    def mat(rows, cols, s):
        return Tensor((rng.normal(size=(rows, cols)) * s).astype(dtype),
                      requires_grad=True)

    return PerceiverParams(latents=mat(latents, dim, 1.0),
                           key_proj=mat(d, dim, 1.0 / np.sqrt(d)),
                           value_proj=mat(d, dim, 1.0 / np.sqrt(d)),
                           out_proj=mat(dim, dim, 1.0 / np.sqrt(dim)))


def perceiver_forward(feats: Tensor, params: PerceiverParams) -> Tensor:
    """Single-head cross-attention from L latent queries to the patches.

    Output is (L x D) regardless of how many patches come in.
    """
    dim = params.latents.data.shape[1]
    keys = ad.matmul(feats, params.key_proj)
    values = ad.matmul(feats, params.value_proj)
    scores = ad.scale(ad.matmul(params.latents, ad.transpose(keys)),
                      1.0 / np.sqrt(dim))
    attn = ad.softmax_rows(scores)
    return ad.matmul(ad.matmul(attn, values), params.out_proj)


@dataclass
class HReducerParams:
    merge: Tensor  # (group * d, D)
    group: int = 4

    def named(self, prefix="connector"):
        return {f"{prefix}.merge": self.merge}

    def tensors(self):
        return [self.merge]


def init_hreducer(d, dim, rng, group=4, dtype=np.float32) -> HReducerParams:
    m = Tensor((rng.normal(size=(group * d, dim)) / np.sqrt(group * d)).astype(dtype),
               requires_grad=True)
    return HReducerParams(merge=m, group=group)


def hreducer_forward(feats: Tensor, row_width: int, params: HReducerParams) -> Tensor:
    """Merge each horizontal run of ``group`` neighboring patch features.

    ``row_width`` is the per-tile patch row length; with row-major patch
    order, runs of ``group`` consecutive rows are horizontal neighbors
    exactly when row_width divides by the group size.
    """
    g = params.group
    n, d = feats.data.shape
    if row_width % g != 0 or n % g != 0:
        raise ConfigError(f"patch row width {row_width} (n={n}) not divisible "
                          f"by merge group {g}")
    grouped = ad.reshape(feats, (n // g, g * d))
    return ad.matmul(grouped, params.merge)


# ---------------------------------------------------------------------------
# uniform wrapper

CONNECTOR_NAMES = ("align", "mlp", "vet", "perceiver", "hreducer")


class Connector:
    """Uniform facade: name, parameter set, forward(features) -> tokens."""

    def __init__(self, name, params, table=None, row_width=4):
        if name not in CONNECTOR_NAMES:
            raise ConfigError(f"unknown connector {name!r}")
        self.name = name
        self.params = params
        self.table = table
        self.row_width = row_width

    def forward(self, feats: Tensor) -> Tensor:
        if self.name == "align":
            _, blended = align_forward(feats, self.params, self.table)
            return blended
        if self.name == "mlp":
            return mlp_forward(feats, self.params)
        if self.name == "vet":
            return vet_forward(feats, self.params)
        if self.name == "perceiver":
            return perceiver_forward(feats, self.params)
        return hreducer_forward(feats, self.row_width, self.params)

    def vocab_distribution(self, feats: Tensor) -> Tensor:
        if self.name != "align":
            raise ConfigError(f"{self.name} connector has no vocabulary distribution")
        probs, _ = align_forward(feats, self.params, self.table)
        return probs

    def out_tokens(self, num_patches):
        """How many embedding-space tokens this connector emits."""
        if self.name == "perceiver":
            return self.params.latents.data.shape[0]
        if self.name == "hreducer":
            return num_patches // self.params.group
        return num_patches

    def named(self):
        return self.params.named()

    def tensors(self):
        return self.params.tensors()


def make_connector(name, d, dim, rng, table=None, codes=128, latents=16,
                   activation="relu", row_width=4, dtype=np.float32) -> Connector:
    """Build a connector by registry name at the given dimensions."""
    if name == "align":
        if table is None:
            raise ConfigError("alignment connector needs an embedding table")
        params = init_align_from_head(table.vectors, d, rng, dtype=dtype)
    elif name == "mlp":
        params = init_mlp(d, dim, rng, activation=activation, dtype=dtype)
    elif name == "vet":
        params = init_vet(d, dim, codes, rng, dtype=dtype)
    elif name == "perceiver":
        params = init_perceiver(d, dim, latents, rng, dtype=dtype)
    elif name == "hreducer":
        params = init_hreducer(d, dim, rng, dtype=dtype)
    else:
        raise ConfigError(f"unknown connector {name!r}")
    return Connector(name, params, table=table, row_width=row_width)
