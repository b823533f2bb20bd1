"""End-to-end toy vision-language model.

Patch encoder -> connector -> tiny causal decoder (2 pre-norm blocks,
single head, feed-forward 4x width) with the output head tied to the text
embedding table. Vision tokens come first in the input sequence, text
embeddings after; the next-token loss covers text positions only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import connectors as cn
from . import vision
from .autodiff import Tensor
from .errors import ConfigError, DataError, NumericError
from .glyphs import doc_text_tokens


@dataclass
class ModelConfig:
    vocab: int = 256
    dim: int = 32          # embedding / decoder width
    feat: int = 64         # encoder output width
    hidden: int = 64       # encoder hidden width
    codes: int = 128       # vet codebook size
    latents: int = 16      # perceiver query count
    blocks: int = 2
    max_len: int = 96
    embed_std: float = 0.02
    embed_offset: float = 0.15
    activation: str = "relu"
    tiling: vision.TilingConfig = field(default_factory=vision.TilingConfig)

    def __post_init__(self):
        if self.dim < 2 or self.feat < 2 or self.vocab < 4:
            raise ConfigError(f"degenerate model dims {self}")


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    q: Tensor
    k: Tensor
    v: Tensor
    attn_out: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ff_in: Tensor
    ff_out: Tensor

    def named(self, prefix):
        return {f"{prefix}.{name}": getattr(self, name)
                for name in ("ln1_g", "ln1_b", "q", "k", "v", "attn_out",
                             "ln2_g", "ln2_b", "ff_in", "ff_out")}


@dataclass
class DecoderParams:
    positions: Tensor
    blocks: list
    ln_f_g: Tensor
    ln_f_b: Tensor

    def named(self, prefix="decoder"):
        out = {f"{prefix}.positions": self.positions,
               f"{prefix}.ln_f_g": self.ln_f_g,
               f"{prefix}.ln_f_b": self.ln_f_b}
        for i, b in enumerate(self.blocks):
            out.update(b.named(f"{prefix}.block{i}"))
        return out

    def tensors(self):
        return list(self.named().values())


def init_decoder(cfg: ModelConfig, rng, dtype=np.float32) -> DecoderParams:
    dim = cfg.dim

    def mat(rows, cols, s):
        return Tensor((rng.normal(size=(rows, cols)) * s).astype(dtype),
                      requires_grad=True)

    def vec(n, value):
        return Tensor(np.full(n, value, dtype=dtype), requires_grad=True)

    blocks = []
    for _ in range(cfg.blocks):
        blocks.append(BlockParams(
            ln1_g=vec(dim, 1.0), ln1_b=vec(dim, 0.0),
            q=mat(dim, dim, dim ** -0.5), k=mat(dim, dim, dim ** -0.5),
            v=mat(dim, dim, dim ** -0.5),
            attn_out=mat(dim, dim, 0.5 * dim ** -0.5),
            ln2_g=vec(dim, 1.0), ln2_b=vec(dim, 0.0),
            ff_in=mat(dim, 4 * dim, dim ** -0.5),
            ff_out=mat(4 * dim, dim, 0.5 * (4 * dim) ** -0.5)))
    return DecoderParams(
        positions=mat(cfg.max_len, dim, 0.02),
        blocks=blocks, ln_f_g=vec(dim, 1.0), ln_f_b=vec(dim, 0.0))


def embed_tokens(ids, table: cn.EmbeddingTable) -> Tensor:
    """Look up embedding rows for a token sequence."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab_size):
        raise DataError(f"token id outside vocabulary [0, {table.vocab_size})")
    return ad.take_rows(table.vectors, ids)


def build_input(vis_tokens: Tensor, text_emb: Tensor) -> Tensor:
    """Concatenate vision rows before text rows."""
    if vis_tokens.data.shape[0] == 0:
        return text_emb
    if text_emb.data.shape[0] == 0:
        return vis_tokens
    return ad.concat_rows([vis_tokens, text_emb])


_MASK_CACHE = {}


def causal_mask(n, dtype):
    key = (n, np.dtype(dtype).name)
    if key not in _MASK_CACHE:
        m = np.triu(np.full((n, n), -1e9, dtype=dtype), k=1)
        _MASK_CACHE[key] = Tensor(m)
    return _MASK_CACHE[key]


def decoder_hidden(h_input: Tensor, params: DecoderParams, eps=1e-5) -> Tensor:
    """Run the causal blocks over an (S x D) input; returns final hidden rows."""
    s, dim = h_input.data.shape
    if s > params.positions.data.shape[0]:
        raise ConfigError(f"sequence length {s} exceeds position table "
                          f"{params.positions.data.shape[0]}")
    x = ad.add(h_input, ad.take_rows(params.positions, np.arange(s)))
    mask = causal_mask(s, x.data.dtype)
    for b in params.blocks:
        a = ad.layernorm_rows(x, b.ln1_g, b.ln1_b, eps)
        q = ad.matmul(a, b.q)
        k = ad.matmul(a, b.k)
        v = ad.matmul(a, b.v)
        scores = ad.add(ad.scale(ad.matmul(q, ad.transpose(k)), dim ** -0.5), mask)
        attn = ad.softmax_rows(scores)
        x = ad.add(x, ad.matmul(ad.matmul(attn, v), b.attn_out))
        f = ad.layernorm_rows(x, b.ln2_g, b.ln2_b, eps)
        x = ad.add(x, ad.matmul(ad.gelu(ad.matmul(f, b.ff_in)), b.ff_out))
    return ad.layernorm_rows(x, params.ln_f_g, params.ln_f_b, eps)


class ToyModel:
    """Encoder + connector + decoder bundle with named parameter groups."""

    def __init__(self, cfg: ModelConfig, encoder, connector, table, decoder):
        self.cfg = cfg
        self.encoder = encoder
        self.connector = connector
        self.table = table
        self.decoder = decoder

    @classmethod
    def build(cls, connector_name, cfg: ModelConfig, seed, dtype=np.float32):
        streams = np.random.SeedSequence(seed).spawn(4)
        r_table, r_enc, r_conn, r_dec = (np.random.default_rng(s) for s in streams)
        table = cn.init_embedding_table(cfg.vocab, cfg.dim, r_table,
                                        std=cfg.embed_std,
                                        common_offset=cfg.embed_offset,
                                        dtype=dtype)
        patch_len = cfg.tiling.patch_side ** 2
        encoder = vision.init_toy_encoder(patch_len, cfg.hidden, cfg.feat,
                                          cfg.tiling.patches_per_tile,
                                          r_enc, dtype=dtype)
        connector = cn.make_connector(connector_name, cfg.feat, cfg.dim, r_conn,
                                      table=table, codes=cfg.codes,
                                      latents=cfg.latents,
                                      activation=cfg.activation,
                                      row_width=cfg.tiling.patches_per_side,
                                      dtype=dtype)
        decoder = init_decoder(cfg, r_dec, dtype=dtype)
        return cls(cfg, encoder, connector, table, decoder)

    # -- parameters ---------------------------------------------------------

    def groups(self):
        return {"encoder": self.encoder.tensors(),
                "connector": self.connector.tensors(),
                "decoder": [self.table.vectors] + self.decoder.tensors()}

    def named_tensors(self):
        out = {"table.vectors": self.table.vectors}
        out.update(self.encoder.named("encoder"))
        out.update(self.connector.named())
        out.update(self.decoder.named("decoder"))
        return out

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_tensors().items()}

    def load_state_dict(self, state):
        named = self.named_tensors()
        missing = set(named) ^ set(state)
        if missing:
            raise DataError(f"checkpoint key mismatch: {sorted(missing)}")
        for k, t in named.items():
            if t.data.shape != state[k].shape:
                raise DataError(f"checkpoint shape mismatch for {k}")
            t.data = state[k].astype(t.data.dtype, copy=True)

    def set_trainable(self, encoder=True, connector=True, decoder=True):
        for flag, tensors in zip((encoder, connector, decoder),
                                 self.groups().values()):
            for t in tensors:
                t.requires_grad = flag

    # -- forward ------------------------------------------------------------

    def patch_features(self, image):
        feats, _ = vision.image_to_features(image, self.cfg.tiling, self.encoder)
        return feats

    def vis_tokens(self, image=None, feats=None) -> Tensor:
        if feats is None:
            feats = self.patch_features(image)
        return self.connector.forward(feats.features)

    def sequence_logits(self, vis: Tensor, text_ids, logit_rows=None) -> Tensor:
        """Hidden states -> vocabulary logits for selected rows (all text
        rows by default)."""
        text_emb = embed_tokens(text_ids, self.table)
        h = build_input(vis, text_emb)
        hid = decoder_hidden(h, self.decoder)
        n_vis = vis.data.shape[0]
        if logit_rows is None:
            logit_rows = np.arange(n_vis, n_vis + len(text_ids))
        picked = ad.take_rows(hid, logit_rows)
        return ad.matmul(picked, ad.transpose(self.table.vectors))

    def doc_loss(self, doc, vis=None) -> Tensor:
        """Teacher-forced mean cross-entropy over a document's content tokens."""
        prompt, content = doc_text_tokens(doc)
        if not content:
            raise DataError("document has no text tokens to score")
        if vis is None:
            vis = self.vis_tokens(doc.image)
        text_in = prompt + content[:-1]
        n_vis = vis.data.shape[0]
        first = n_vis + len(prompt) - 1
        rows = np.arange(first, first + len(content))
        logits = self.sequence_logits(vis, text_in, logit_rows=rows)
        loss = ad.cross_entropy_rows(logits, content)
        if not np.isfinite(loss.data):
            raise NumericError("non-finite loss")
        return loss

    def greedy_decode(self, doc):
        """Autoregressive argmax decode of a document's content tokens."""
        prompt, content = doc_text_tokens(doc)
        vis = self.vis_tokens(doc.image)
        n_vis = vis.data.shape[0]
        out = []
        text = list(prompt)
        for _ in range(len(content)):
            last = np.array([n_vis + len(text) - 1])
            logits = self.sequence_logits(vis, text, logit_rows=last)
            nxt = int(np.argmax(logits.data[0]))
            out.append(nxt)
            text.append(nxt)
        return out


def forward_loss(docs, model: ToyModel):
    """Mean teacher-forced loss over a batch of documents (plain float)."""
    if not docs:
        raise DataError("empty batch")
    return float(np.mean([model.doc_loss(d).data for d in docs]))


def evaluate(model: ToyModel, split):
    """Greedy-decode token accuracy and mean teacher-forced loss."""
    if not split:
        raise DataError("empty evaluation split")
    hits = total = 0
    losses = []
    for doc in split:
        _, content = doc_text_tokens(doc)
        decoded = model.greedy_decode(doc)
        hits += sum(int(a == b) for a, b in zip(decoded, content))
        total += len(content)
        losses.append(float(model.doc_loss(doc).data))
    return {"token_accuracy": hits / total, "mean_loss": float(np.mean(losses))}
