"""Synthetic glyph-grid documents for the toy OCR task.

Each token id is rendered as a distinct 14x14 bitmap glyph: the low 16
bits of the id fill a 4x4 grid of 3x3-pixel ink blocks inside the cell,
so any two ids below 65536 differ in at least 9 pixels. A document is a
grid of glyph cells matching the patch grid of a single tile, which makes
the vision-to-text alignment the only thing the model has to learn.

Reserved ids: 0 starts decoding, 1.. mark instruction styles; content
tokens are drawn from [CONTENT_LO, vocab).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

BOS_ID = 0
STYLE_FULL = 1      # instruction: transcribe the whole grid
STYLE_FIRST_ROW = 2  # instruction: transcribe the first row only
CONTENT_LO = 3

CELL = 14
_BITS = 16
_BLOCK = 3
_MARGIN = 1
BG, INK = 255, 0


def glyph_bitmap(token_id, cell=CELL):
    """Deterministic (cell x cell) uint8 glyph for a token id."""
    if not 0 <= token_id < (1 << _BITS):
        raise DataError(f"token id {token_id} outside glyph range")
    img = np.full((cell, cell), BG, dtype=np.uint8)
    for bit in range(_BITS):
        if token_id >> bit & 1:
            r, c = divmod(bit, 4)
            y = _MARGIN + r * _BLOCK
            x = _MARGIN + c * _BLOCK
            img[y:y + _BLOCK, x:x + _BLOCK] = INK
    return img


@dataclass
class SynthDoc:
    image: np.ndarray       # (H, W) uint8 grayscale
    target: list            # rendered token ids, reading order
    grid: tuple             # (cell_rows, cell_cols)
    seed: int
    style: int | None = None  # instruction marker, stage-3 docs only


def synth_document(seed, num_tokens, vocab_size, grid=(4, 4), style=None) -> SynthDoc:
    """Render ``num_tokens`` seeded random content ids into a glyph grid."""
    rows, cols = grid
    if num_tokens > rows * cols:
        raise DataError(f"{num_tokens} tokens exceed {rows}x{cols} grid")
    if vocab_size <= CONTENT_LO:
        raise ConfigError(f"vocab {vocab_size} leaves no room for content ids")
    rng = np.random.default_rng(seed)
    ids = rng.integers(CONTENT_LO, vocab_size, size=num_tokens).tolist()
    image = np.full((rows * CELL, cols * CELL), BG, dtype=np.uint8)
    for i, tid in enumerate(ids):
        r, c = divmod(i, cols)
        image[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL] = glyph_bitmap(tid)
    return SynthDoc(image=image, target=ids, grid=grid, seed=int(seed), style=style)


def _doc_seed(base_seed, stream, index):
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(stream, index))
    return int(ss.generate_state(1)[0])


# corpus streams; eval is disjoint from every training stage by construction
_STREAMS = {1: 1, 2: 2, 3: 3, "eval": 9}


def make_corpus(stage, count, vocab_size, base_seed, grid=(4, 4)):
    """Seeded document list for one training stage (or the eval split).

    Stage 1 renders single-row documents, stage 2 full grids, stage 3 full
    grids wrapped with an instruction-style marker. The eval split uses
    full grids and a seed stream disjoint from all training stages.
    """
    if stage not in _STREAMS:
        raise ConfigError(f"unknown corpus stage {stage!r}")
    stream = _STREAMS[stage]
    rows, cols = grid
    docs = []
    for i in range(count):
        seed = _doc_seed(base_seed, stream, i)
        if stage == 1:
            docs.append(synth_document(seed, cols, vocab_size, grid))
        elif stage in (2, "eval"):
            docs.append(synth_document(seed, rows * cols, vocab_size, grid))
        else:
            style = STYLE_FULL if i % 2 == 0 else STYLE_FIRST_ROW
            docs.append(synth_document(seed, rows * cols, vocab_size, grid,
                                       style=style))
    return docs


def doc_text_tokens(doc: SynthDoc):
    """The text-side token sequence a document trains on.

    Returns (prompt, content): the prompt is what precedes generation
    (start marker plus any style marker), content is what the model must
    produce. Style2 documents ask for the first row only.
    """
    if doc.style is None:
        return [BOS_ID], list(doc.target)
    if doc.style == STYLE_FIRST_ROW:
        return [BOS_ID, doc.style], list(doc.target[:doc.grid[1]])
    return [BOS_ID, doc.style], list(doc.target)
