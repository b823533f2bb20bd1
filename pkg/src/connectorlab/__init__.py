"""connectorlab: a desk-scale workbench for vision-to-text connectors.

Implements a vocabulary-simplex connector that maps patch features to
probability distributions over a text vocabulary and blends the matching
embeddings, alongside the usual baselines (MLP projection, visual
embedding table, latent cross-attention resampler, horizontal 1x4
reducer), a toy glyph-OCR training harness, and an analysis suite for
hull containment, embedding pruning, noise robustness, and runtime.
"""

__version__ = "0.1.0"
