"""Mechanism-level analyses of the connectors.

Covers the vocabulary-distribution density study, embedding pruning,
2-D principal-component projection of the table, paired noise-robustness
runs, and a wall-clock forward benchmark. Every report carries plain
python/numpy values and serializes to CSV via the reports module.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import connectors as cn
from .errors import ConfigError, DataError
from .model import ToyModel, evaluate

# ---------------------------------------------------------------------------
# vocabulary distribution density


@dataclass
class MeanVocabDistribution:
    mean_probs: np.ndarray
    probe_count: int
    patch_count: int

    @property
    def max_prob(self):
        return float(self.mean_probs.max())

    @property
    def entropy(self):
        p = self.mean_probs[self.mean_probs > 0]
        return float(-(p * np.log(p)).sum())


def aggregate_distribution(model: ToyModel, probes) -> MeanVocabDistribution:
    """Mean vocabulary distribution over all patches of all probe images."""
    if model.connector.name != "align":
        raise ConfigError("distribution analysis needs the align connector")
    if len(probes) == 0:
        raise DataError("empty probe set")
    total = np.zeros(model.table.vocab_size, dtype=np.float64)
    patches = 0
    for image in probes:
        feats = model.patch_features(image)
        probs = model.connector.vocab_distribution(feats.features)
        total += probs.data.sum(axis=0, dtype=np.float64)
        patches += probs.data.shape[0]
    return MeanVocabDistribution(mean_probs=total / patches,
                                 probe_count=len(probes), patch_count=patches)


def prune_embeddings(dist: MeanVocabDistribution, mass) -> np.ndarray:
    """Token ids (descending mean probability) forming the smallest prefix
    whose cumulative mass reaches ``mass``."""
    if not 0 < mass <= 1:
        raise ConfigError(f"mass {mass} outside (0, 1]")
    order = np.lexsort((np.arange(len(dist.mean_probs)), -dist.mean_probs))
    csum = np.cumsum(dist.mean_probs[order])
    total = csum[-1]
    if mass >= 1.0:
        keep = int((dist.mean_probs[order] > 0).sum())
    else:
        keep = int(np.searchsorted(csum, mass * total - 1e-12) + 1)
    return order[:max(keep, 1)]


@dataclass
class PruneReport:
    kept: np.ndarray
    mass_captured: float
    full_metrics: dict
    pruned_metrics: dict

    @property
    def accuracy_delta(self):
        return self.pruned_metrics["token_accuracy"] - self.full_metrics["token_accuracy"]

    @property
    def loss_delta(self):
        return self.pruned_metrics["mean_loss"] - self.full_metrics["mean_loss"]


class _PrunedConnector:
    """Align connector view that restricts the weighted sum to kept tokens.

    With renormalization the surviving probabilities are rescaled to sum
    to 1 (keeping the simplex invariant); without, rows go sub-stochastic.
    """

    def __init__(self, inner: cn.Connector, kept, renormalize=True):
        self.inner = inner
        self.name = inner.name
        kept = np.asarray(kept, dtype=np.int64)
        if kept.size == 0:
            raise DataError("empty kept-token set")
        mask = np.zeros(inner.table.vocab_size)
        mask[kept] = 1.0
        self._mask = mask
        self.renormalize = renormalize

    def forward(self, feats):
        probs = self.inner.vocab_distribution(feats)
        mask = ad.Tensor(self._mask.astype(probs.data.dtype))
        masked = ad.mul_row(probs, mask)
        if self.renormalize:
            masked = ad.renorm_rows(masked)
        return cn.weighted_embedding_sum(masked, self.inner.table)

    def out_tokens(self, num_patches):
        return self.inner.out_tokens(num_patches)


def eval_pruned(model: ToyModel, kept, split, dist=None, renormalize=True) -> PruneReport:
    """Evaluate the model with the embedding blend restricted to ``kept``."""
    full = evaluate(model, split)
    original = model.connector
    model.connector = _PrunedConnector(original, kept, renormalize=renormalize)
    try:
        pruned = evaluate(model, split)
    finally:
        model.connector = original
    mass = float(dist.mean_probs[np.asarray(kept)].sum() / dist.mean_probs.sum()) \
        if dist is not None else float("nan")
    return PruneReport(kept=np.asarray(kept), mass_captured=mass,
                       full_metrics=full, pruned_metrics=pruned)


# ---------------------------------------------------------------------------
# principal components of the table


def _power_iteration(mat, rng, tol=1e-9, max_iter=10000):
    v = rng.normal(size=mat.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = mat @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0, v
        v_new = w / norm
        lam = float(v_new @ mat @ v_new)
        if np.linalg.norm(mat @ v_new - lam * v_new) <= tol * max(abs(lam), 1e-30):
            return lam, v_new
        v = v_new
    return lam, v


def pca_2d(table, highlight=(), seed=0):
    """Project embedding rows onto their top-2 principal directions.

    Power iteration with deflation on the column-centered covariance.
    Returns (coords (V x 2), components (2 x D), explained variance ratio).
    """
    rows = np.asarray(table.vectors.data if isinstance(table, cn.EmbeddingTable)
                      else table, dtype=np.float64)
    v, d = rows.shape
    if v < 3:
        raise DataError("need at least 3 rows for a 2-D projection")
    centered = rows - rows.mean(axis=0)
    cov = centered.T @ centered / v
    total_var = float(np.trace(cov))
    rng = np.random.default_rng(seed)
    lam1, c1 = _power_iteration(cov, rng)
    deflated = cov - lam1 * np.outer(c1, c1)
    lam2, c2 = _power_iteration(deflated, rng)
    c2 = c2 - (c2 @ c1) * c1
    n2 = np.linalg.norm(c2)
    if lam2 <= 1e-12 * max(lam1, 1e-30) or n2 < 1e-12:
        raise DataError("covariance rank below 2; degenerate table")
    c2 /= n2
    comps = np.stack([c1, c2])
    coords = centered @ comps.T
    ratio = np.array([lam1, lam2]) / total_var
    flags = np.zeros(v, dtype=bool)
    flags[np.asarray(sorted(highlight), dtype=np.int64)] = True if len(highlight) else False
    return coords, comps, ratio, flags


# ---------------------------------------------------------------------------
# noise robustness


def cosine_distance_rows(a, b):
    """Mean (1 - cosine similarity) over matching rows."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    sims = np.where(denom > 1e-30, (a * b).sum(axis=1) / np.where(denom == 0, 1, denom),
                    np.where((na < 1e-30) & (nb < 1e-30), 1.0, 0.0))
    return float(np.mean(1.0 - sims))


@dataclass
class NoiseReport:
    sigma: float
    seed: int
    rows: list = field(default_factory=list)  # per-connector dicts
    noise_checksum: str = ""


def noise_test(models, sigma, probes, split, seed=0) -> NoiseReport:
    """Paired noise run: one shared gaussian perturbation of the patch
    features per probe/sample, applied identically under every connector.

    Models must share encoder weights so the clean features agree.
    """
    if sigma < 0:
        raise DataError(f"negative noise level {sigma}")
    if not models:
        raise DataError("no models to compare")
    base = models[0]
    for other in models[1:]:
        for (ka, va), (kb, vb) in zip(sorted(base.encoder.named().items()),
                                      sorted(other.encoder.named().items())):
            if not np.array_equal(va.data, vb.data):
                raise ConfigError(f"encoder weights differ ({ka} vs {kb}); "
                                  "noise comparison must share the encoder")

    rng = np.random.default_rng(seed)
    checksum = hashlib.sha256()

    # cosine distances on probe images, shared noise across connectors
    dists = {m.connector.name: [] for m in models}
    for image in probes:
        feats = base.patch_features(image)
        clean = feats.features.data
        noise = rng.normal(0.0, sigma, size=clean.shape).astype(clean.dtype) \
            if sigma > 0 else np.zeros_like(clean)
        checksum.update(noise.tobytes())
        noisy = ad.Tensor(clean + noise)
        for m in models:
            out_c = m.connector.forward(ad.Tensor(clean)).data
            out_n = m.connector.forward(noisy).data
            dists[m.connector.name].append(cosine_distance_rows(out_c, out_n))

    # accuracy drop on the eval split, fresh shared noise per sample
    noises = {}
    for i, doc in enumerate(split):
        feats = base.patch_features(doc.image)
        shape = feats.features.data.shape
        n = rng.normal(0.0, sigma, size=shape).astype(feats.features.data.dtype) \
            if sigma > 0 else np.zeros(shape, dtype=feats.features.data.dtype)
        noises[i] = n
        checksum.update(n.tobytes())

    report = NoiseReport(sigma=float(sigma), seed=seed,
                         noise_checksum=checksum.hexdigest())
    for m in models:
        clean_metrics = evaluate(m, split)
        noisy_metrics = _evaluate_with_noise(m, split, noises)
        report.rows.append({
            "connector": m.connector.name,
            "cosine_distance": float(np.mean(dists[m.connector.name])),
            "clean_accuracy": clean_metrics["token_accuracy"],
            "noisy_accuracy": noisy_metrics["token_accuracy"],
            "accuracy_drop": clean_metrics["token_accuracy"]
                             - noisy_metrics["token_accuracy"],
        })
    return report


def _evaluate_with_noise(model, split, noises):
    hits = total = 0
    for i, doc in enumerate(split):
        feats = model.patch_features(doc.image)
        perturbed = ad.Tensor(feats.features.data + noises[i])
        from .glyphs import doc_text_tokens
        prompt, content = doc_text_tokens(doc)
        vis = model.connector.forward(perturbed)
        n_vis = vis.data.shape[0]
        text = list(prompt)
        for _ in range(len(content)):
            last = np.array([n_vis + len(text) - 1])
            logits = model.sequence_logits(vis, text, logit_rows=last)
            text.append(int(np.argmax(logits.data[0])))
        decoded = text[len(prompt):]
        hits += sum(int(a == b) for a, b in zip(decoded, content))
        total += len(content)
    return {"token_accuracy": hits / total}


# ---------------------------------------------------------------------------
# runtime benchmark


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    num_patches: int = 0
    text_len: int = 0


def _graph_bytes(t: ad.Tensor):
    seen, stack, total = set(), [t], 0
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        total += node.data.nbytes
        stack.extend(node._parents)
    return total


def bench_connectors(models, image, text_ids, warmup=5, iters=30) -> BenchReport:
    """Wall-clock full forward latency (encode -> connector -> decoder
    logits) per connector variant, plus an analytic memory estimate
    (parameter bytes + live graph activation bytes)."""
    if warmup < 5 or iters < 30:
        raise ConfigError(f"need warmup >= 5 and iters >= 30, got {warmup}/{iters}")
    report = BenchReport(text_len=len(text_ids))
    for m in models:
        feats = m.patch_features(image)
        report.num_patches = feats.num_patches

        def run():
            f = m.patch_features(image)
            vis = m.connector.forward(f.features)
            return m.sequence_logits(vis, list(text_ids))

        for _ in range(warmup):
            out = run()
        times = []
        for _ in range(iters):
            t0 = time.perf_counter()
            out = run()
            times.append(time.perf_counter() - t0)
        mean_t = float(np.mean(times))
        if mean_t < 50e-6:
            raise ConfigError("latency below timer comfort zone; "
                              "increase the batch or input size and retry")
        out_tokens = m.connector.out_tokens(report.num_patches)
        params_bytes = sum(t.data.nbytes for t in m.named_tensors().values())
        report.rows.append({
            "connector": m.connector.name,
            "samples": iters,
            "mean_latency_s": mean_t,
            "tokens_per_s": out_tokens / mean_t,
            "memory_bytes": params_bytes + _graph_bytes(out),
        })
    return report
