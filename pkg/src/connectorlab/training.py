"""Staged training loop for the toy model.

Three stages mirror the usual pretrain -> document tuning -> instruction
tuning schedule at desk scale: stages 1-2 train the full model on
single-row then full-grid documents, stage 3 freezes the patch encoder
and trains connector + decoder on instruction-style documents. Updates
are Adam on whichever parameter groups a stage flags trainable; all
randomness flows from explicit seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .errors import ConfigError, NumericError

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 50


class Adam(object):
    """Adam with bias correction; one moment pair per named tensor."""

    def __init__(self, named, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named = dict(named)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in self.named.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.named.items()}

    def zero_grads(self):
        for t in self.named.values():
            t.grad = None

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, t in self.named.items():
            if t.grad is None or not t.requires_grad:
                continue
            g = t.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            t.data = t.data - (self.lr * update).astype(t.data.dtype)


@dataclass
class StageConfig:
    stage: int
    lr: float
    batch_size: int = 32
    epochs: int = 1
    num_docs: int = 4096
    seed: int = 0
    train_encoder: bool = True
    train_connector: bool = True
    train_decoder: bool = True

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"unknown stage {self.stage}")
        if self.stage == 3 and self.train_encoder:
            raise ConfigError("stage 3 trains with the patch encoder frozen")


def default_stages(base_seed, fraction=1.0):
    """The stock three-stage schedule; ``fraction`` scales corpus sizes for
    the low-resource regime."""

    def n(count):
        return max(1, int(round(count * fraction)))

    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(77,))
    s1, s2, s3 = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    return [
        StageConfig(stage=1, lr=1e-3, batch_size=32, epochs=2, num_docs=n(4096), seed=s1),
        StageConfig(stage=2, lr=1e-3, batch_size=32, epochs=10, num_docs=n(4096), seed=s2),
        StageConfig(stage=3, lr=3e-4, batch_size=32, epochs=3, num_docs=n(1024),
                    seed=s3, train_encoder=False),
    ]


def train_stage(cfg: StageConfig, model, docs, history=None):
    """Run one stage; returns (Checkpoint, per-step loss log).

    The log holds (stage, step, mean batch loss) triples. Aborts with a
    diagnostic if the loss stays above 10x its initial value for 50
    consecutive steps.
    """
    if len(docs) == 0:
        raise ConfigError(f"stage {cfg.stage} has no documents")
    model.set_trainable(encoder=cfg.train_encoder,
                        connector=cfg.train_connector,
                        decoder=cfg.train_decoder)
    trainable = {k: t for k, t in model.named_tensors().items() if t.requires_grad}
    opt = Adam(trainable, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    log = []
    initial = None
    bad_streak = 0
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(docs))
        for at in range(0, len(order), cfg.batch_size):
            batch = [docs[i] for i in order[at:at + cfg.batch_size]]
            opt.zero_grads()
            losses = []
            for doc in batch:
                loss = model.doc_loss(doc)
                ad.backward(loss, seed=np.asarray(1.0 / len(batch),
                                                  dtype=loss.data.dtype))
                losses.append(float(loss.data))
            mean_loss = float(np.mean(losses))
            if not np.isfinite(mean_loss):
                raise NumericError(f"non-finite loss at stage {cfg.stage} step {step}")
            if initial is None:
                initial = mean_loss
            bad_streak = bad_streak + 1 if mean_loss > DIVERGENCE_FACTOR * initial else 0
            if bad_streak >= DIVERGENCE_PATIENCE:
                raise NumericError(
                    f"divergence abort: stage {cfg.stage} loss {mean_loss:.3f} vs "
                    f"initial {initial:.3f} for {bad_streak} steps")
            opt.step()
            log.append((cfg.stage, step, mean_loss))
            step += 1
    model.set_trainable(True, True, True)
    ckpt = Checkpoint(
        params=model.state_dict(),
        moments_m={k: v.copy() for k, v in opt.m.items()},
        moments_v={k: v.copy() for k, v in opt.v.items()},
        step=opt.step_count,
        rng_state=rng.bit_generator.state,
        stage_history=(list(history) if history else []) + [cfg.stage],
        meta={"connector": model.connector.name, "stage": cfg.stage,
              "lr": cfg.lr, "seed": cfg.seed})
    return ckpt, log
