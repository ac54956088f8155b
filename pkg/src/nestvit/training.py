"""Supervised training: AdamW, warmup+cosine schedule, epoch loop.

AdamW uses decoupled weight decay applied to *every* parameter (no
norm/bias exclusion list) with bias-corrected moments. The learning rate
ramps linearly from zero to ``peak_lr = base_lr * total_batch_size`` over
the warmup, then follows a cosine to exactly zero at the final step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import NestConfig, ParamSet, forward
from .tensor import Tensor


@dataclass
class TrainConfig:
    base_lr: float = 2.5e-6          # per-sample rate; peak = base_lr * batch
    total_batch_size: int = 64
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    total_epochs: int = 200
    label_smoothing: float = 0.1
    augment: str = "none"            # "none" | "flip_crop"
    seed: int = 0

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.total_batch_size

    def validate(self) -> "TrainConfig":
        if self.base_lr <= 0 or self.total_batch_size < 1:
            raise ValueError("base_lr and total_batch_size must be positive")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError(
                f"warmup {self.warmup_epochs} exceeds total {self.total_epochs}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing out of range: {self.label_smoothing}")
        if self.augment not in ("none", "flip_crop"):
            raise ValueError(f"unknown augment mode {self.augment!r}")
        return self


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_adamw(params: ParamSet) -> AdamWState:
    return AdamWState(
        m={k: np.zeros_like(t.data) for k, t in params.items()},
        v={k: np.zeros_like(t.data) for k, t in params.items()},
    )


def adamw_step(params: ParamSet, state: AdamWState, lr: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.05) -> None:
    """One in-place update from the gradients stored on ``params``."""
    b1, b2 = betas
    t = state.step + 1
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"non-finite gradient in {name!r} at step {state.step}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data -= (lr * (mhat / (np.sqrt(vhat) + eps))
                   + lr * weight_decay * p.data).astype(p.data.dtype)
    state.step = t


def zero_grads(params: ParamSet) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def lr_schedule(step: int, total_steps: int, peak_lr: float,
                warmup_steps: int) -> float:
    """Linear warmup 0 -> peak over ``warmup_steps``, then cosine to exactly
    zero at the final step (step indices 0 .. total_steps-1)."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = max(1, total_steps - 1 - warmup_steps)
    frac = (step - warmup_steps) / span
    return peak_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def augment_batch(images: np.ndarray, mode: str,
                  rng: np.random.Generator) -> np.ndarray:
    """Horizontal flip (p=0.5) + pad-4 random crop, per sample."""
    if mode == "none":
        return images
    if mode != "flip_crop":
        raise ValueError(f"unknown augment mode {mode!r}")
    b, h, w, c = images.shape
    out = np.empty_like(images)
    padded = np.pad(images, ((0, 0), (4, 4), (4, 4), (0, 0)))
    flips = rng.random(b) < 0.5
    offs = rng.integers(0, 9, size=(b, 2))
    for i in range(b):
        y, x = offs[i]
        crop = padded[i, y:y + h, x:x + w]
        out[i] = crop[:, ::-1] if flips[i] else crop
    return out


def iterate_batches(n: int, batch: int, rng: np.random.Generator | None):
    """Yield index arrays covering [0, n), shuffled when rng is given; the
    last batch may be short."""
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch):
        yield order[start:start + batch]


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

def train_epoch(params: ParamSet, cfg: NestConfig, tcfg: TrainConfig,
                images: np.ndarray, labels: np.ndarray, state: AdamWState,
                rng: np.random.Generator, total_steps: int,
                warmup_steps: int) -> dict:
    """One pass over the data; returns {'loss', 'acc', 'lr'} (lr = last used)."""
    losses, hits, count = [], 0, 0
    lr = 0.0
    for idx in iterate_batches(len(images), tcfg.total_batch_size, rng):
        xb = augment_batch(images[idx], tcfg.augment, rng)
        yb = labels[idx]
        lr = lr_schedule(state.step, total_steps, tcfg.peak_lr, warmup_steps)
        zero_grads(params)
        out = forward(params, cfg, xb, training=True, rng=rng)
        loss = T.cross_entropy(out.logits, yb,
                               label_smoothing=tcfg.label_smoothing)
        loss.backward()
        adamw_step(params, state, lr, weight_decay=tcfg.weight_decay)
        losses.append(loss.item() * len(idx))
        hits += int((out.logits.data.argmax(axis=1) == yb).sum())
        count += len(idx)
    return {"loss": sum(losses) / count, "acc": hits / count, "lr": lr}


def evaluate(params: ParamSet, cfg: NestConfig, images: np.ndarray,
             labels: np.ndarray, batch: int = 256) -> float:
    """Top-1 accuracy, deterministic (no augmentation, no stochastic depth)."""
    if len(images) == 0:
        raise ValueError("evaluate: empty dataset")
    hits = 0
    with T.no_grad():
        for idx in iterate_batches(len(images), batch, rng=None):
            logits = forward(params, cfg, images[idx]).logits.data
            hits += int((logits.argmax(axis=1) == labels[idx]).sum())
    return hits / len(images)


def train(params: ParamSet, cfg: NestConfig, tcfg: TrainConfig,
          train_images: np.ndarray, train_labels: np.ndarray,
          eval_images: np.ndarray | None = None,
          eval_labels: np.ndarray | None = None,
          on_epoch=None) -> list[dict]:
    """Full run; returns one metrics row per epoch. ``on_epoch(row)`` fires
    after each epoch (CSV writers, progress printers...)."""
    tcfg.validate()
    rng = np.random.default_rng(tcfg.seed)
    state = init_adamw(params)
    steps_per_epoch = -(-len(train_images) // tcfg.total_batch_size)
    total_steps = steps_per_epoch * tcfg.total_epochs
    warmup_steps = steps_per_epoch * tcfg.warmup_epochs
    history = []
    for epoch in range(tcfg.total_epochs):
        m = train_epoch(params, cfg, tcfg, train_images, train_labels,
                        state, rng, total_steps, warmup_steps)
        row = {"epoch": epoch, "lr": m["lr"], "train_loss": m["loss"],
               "train_acc": m["acc"]}
        if eval_images is not None:
            row["eval_acc"] = evaluate(params, cfg, eval_images, eval_labels)
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return history
