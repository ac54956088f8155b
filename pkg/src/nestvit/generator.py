"""Transposed-NesT image generator.

Runs the classifier hierarchy backwards: a latent vector is projected to a
single block of tokens, and each hierarchy's transformer stack is followed by
a de-aggregation that quadruples the block count while the spatial plane
doubles per side. Block size (and with it sequence length) stays constant all
the way up, so attention cost per block is flat across levels. The default
de-aggregation is the parameter-free pixel shuffle, which forces each
hierarchy's width to be a quarter of the previous one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .aggregation import (
    DEAGG_VARIANTS,
    count_deaggregation_params,
    deaggregate,
    init_deaggregation_params,
)
from .blocking import unblockify
from .model import ParamSet, count_params, transformer_layer
from .init import trunc_normal, zeros, ones
from .tensor import Tensor


@dataclass
class GenConfig:
    latent_dim: int = 128
    out_size: int = 64
    channels: int = 3
    dims: tuple[int, ...] = (1024, 256, 64, 16)
    heads: tuple[int, ...] = (4, 4, 4, 4)
    repeats: tuple[int, ...] = (5, 3, 3, 2)
    block_side: int = 8
    ffn_ratio: int = 4
    deaggregation: str = "pixel_shuffle"

    def __post_init__(self):
        self.dims = tuple(self.dims)
        self.heads = tuple(self.heads)
        self.repeats = tuple(self.repeats)
        self.validate()

    @property
    def num_hierarchies(self) -> int:
        return len(self.dims)

    @property
    def seq_len(self) -> int:
        return self.block_side ** 2

    def num_blocks(self, level: int) -> int:
        return 4 ** level

    def plane_side(self, level: int) -> int:
        return self.block_side * 2 ** level

    def validate(self) -> "GenConfig":
        if not (len(self.dims) == len(self.heads) == len(self.repeats)):
            raise ValueError(
                f"dims/heads/repeats lengths differ: "
                f"{len(self.dims)}/{len(self.heads)}/{len(self.repeats)}")
        if self.num_hierarchies < 1:
            raise ValueError("need at least one hierarchy")
        if self.latent_dim < 1 or self.block_side < 1 or self.channels < 1:
            raise ValueError("latent_dim, block_side and channels must be positive")
        if min(self.repeats) < 1:
            raise ValueError(f"every hierarchy needs >= 1 layer, got {self.repeats}")
        want = self.block_side * 2 ** (self.num_hierarchies - 1)
        if self.out_size != want:
            raise ValueError(
                f"out_size {self.out_size} != block_side * 2^(L-1) = {want}")
        for d, h in zip(self.dims, self.heads):
            if h < 1 or d % h:
                raise ValueError(f"width {d} not divisible by {h} heads")
        if self.deaggregation not in DEAGG_VARIANTS:
            raise ValueError(f"unknown de-aggregation {self.deaggregation!r}; "
                             f"expected one of {DEAGG_VARIANTS}")
        if self.deaggregation == "pixel_shuffle":
            for a, b in zip(self.dims, self.dims[1:]):
                if a % 4 or b != a // 4:
                    raise ValueError(
                        f"pixel_shuffle needs a /4 width chain, got {self.dims}")
        return self


GEN_64 = GenConfig()

GEN_MICRO = GenConfig(latent_dim=16, out_size=16, block_side=2,
                      dims=(128, 32, 8, 2), heads=(4, 2, 2, 1),
                      repeats=(1, 1, 1, 1))


# -- parameters ---------------------------------------------------------------


def init_gen_params(cfg: GenConfig, rng: np.random.Generator) -> ParamSet:
    n, d0 = cfg.seq_len, cfg.dims[0]
    p: ParamSet = {}
    p["stem.w"] = trunc_normal(rng, (cfg.latent_dim, n * d0))
    p["stem.b"] = zeros((n * d0,))
    for i, (d, r) in enumerate(zip(cfg.dims, cfg.repeats)):
        p[f"g{i}.pe"] = trunc_normal(rng, (cfg.num_blocks(i), n, d))
        for j in range(r):
            pre = f"g{i}.l{j}."
            p[pre + "ln1.g"] = ones((d,))
            p[pre + "ln1.b"] = zeros((d,))
            p[pre + "qkv.w"] = trunc_normal(rng, (d, 3 * d))
            p[pre + "qkv.b"] = zeros((3 * d,))
            p[pre + "proj.w"] = trunc_normal(rng, (d, d))
            p[pre + "proj.b"] = zeros((d,))
            p[pre + "ln2.g"] = ones((d,))
            p[pre + "ln2.b"] = zeros((d,))
            p[pre + "ffn.w1"] = trunc_normal(rng, (d, cfg.ffn_ratio * d))
            p[pre + "ffn.b1"] = zeros((cfg.ffn_ratio * d,))
            p[pre + "ffn.w2"] = trunc_normal(rng, (cfg.ffn_ratio * d, d))
            p[pre + "ffn.b2"] = zeros((d,))
        if i < cfg.num_hierarchies - 1:
            sub = init_deaggregation_params(cfg.deaggregation, d,
                                            cfg.dims[i + 1], rng)
            for name, t in sub.items():
                p[f"deagg{i}.{name}"] = t
    d_top = cfg.dims[-1]
    p["out.ln.g"] = ones((d_top,))
    p["out.ln.b"] = zeros((d_top,))
    p["out.conv.w"] = trunc_normal(rng, (d_top, cfg.channels))
    p["out.conv.b"] = zeros((cfg.channels,))
    return p


def expected_gen_params(cfg: GenConfig) -> int:
    """Closed-form count; cross-checks init_gen_params in tests."""
    n, d0 = cfg.seq_len, cfg.dims[0]
    total = cfg.latent_dim * n * d0 + n * d0
    for i, (d, r) in enumerate(zip(cfg.dims, cfg.repeats)):
        per_layer = (3 * d * d + 3 * d) + (d * d + d) + 4 * d \
            + 2 * (cfg.ffn_ratio * d * d) + cfg.ffn_ratio * d + d
        total += cfg.num_blocks(i) * n * d + r * per_layer
        if i < cfg.num_hierarchies - 1:
            total += count_deaggregation_params(cfg.deaggregation, d,
                                                cfg.dims[i + 1])
    total += 2 * cfg.dims[-1]
    total += cfg.dims[-1] * cfg.channels + cfg.channels
    return total


# -- forward ------------------------------------------------------------------


@dataclass
class GenOutputs:
    images: Tensor                       # (b, out, out, channels), tanh range
    # Per-hierarchy block activations after that level's layers, before
    # de-aggregation (so the block count shows the 1 -> 4 -> ... progression).
    blocked: list[Tensor] = field(default_factory=list)
    grids: list[tuple[int, int]] = field(default_factory=list)


def _gather(params: ParamSet, prefix: str) -> ParamSet:
    return {k[len(prefix):]: v for k, v in params.items()
            if k.startswith(prefix)}


def generate(params: ParamSet, cfg: GenConfig, z) -> GenOutputs:
    """Decode latents ``z`` (b, latent_dim) into images."""
    if not isinstance(z, Tensor):
        z = Tensor(np.asarray(z, dtype=np.float32))
    if z.ndim != 2 or z.shape[1] != cfg.latent_dim:
        raise T.ShapeError(
            f"expected latents (b, {cfg.latent_dim}), got {tuple(z.shape)}")
    b = z.shape[0]
    n = cfg.seq_len

    x = T.linear(z, params["stem.w"], params["stem.b"])
    x = T.reshape(x, (b, 1, n, cfg.dims[0]))

    out = GenOutputs(images=None)
    grid = (1, 1)
    for i, (d, r) in enumerate(zip(cfg.dims, cfg.repeats)):
        x = T.add(x, params[f"g{i}.pe"])
        for j in range(r):
            x = transformer_layer(x, params, f"g{i}.l{j}.", cfg.heads[i])
        out.blocked.append(x)
        out.grids.append(grid)
        if i < cfg.num_hierarchies - 1:
            x, grid = deaggregate(x, grid, cfg.deaggregation,
                                  _gather(params, f"deagg{i}."))

    plane = unblockify(x, grid)
    plane = T.layernorm(plane, params["out.ln.g"], params["out.ln.b"])
    plane = T.linear(plane, params["out.conv.w"], params["out.conv.b"])
    out.images = T.tanh(plane)
    return out


# -- reconstruction smoke-train ------------------------------------------------


def reconstruction_losses(params: ParamSet, cfg: GenConfig, z: np.ndarray,
                          target: np.ndarray, steps: int, lr: float = 1e-3,
                          weight_decay: float = 0.0) -> list[float]:
    """Fit the generator to reproduce ``target`` from fixed latents by MSE;
    returns the per-step losses. A sanity probe that gradients reach every
    parameter through the full decode path, not a real training recipe."""
    from .training import adamw_step, init_adamw, zero_grads

    if steps < 1:
        raise ValueError("steps must be >= 1")
    tgt = Tensor(np.asarray(target, dtype=np.float32))
    state = init_adamw(params)
    losses = []
    for _ in range(steps):
        zero_grads(params)
        images = generate(params, cfg, z).images
        diff = T.sub(images, tgt)
        loss = T.mean(T.mul(diff, diff))
        loss.backward()
        adamw_step(params, state, lr, weight_decay=weight_decay)
        losses.append(loss.item())
    return losses


__all__ = ["GenConfig", "GenOutputs", "GEN_64", "GEN_MICRO",
           "init_gen_params", "expected_gen_params", "count_params",
           "generate", "reconstruction_losses"]
