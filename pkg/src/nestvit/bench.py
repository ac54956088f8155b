"""Inference throughput measurement (single process, forward only)."""

from __future__ import annotations

import time

import numpy as np

from . import tensor as T
from .model import NestConfig, ParamSet, forward


def bench_throughput(params: ParamSet, cfg: NestConfig, batch: int,
                     iters: int, warmup: int = 2, seed: int = 0) -> float:
    """Median images/s over ``iters`` timed forward passes; ``warmup``
    untimed passes are discarded first."""
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    rng = np.random.default_rng(seed)
    images = rng.standard_normal(
        (batch, cfg.image_size, cfg.image_size, cfg.channels)).astype(np.float32)
    with T.no_grad():
        for _ in range(warmup):
            forward(params, cfg, images)
        times = []
        for _ in range(iters):
            t0 = time.perf_counter()
            forward(params, cfg, images)
            times.append(time.perf_counter() - t0)
    return batch / float(np.median(times))
