"""Blockify / unblockify: between image planes and per-block sequences.

A plane (b, H, W, d) splits into non-overlapping ``block x block`` squares,
raster order over blocks and raster order inside each block, giving
(b, #blocks, n, d) with n = block². The round trip is exact.
"""

from __future__ import annotations

import math

from .tensor import ShapeError, Tensor, reshape, transpose


def blockify(x: Tensor, block: int) -> Tensor:
    """(b, H, W, d) -> (b, #blocks, n, d) with n = block * block."""
    if x.ndim != 4:
        raise ShapeError(f"blockify: expected a (b,H,W,d) plane, got {tuple(x.shape)}")
    b, h, w, d = x.shape
    if h % block or w % block:
        raise ShapeError(f"blockify: plane {h}x{w} not divisible by block {block}")
    gh, gw = h // block, w // block
    x = reshape(x, (b, gh, block, gw, block, d))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (b, gh * gw, block * block, d))


def unblockify(x: Tensor, grid: tuple[int, int] | None = None) -> Tensor:
    """(b, #blocks, n, d) -> (b, H, W, d); inverse of ``blockify``.

    ``grid`` is the (rows, cols) arrangement of blocks; defaults to square.
    """
    if x.ndim != 4:
        raise ShapeError(f"unblockify: expected (b,#blocks,n,d), got {tuple(x.shape)}")
    b, nb, n, d = x.shape
    block = math.isqrt(n)
    if block * block != n:
        raise ShapeError(f"unblockify: sequence length {n} is not a square")
    if grid is None:
        side = math.isqrt(nb)
        if side * side != nb:
            raise ShapeError(f"unblockify: block count {nb} is not a square; pass grid=")
        grid = (side, side)
    gh, gw = grid
    if gh * gw != nb:
        raise ShapeError(f"unblockify: grid {grid} does not cover {nb} blocks")
    x = reshape(x, (b, gh, gw, block, block, d))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (b, gh * block, gw * block, d))
