"""Block aggregation between hierarchy levels, plus its ablation variants.

Aggregation takes blocked features (b, #blocks, n, d_in) at one level and
produces (b, #blocks/4, n, d_out) for the next: the number of blocks drops
4x while the tokens-per-block count n stays fixed. Every variant is a
spatial 2x downsample; they differ in what the downsample is and whether
information may flow across block boundaries:

* ``image`` plane: blocks are stitched back into the full feature plane
  first, so 3x3 windows straddle the seams between merged blocks. This is
  what gives the hierarchy cross-block communication.
* ``block`` plane: the same pipeline runs independently inside each 2x2
  group of blocks being merged, so nothing crosses a group boundary.

A variant spec string is ``"<name>@<plane>"``; the plane suffix defaults
to ``image`` when omitted.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocking import blockify, unblockify
from .init import trunc_normal, zeros, ones
from .tensor import ShapeError, Tensor

VARIANTS = (
    "conv_ln_maxpool",   # conv3x3 -> LN -> maxpool3x3/2 (the default)
    "conv_ln_avgpool",   # conv3x3 -> LN -> avgpool3x3/2
    "conv_stride2",      # single strided conv3x3/2
    "maxpool_only",      # maxpool3x3/2, no learned mixing
    "patch_merge",       # concat each 2x2 patch, linear 4*d_in -> d_out
    "subsample_2x2",     # keep every other pixel
    "identity",          # no-op; only valid when validation is relaxed
    "conv1d_4x1",        # reserved; not implemented
)

PLANES = ("image", "block")

# Variants with no channel mixing of their own get a trailing 1x1 conv,
# but only when the channel count actually has to change.
_NEEDS_PROJ = ("maxpool_only", "subsample_2x2")


def parse_aggregation(spec: str) -> tuple[str, str]:
    """Split ``"name@plane"`` (plane optional) and validate both parts."""
    name, _, plane = spec.partition("@")
    plane = plane or "image"
    if name not in VARIANTS:
        raise ValueError(f"unknown aggregation variant {name!r}; expected one of {VARIANTS}")
    if plane not in PLANES:
        raise ValueError(f"unknown aggregation plane {plane!r}; expected one of {PLANES}")
    return name, plane


def init_aggregation_params(variant: str, d_in: int, d_out: int,
                            rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh parameters for one aggregation step, keyed by relative name."""
    p: dict[str, Tensor] = {}
    if variant in ("conv_ln_maxpool", "conv_ln_avgpool"):
        p["conv.w"] = trunc_normal(rng, (3, 3, d_in, d_out))
        p["conv.b"] = zeros((d_out,))
        p["ln.g"] = ones((d_out,))
        p["ln.b"] = zeros((d_out,))
    elif variant == "conv_stride2":
        p["conv.w"] = trunc_normal(rng, (3, 3, d_in, d_out))
        p["conv.b"] = zeros((d_out,))
    elif variant == "patch_merge":
        p["merge.w"] = trunc_normal(rng, (4 * d_in, d_out))
        p["merge.b"] = zeros((d_out,))
    elif variant in _NEEDS_PROJ:
        if d_in != d_out:
            p["proj.w"] = trunc_normal(rng, (d_in, d_out))
            p["proj.b"] = zeros((d_out,))
    elif variant == "identity":
        pass
    elif variant == "conv1d_4x1":
        raise NotImplementedError(
            "conv1d_4x1 aggregation is reserved but not implemented; "
            "use one of: " + ", ".join(v for v in VARIANTS if v != "conv1d_4x1"))
    else:  # pragma: no cover - parse_aggregation guards this
        raise ValueError(f"unknown aggregation variant {variant!r}")
    return p


def count_aggregation_params(variant: str, d_in: int, d_out: int) -> int:
    if variant in ("conv_ln_maxpool", "conv_ln_avgpool"):
        return 9 * d_in * d_out + 3 * d_out
    if variant == "conv_stride2":
        return 9 * d_in * d_out + d_out
    if variant == "patch_merge":
        return 4 * d_in * d_out + d_out
    if variant in _NEEDS_PROJ:
        return (d_in * d_out + d_out) if d_in != d_out else 0
    return 0


def _subsample(plane: Tensor) -> Tensor:
    """Keep the top-left pixel of every 2x2 cell."""
    b, h, w, d = plane.shape
    x = T.reshape(plane, (b, h // 2, 2, w // 2, 2, d))
    x = T.take(x, 2, 0)            # (b, h/2, w/2, 2, d)
    x = T.take(x, 3, 0)            # (b, h/2, w/2, d)
    return x


def downsample_plane(plane: Tensor, variant: str, params: dict[str, Tensor],
                     d_out: int) -> Tensor:
    """Spatial 2x reduction of a (b, H, W, d_in) plane to (b, H/2, W/2, d_out)."""
    if plane.ndim != 4:
        raise ShapeError(f"downsample_plane: expected (b,H,W,d), got {tuple(plane.shape)}")
    d_in = plane.shape[-1]
    if variant == "conv_ln_maxpool":
        x = T.conv2d(plane, params["conv.w"], params["conv.b"], stride=1)
        x = T.layernorm(x, params["ln.g"], params["ln.b"])
        return T.maxpool2d(x, window=3, stride=2)
    if variant == "conv_ln_avgpool":
        x = T.conv2d(plane, params["conv.w"], params["conv.b"], stride=1)
        x = T.layernorm(x, params["ln.g"], params["ln.b"])
        return T.avgpool2d(x, window=3, stride=2)
    if variant == "conv_stride2":
        return T.conv2d(plane, params["conv.w"], params["conv.b"], stride=2)
    if variant == "maxpool_only":
        x = T.maxpool2d(plane, window=3, stride=2)
        if d_in != d_out:
            x = T.linear(x, params["proj.w"], params["proj.b"])
        return x
    if variant == "patch_merge":
        x = T.space_to_depth(plane, 2)
        return T.linear(x, params["merge.w"], params["merge.b"])
    if variant == "subsample_2x2":
        x = _subsample(plane)
        if d_in != d_out:
            x = T.linear(x, params["proj.w"], params["proj.b"])
        return x
    if variant == "identity":
        return plane
    raise ValueError(f"unknown aggregation variant {variant!r}")


def aggregate(x: Tensor, grid: tuple[int, int], variant: str, plane: str,
              params: dict[str, Tensor], d_out: int) -> tuple[Tensor, tuple[int, int]]:
    """One aggregation step on blocked features.

    x: (b, #blocks, n, d_in) with blocks arranged on ``grid`` (rows, cols).
    Returns the merged (b, #blocks/4, n, d_out) tensor and the new grid.
    ``identity`` short-circuits and leaves everything untouched.
    """
    if variant == "identity":
        return x, grid
    b, nb, n, d_in = x.shape
    gh, gw = grid
    if gh * gw != nb:
        raise ShapeError(f"aggregate: grid {grid} does not cover {nb} blocks")
    if gh % 2 or gw % 2:
        raise ShapeError(f"aggregate: grid {grid} has no 2x2 block groups to merge")

    if plane == "image":
        full = unblockify(x, grid)                       # (b, H, W, d_in)
        down = downsample_plane(full, variant, params, d_out)
        out = blockify(down, int(np.sqrt(n)))
        return out, (gh // 2, gw // 2)

    # block plane: carve out each 2x2 group of blocks and downsample it alone
    side = int(np.sqrt(n))
    g = T.reshape(x, (b, gh // 2, 2, gw // 2, 2, n, d_in))
    g = T.transpose(g, (0, 1, 3, 2, 4, 5, 6))            # (b, gh/2, gw/2, 2, 2, n, d)
    g = T.reshape(g, (b * (gh // 2) * (gw // 2), 4, n, d_in))
    mini = unblockify(g, (2, 2))                         # (b*groups, 2*side, 2*side, d)
    down = downsample_plane(mini, variant, params, d_out)
    out = blockify(down, side)                           # (b*groups, 1, n, d_out)
    out = T.reshape(out, (b, (gh // 2) * (gw // 2), n, d_out))
    return out, (gh // 2, gw // 2)


# --------------------------------------------------------------------------
# De-aggregation (the generator's mirror image: #blocks grows 4x per step)
# --------------------------------------------------------------------------

DEAGG_VARIANTS = ("pixel_shuffle", "nearest_conv1x1", "upsample_conv3x3")


def init_deaggregation_params(variant: str, d_in: int, d_out: int,
                              rng: np.random.Generator) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    if variant == "pixel_shuffle":
        # parameter-free: channels fold into space, so d_out must be d_in/4
        if d_in % 4 or d_out != d_in // 4:
            raise ValueError(
                f"pixel_shuffle de-aggregation needs d_out == d_in/4, "
                f"got {d_in} -> {d_out}")
    elif variant == "nearest_conv1x1":
        p["proj.w"] = trunc_normal(rng, (d_in, d_out))
        p["proj.b"] = zeros((d_out,))
    elif variant == "upsample_conv3x3":
        p["conv.w"] = trunc_normal(rng, (3, 3, d_in, d_out))
        p["conv.b"] = zeros((d_out,))
    else:
        raise ValueError(f"unknown de-aggregation variant {variant!r}; "
                         f"expected one of {DEAGG_VARIANTS}")
    return p


def count_deaggregation_params(variant: str, d_in: int, d_out: int) -> int:
    if variant == "pixel_shuffle":
        return 0
    if variant == "nearest_conv1x1":
        return d_in * d_out + d_out
    if variant == "upsample_conv3x3":
        return 9 * d_in * d_out + d_out
    raise ValueError(f"unknown de-aggregation variant {variant!r}")


def _nearest_upsample2(plane: Tensor) -> Tensor:
    """Exact 2x nearest-neighbour upsample via channel tiling + pixel shuffle."""
    d = plane.shape[-1]
    tile = Tensor(np.tile(np.eye(d, dtype=plane.dtype), (1, 4)))  # (d, 4d), constant
    return T.pixel_shuffle(T.matmul(plane, tile), 2)


def upsample_plane(plane: Tensor, variant: str, params: dict[str, Tensor]) -> Tensor:
    """(b, H, W, d_in) -> (b, 2H, 2W, d_out)."""
    if variant == "pixel_shuffle":
        return T.pixel_shuffle(plane, 2)
    if variant == "nearest_conv1x1":
        x = _nearest_upsample2(plane)
        return T.linear(x, params["proj.w"], params["proj.b"])
    if variant == "upsample_conv3x3":
        x = _nearest_upsample2(plane)
        return T.conv2d(x, params["conv.w"], params["conv.b"], stride=1)
    raise ValueError(f"unknown de-aggregation variant {variant!r}")


def deaggregate(x: Tensor, grid: tuple[int, int], variant: str,
                params: dict[str, Tensor]) -> tuple[Tensor, tuple[int, int]]:
    """(b, #blocks, n, d_in) -> (b, 4*#blocks, n, d_out), image plane."""
    b, nb, n, _ = x.shape
    gh, gw = grid
    if gh * gw != nb:
        raise ShapeError(f"deaggregate: grid {grid} does not cover {nb} blocks")
    full = unblockify(x, grid)
    up = upsample_plane(full, variant, params)
    out = blockify(up, int(np.sqrt(n)))
    return out, (gh * 2, gw * 2)
