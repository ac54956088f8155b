"""Interpretability: GradCAT tree traversal, CAM heatmaps, bbox extraction.

GradCAT walks the hierarchy from the top block downwards. At each step the
current block's own token map — the activations *entering* that hierarchy's
transformer stack, i.e. the aggregation output — is weighted elementwise by
the gradient of the target-class logit and average-pooled into its four
spatial quadrants (over tokens and channels), giving a 2x2 score matrix.
Each quadrant of a block's image footprint is exactly one block of the
hierarchy below, so the argmax quadrant names the child block the traversal
enters. Quadrant indices are raster order over the 2x2 arrangement:
0=top-left, 1=top-right, 2=bottom-left, 3=bottom-right. The bottom
hierarchy's map (raw patch embeddings) is never scored; the last scored map
is the input of hierarchy 1, whose chosen quadrant is the leaf block.

Sign convention: by default the score is alpha * (+dY_c/dalpha) — follow the
gradient *ascent* direction, i.e. descend into the quadrant carrying the
most class evidence. ``sign="descent"`` negates the scores
(alpha * (-dY_c/dalpha)), which instead selects the least-supporting
quadrant; it is exposed for comparison runs.

CAM lives on the top hierarchy's post-LayerNorm plane — the exact tensor the
global average pool consumes — so the spatial mean of CAM_c recovers
logit_c - bias_c identically. Interpret-path forwards run in float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import isqrt

import numpy as np
from scipy import ndimage

from . import tensor as T
from .blocking import unblockify
from .model import NestConfig, NestOutputs, ParamSet, forward, params_to
from .tensor import GraphError, Tensor


@dataclass
class TraversalStep:
    level: int            # hierarchy whose map was scored (top = T_d-1)
    block: int            # block index of the scored map within its grid
    choice: int           # selected quadrant, raster order 0..3
    scores: np.ndarray    # (2, 2) pooled h-hat over the block's quadrants
    tied: bool            # argmax was not unique; index 0 side of the tie wins

    def validate(self) -> None:
        flat = self.scores.reshape(-1)
        if self.scores.shape != (2, 2):
            raise ValueError(f"step at level {self.level}: scores must be 2x2")
        if not np.isfinite(flat).all():
            raise ValueError(f"step at level {self.level}: non-finite scores")
        if int(flat.argmax()) != self.choice:
            raise ValueError(
                f"step at level {self.level}: recorded choice {self.choice} "
                f"is not the argmax of {flat.tolist()}")


@dataclass
class TraversalPath:
    target_class: int
    steps: list[TraversalStep] = field(default_factory=list)
    leaf_block: int = 0   # chosen block index in the bottom hierarchy

    @property
    def choices(self) -> list[int]:
        return [s.choice for s in self.steps]

    def validate(self, num_hierarchies: int | None = None) -> "TraversalPath":
        if num_hierarchies is not None and len(self.steps) != num_hierarchies - 1:
            raise ValueError(
                f"path length {len(self.steps)} != hierarchies-1 "
                f"({num_hierarchies - 1})")
        for s in self.steps:
            s.validate()
        return self

    def region(self, image_size: int) -> tuple[int, int, int]:
        """(row0, col0, side) input-pixel footprint of the final selection."""
        r0, c0, side = 0, 0, image_size
        for s in self.steps:
            side //= 2
            r0 += (s.choice // 2) * side
            c0 += (s.choice % 2) * side
        return r0, c0, side

    def to_json(self, image_size: int | None = None) -> str:
        doc = {
            "target_class": self.target_class,
            "leaf_block": self.leaf_block,
            "steps": [{
                "hierarchy": s.level,
                "block": s.block,
                "index": s.choice,
                "scores": s.scores.tolist(),
                "tied": s.tied,
            } for s in self.steps],
        }
        if image_size is not None:
            r0, c0, side = self.region(image_size)
            doc["region"] = {"row": r0, "col": c0, "side": side}
        return json.dumps(doc, indent=2)


def gradcat(outputs: NestOutputs, target_class: int,
            sign: str = "ascent") -> TraversalPath:
    """Traverse cached hierarchy activations for a single-image forward."""
    if sign not in ("ascent", "descent"):
        raise ValueError(f"sign must be 'ascent' or 'descent', got {sign!r}")
    levels = len(outputs.blocked)
    if levels < 2:
        raise ValueError("traversal needs at least two hierarchies")
    b, classes = outputs.logits.shape
    if b != 1:
        raise ValueError(f"gradcat expects a single-image batch, got {b}")
    if not 0 <= target_class < classes:
        raise IndexError(f"class {target_class} out of range [0, {classes})")

    for t in outputs.blocked:
        t.grad = None
    y = T.take(T.take(outputs.logits, 0, 0), 0, target_class)
    y.backward()

    path = TraversalPath(target_class=target_class)
    block = 0
    for level in range(levels - 1, 0, -1):
        acts = outputs.blocked[level]
        if acts.grad is None:
            raise GraphError(f"no gradient reached hierarchy {level}; "
                             "was the forward run with caching?")
        n, d = acts.shape[2], acts.shape[3]
        side = isqrt(n)
        if side * side != n or side % 2:
            raise ValueError(
                f"hierarchy {level}: n={n} has no 2x2 quadrant split")
        h = (acts.data[0, block].astype(np.float64)
             * acts.grad[0, block].astype(np.float64)).reshape(side, side, d)
        half = side // 2
        scores = np.empty((2, 2))
        for dy in (0, 1):
            for dx in (0, 1):
                scores[dy, dx] = h[dy * half:(dy + 1) * half,
                                   dx * half:(dx + 1) * half].mean()
        if sign == "descent":
            scores = -scores
        flat = scores.reshape(-1)
        choice = int(flat.argmax())
        tied = bool((flat == flat[choice]).sum() > 1)
        path.steps.append(TraversalStep(level=level, block=block,
                                        choice=choice, scores=scores,
                                        tied=tied))
        row, col = divmod(block, outputs.grids[level][1])
        child_cols = outputs.grids[level - 1][1]
        block = (2 * row + choice // 2) * child_cols + (2 * col + choice % 2)
    path.leaf_block = block
    return path


def gradcat_from_image(params: ParamSet, cfg: NestConfig, image,
                       target_class: int, sign: str = "ascent") -> TraversalPath:
    """Convenience wrapper: float64 forward with caching, then traversal."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    outputs = forward(params_to(params, np.float64), cfg, img)
    return gradcat(outputs, target_class, sign=sign)


# ---------------------------------------------------------------------------
# CAM
# ---------------------------------------------------------------------------

@dataclass
class Heatmap:
    values: np.ndarray    # (H_top, W_top) float64, top-hierarchy plane
    target_class: int

    def upsample(self, size: int) -> np.ndarray:
        return bilinear_upsample(self.values, size, size)


def cam(params: ParamSet, cfg: NestConfig, image, target_class: int) -> Heatmap:
    """Class activation map on the GAP input plane (float64 forward)."""
    if not 0 <= target_class < cfg.num_classes:
        raise IndexError(
            f"class {target_class} out of range [0, {cfg.num_classes})")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    if img.shape[0] != 1:
        raise ValueError(f"cam expects a single image, got batch {img.shape[0]}")
    p64 = params_to(params, np.float64)
    outputs = forward(p64, cfg, img)
    with T.no_grad():
        plane = unblockify(outputs.top_ln, outputs.grids[-1]).data[0]  # (Ht,Wt,d)
    w_c = p64["head.w"].data[:, target_class]
    return Heatmap(values=plane @ w_c, target_class=target_class)


def bilinear_upsample(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a 2-D map (edges clamped)."""
    a = np.asarray(a, dtype=np.float64)
    h, w = a.shape

    def axis_coords(n_in, n_out):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0.0, n_in - 1.0)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = c - lo
        return lo, hi, frac

    rlo, rhi, rf = axis_coords(h, out_h)
    clo, chi, cf = axis_coords(w, out_w)
    top = a[rlo][:, clo] * (1 - cf) + a[rlo][:, chi] * cf
    bot = a[rhi][:, clo] * (1 - cf) + a[rhi][:, chi] * cf
    return top * (1 - rf)[:, None] + bot * rf[:, None]


# ---------------------------------------------------------------------------
# bbox extraction
# ---------------------------------------------------------------------------

def normalize_heatmap(heat: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]. A constant map normalizes to all ones:
    every pixel is equally hot, so every pixel survives any threshold."""
    h = np.asarray(heat, dtype=np.float64)
    span = h.max() - h.min()
    return np.ones_like(h) if span == 0 else (h - h.min()) / span


def cam_to_bbox(heat: np.ndarray, threshold: float) -> tuple[int, int, int, int] | None:
    """Tightest box around the largest 4-connected superlevel component.

    ``heat`` is expected to be normalized to [0, 1] already (see
    ``normalize_heatmap``). Pixels with value >= threshold are kept; the
    component with the most pixels wins, ties going to the first component
    in raster order. Returns (x0, y0, x1, y1) with inclusive corners,
    x = column, or None when no pixel clears the threshold.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    h = np.asarray(heat, dtype=np.float64)
    if h.ndim != 2:
        raise ValueError(f"expected a 2-D heatmap, got shape {h.shape}")
    mask = h >= threshold
    if not mask.any():
        return None
    labels, count = ndimage.label(mask)  # default structure = 4-connectivity
    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, count + 1))
    winner = int(np.argmax(sizes)) + 1
    rows, cols = np.nonzero(labels == winner)
    return int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max())


def bbox_area(box: tuple[int, int, int, int] | None) -> int:
    if box is None:
        return 0
    x0, y0, x1, y1 = box
    return (x1 - x0 + 1) * (y1 - y0 + 1)


def threshold_sweep(heat: np.ndarray, step: float = 0.05
                    ) -> list[tuple[float, tuple[int, int, int, int] | None]]:
    """Normalize once, then bbox at each threshold 0, step, 2*step, ..., 1."""
    norm = normalize_heatmap(heat)
    out = []
    n = int(round(1.0 / step))
    for i in range(n + 1):
        t = min(1.0, i * step)
        out.append((t, cam_to_bbox(norm, t)))
    return out
