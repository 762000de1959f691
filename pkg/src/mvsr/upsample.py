"""Coarse-to-fine depth upsampling with learned 3x3 propagation smoothing.

Each stage doubles (or so) the resolution by nearest-neighbor replication
and then replaces every pixel by a softmax-weighted average of its 3x3
neighborhood.  The weights come from a small CNN that sees the upsampled
depth next to a guidance map: coarse features, then fine features, then
the RGB image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffkern import ParameterStore, conv2d, group_norm
from .diffkern import tensor as T
from .errors import BadSize, ShapeMismatch, check_finite
from .features import COARSE_SIZE, FINE_SIZE, FeatureMapPair
from .geometry import DepthMap

IMAGE_SIZE = (320, 256)
STAGE_SIZES = (COARSE_SIZE, FINE_SIZE, IMAGE_SIZE)
SMOOTH_WIDTHS = (32, 32, 16)
# neighbor order: row-major over dy, dx in (-1, 0, 1); index 4 is the center
_SHIFTS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
CENTER = 4


def nn_source_index(n_src: int, n_dst: int) -> np.ndarray:
    """Nearest source index for each destination pixel center."""
    return np.minimum(((np.arange(n_dst) + 0.5) * n_src / n_dst).astype(np.int64), n_src - 1)


def nn_upsample(depth: DepthMap, target_w: int, target_h: int) -> DepthMap:
    if target_w < depth.width or target_h < depth.height:
        raise BadSize(f"cannot upsample {depth.width}x{depth.height} to {target_w}x{target_h}")
    rows = nn_source_index(depth.height, target_h)
    cols = nn_source_index(depth.width, target_w)
    return DepthMap(depth.depth[np.ix_(rows, cols)], depth.valid[np.ix_(rows, cols)])


def neighborhoods(a: np.ndarray) -> np.ndarray:
    """(H, W) -> (H, W, 9) replicate-padded 3x3 neighborhoods."""
    p = np.pad(a, 1, mode="edge")
    h, w = a.shape
    return np.stack([p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] for dy, dx in _SHIFTS], axis=-1)


def smoothing_scores(store: ParameterStore, depth: np.ndarray, guidance: np.ndarray, path: str) -> T.Tensor:
    """(H, W, 9) raw neighbor scores from concat(guidance, depth); conv (C+1) -> 32 -> 32 -> 16 -> 9."""
    x = np.concatenate([guidance, depth[..., None]], axis=-1).astype(store.dtype)[None]
    x = T.Tensor(x)
    for i, w in enumerate(SMOOTH_WIDTHS):
        x = group_norm(store, f"{path}/n{i}", conv2d(store, f"{path}/c{i}", x, w), relu=True)
    x = conv2d(store, f"{path}/c{len(SMOOTH_WIDTHS)}", x, 9)
    return T.reshape(x, x.shape[1:])


@dataclass(eq=False)
class SmoothResult:
    depth: DepthMap
    values: T.Tensor  # (H, W) smoothed depths, carries the weight gradient
    weights: T.Tensor  # (H, W, 9) softmax weights before the validity mask


def propagation_smooth(depth: DepthMap, guidance: np.ndarray, store: ParameterStore | None = None,
                       path: str = "smooth", forced_weights=None) -> SmoothResult:
    """Replace every pixel by a weighted average of its 3x3 neighborhood.

    Invalid neighbors drop out and the remaining weights are renormalized;
    a pixel with no valid neighbor stays invalid.  The average is taken
    relative to a valid reference depth so constant maps and one-hot weights
    are reproduced exactly.
    """
    h, w = depth.height, depth.width
    if guidance.shape[:2] != (h, w):
        raise ShapeMismatch(f"guidance {guidance.shape[:2]} does not match depth {(h, w)}")
    d = np.where(depth.valid, depth.depth, 0.0)
    if forced_weights is not None:
        wts = T.Tensor(np.broadcast_to(np.asarray(forced_weights, dtype=np.float64), (h, w, 9)).copy())
    else:
        wts = T.softmax(smoothing_scores(store, d, guidance, path), axis=-1)
    nd = neighborhoods(d)
    nv = neighborhoods(depth.valid)
    any_valid = nv.any(axis=-1)
    first = np.argmax(nv, axis=-1)
    ref = np.where(depth.valid, d, np.take_along_axis(nd, first[..., None], axis=-1)[..., 0])
    diff = np.where(nv, nd - ref[..., None], 0.0).astype(wts.dtype)
    masked = T.mul(wts, nv.astype(wts.dtype))
    total = T.tsum(masked, axis=-1, keepdims=True)
    # forced weights may put no mass on a valid neighbor; such pixels become invalid
    any_valid = any_valid & (total.data[..., 0] > 0)
    total_safe = T.add(total, (~any_valid)[..., None].astype(wts.dtype))
    norm = T.div(masked, total_safe)
    values = T.add(T.tsum(T.mul(norm, diff), axis=-1), ref.astype(wts.dtype))
    check_finite("smoothed depth", np.where(any_valid, values.data, 0.0))
    lo = np.where(nv, nd, np.inf).min(axis=-1)
    hi = np.where(nv, nd, -np.inf).max(axis=-1)
    out = np.where(any_valid, np.clip(values.data.astype(np.float64), lo, hi), 0.0)
    return SmoothResult(DepthMap(out, any_valid), values, wts)


def one_hot_center() -> np.ndarray:
    w = np.zeros(9)
    w[CENTER] = 1.0
    return w


@dataclass(eq=False)
class UpsampleStage:
    upsampled: DepthMap
    smoothed: SmoothResult


def coarse_to_fine(depth: DepthMap, fmaps: FeatureMapPair, image: np.ndarray, store: ParameterStore | None = None,
                   path: str = "upsample", forced_weights=None) -> tuple[DepthMap, list]:
    """Three upsample+smooth stages to 320x256; returns (final map, per-stage results)."""
    guides = (fmaps.coarse, fmaps.fine, np.asarray(image, dtype=np.float64))
    stages = []
    cur = depth
    for i, ((w, h), guide) in enumerate(zip(STAGE_SIZES, guides)):
        up = nn_upsample(cur, w, h)
        sm = propagation_smooth(up, guide, store, f"{path}/s{i}", forced_weights)
        stages.append(UpsampleStage(up, sm))
        cur = sm.depth
    return cur, stages


__all__ = [
    "CENTER", "IMAGE_SIZE", "STAGE_SIZES", "SmoothResult", "UpsampleStage", "coarse_to_fine", "neighborhoods",
    "nn_source_index", "nn_upsample", "one_hot_center", "propagation_smooth", "smoothing_scores",
]
