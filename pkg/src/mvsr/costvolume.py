"""Plane-sweep variance cost volume and soft-argmin coarse depth.

Coarse depth lives on a 56x56 lattice of sample pixels spread uniformly over
the full image; the lattice is exactly the pixel grid of the camera
``intrinsics.scaled(56, 56)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffkern import ParameterStore, conv1d, group_norm
from .diffkern import tensor as T
from .errors import ShapeMismatch, check_finite
from .features import ViewIndexSet, view_statistics
from .geometry import Camera, DepthMap, back_project_pixels, pixel_grid

COARSE_DEPTH = 56


@dataclass(frozen=True)
class DepthHypothesisGrid:
    start: float = 0.50
    step: float = 0.05
    count: int = 96

    def __post_init__(self):
        if not (self.step > 0 and self.count >= 1 and self.start > 0):
            raise ValueError("sweep grid needs start > 0, step > 0 and count >= 1")

    @property
    def values(self) -> np.ndarray:
        return self.start + np.arange(self.count) * self.step

    @property
    def last(self) -> float:
        return float(self.values[-1])


@dataclass(eq=False)
class CostVolume:
    """(S, S, L, C) variance costs for one reference view."""

    cost: np.ndarray
    grid: DepthHypothesisGrid
    camera: Camera  # reference camera at lattice resolution


def lattice_camera(camera: Camera, size: int = COARSE_DEPTH) -> Camera:
    return camera.scaled(size, size)


def build_cost_volume(views: ViewIndexSet, maps: dict, cameras: dict, grid: DepthHypothesisGrid | None = None,
                      size: int = COARSE_DEPTH) -> CostVolume:
    """Variance of coarse features at every lattice pixel and swept depth.

    ``cameras`` and ``maps`` are keyed by frame id (cameras at any
    resolution).
    """
    grid = grid or DepthHypothesisGrid()
    cam = lattice_camera(cameras[views.reference], size)
    pix = pixel_grid(size, size)
    d = grid.values
    pts = back_project_pixels(cam.intrinsics, cam.pose, pix[:, :, None, :],
                              np.broadcast_to(d, (size, size, grid.count)))
    cost, _ = view_statistics(pts, views.all, maps, cameras)
    return CostVolume(cost, grid, cam)


def regularizer_scores(store: ParameterStore, cost, path: str = "costreg") -> T.Tensor:
    """Per-(pixel, hypothesis) scores from a 1-D conv stack over the sweep axis.

    Input (B, L, C); channels C -> 16 -> 8 -> 1 with group norm and ReLU.
    """
    x = T.as_tensor(cost)
    x = group_norm(store, f"{path}/n0", conv1d(store, f"{path}/c0", x, 16), relu=True)
    x = group_norm(store, f"{path}/n1", conv1d(store, f"{path}/c1", x, 8), relu=True)
    x = conv1d(store, f"{path}/c2", x, 1)
    return T.reshape(x, x.shape[:2])


def soft_argmin(prob, grid: DepthHypothesisGrid) -> T.Tensor:
    """Probability-weighted mean of the hypothesis depths over the last axis."""
    prob = T.as_tensor(prob)
    d = grid.values.astype(prob.dtype)
    return T.tsum(T.mul(prob, d), axis=-1)


def regularize_and_predict(vol: CostVolume, store: ParameterStore, path: str = "costreg", forced_prob=None):
    """Soft-argmin depth from the regularized cost volume.

    Returns (DepthMap, probability tensor (S, S, L), depth tensor (S, S)).
    ``forced_prob`` bypasses the network with given probabilities.
    """
    s1, s2, L, c = vol.cost.shape
    if L != vol.grid.count:
        raise ShapeMismatch(f"cost volume has {L} hypotheses, grid has {vol.grid.count}")
    if forced_prob is not None:
        prob = T.as_tensor(np.asarray(forced_prob, dtype=np.float64).reshape(s1 * s2, L))
    else:
        x = vol.cost.reshape(s1 * s2, L, c).astype(store.dtype, copy=False)
        prob = T.softmax(regularizer_scores(store, x, path), axis=-1)
    depth = soft_argmin(prob, vol.grid)
    check_finite("plane-sweep depth", depth.data)
    # a convex combination of the grid; the clip only absorbs rounding
    d = np.clip(depth.data.reshape(s1, s2), vol.grid.start, vol.grid.last)
    return DepthMap(d.astype(np.float64), np.ones((s1, s2), bool)), T.reshape(prob, (s1, s2, L)), \
        T.reshape(depth, (s1, s2))
