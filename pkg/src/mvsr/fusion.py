"""Multi-view consistency fusion of depth maps into one point cloud.

A depth pixel survives when enough other views agree with it: its
back-projected point, projected into view m, lands on a valid pixel whose
depth matches the point's z in m within a relative tolerance.  Views where
the point is out of frame, behind the camera, or occluded simply do not
vote; nothing vetoes a point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import back_project_pixels, depth_to_points, project_points


@dataclass(frozen=True)
class FusionParams:
    rel_tol: float = 0.03
    min_consistent: int = 2

    def __post_init__(self):
        if not self.rel_tol > 0 or self.min_consistent < 1:
            raise ValueError("fusion needs rel_tol > 0 and min_consistent >= 1")


@dataclass(eq=False)
class FusedCloud:
    positions: np.ndarray  # (P, 3)
    support: np.ndarray  # (P,) number of agreeing views
    frames: np.ndarray  # (P,) frame of the reference pixel
    pixels: np.ndarray  # (P, 2)

    def __len__(self):
        return len(self.positions)


def _agreement(points, dm, cam, rel_tol):
    """For each world point: does view (dm, cam) agree, and where (nearest pixel)."""
    pix, z = project_points(cam.intrinsics, cam.pose, points)
    u = np.floor(pix[:, 0] + 0.5)
    v = np.floor(pix[:, 1] + 0.5)
    inside = (z > 1e-9) & (u >= 0) & (u < dm.width) & (v >= 0) & (v < dm.height)
    ui = np.where(inside, u, 0).astype(np.int64)
    vi = np.where(inside, v, 0).astype(np.int64)
    dm_z = dm.depth[vi, ui]
    ok = inside & dm.valid[vi, ui]
    with np.errstate(invalid="ignore", divide="ignore"):
        agree = ok & (np.abs(dm_z - z) < rel_tol * z)
    return agree, ui, vi, dm_z


def fuse(depths: dict, cameras: dict, params: FusionParams | None = None, average: bool = False) -> FusedCloud:
    """Fuse depth maps keyed by frame id (cameras rescaled to each map's size).

    Every surviving pixel is emitted once.  By default its own back-projected
    point is emitted; ``average=True`` emits the mean of that point and the
    agreeing observations' back-projections, accumulated in frame-id order.
    """
    params = params or FusionParams()
    ids = sorted(depths)
    cams = {i: cameras[i].scaled(depths[i].width, depths[i].height) for i in ids}
    out_pos, out_sup, out_frame, out_pix = [], [], [], []
    for n in ids:
        pts, pix = depth_to_points(cams[n], depths[n])
        support = np.zeros(len(pts), dtype=np.int64)
        acc = pts.copy() if average else None
        for m in ids:
            if m == n:
                continue
            agree, ui, vi, dz = _agreement(pts, depths[m], cams[m], params.rel_tol)
            support += agree
            if average and agree.any():
                obs = back_project_pixels(cams[m].intrinsics, cams[m].pose,
                                          np.stack([ui[agree], vi[agree]], axis=-1).astype(np.float64), dz[agree])
                acc[agree] += obs
        keep = support >= params.min_consistent
        pos = acc[keep] / (1 + support[keep])[:, None] if average else pts[keep]
        out_pos.append(pos)
        out_sup.append(support[keep])
        out_frame.append(np.full(int(keep.sum()), n, dtype=np.int64))
        out_pix.append(pix[keep])
    if not ids:
        return FusedCloud(np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 2)))
    return FusedCloud(np.concatenate(out_pos), np.concatenate(out_sup), np.concatenate(out_frame),
                      np.concatenate(out_pix))


__all__ = ["FusedCloud", "FusionParams", "fuse"]
