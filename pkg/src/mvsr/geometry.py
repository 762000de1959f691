"""Pinhole cameras, projection, viewing rays and image-plane sampling.

Conventions used everywhere in the package:

* camera frame is right-handed with +z forward, +x right, +y down;
* pixel origin is the top-left corner and pixel *centers* sit at integer
  coordinates, so pixel (u, v) addresses ``array[v, u]``;
* poses are stored camera-to-world: ``p_world = R @ p_cam + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonPositiveDepth, ValidationError

MIN_DEPTH = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics of the same camera resampled to ``width`` x ``height``.

        Pixel centers stay aligned: image pixel u maps to ``(u + 0.5) * sx - 0.5``.
        """
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(
            self.fx * sx, self.fy * sy,
            (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5,
            width, height,
        )


def _check_rotation(rotation: np.ndarray) -> None:
    if rotation.shape != (3, 3):
        raise ValidationError("rotation must be 3x3")
    if np.abs(rotation.T @ rotation - np.eye(3)).max() > 1e-9:
        raise ValidationError("rotation is not orthonormal")
    if abs(np.linalg.det(rotation) - 1.0) > 1e-9:
        raise ValidationError("rotation is not proper (det != 1)")


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(r)
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def principal_axis(self) -> np.ndarray:
        return self.rotation[:, 2]

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def transformed(self, rotation: np.ndarray, translation, scale: float = 1.0) -> "Pose":
        """Pose after applying ``x -> scale * (rotation @ x) + translation`` to the world."""
        rotation = np.asarray(rotation, dtype=np.float64)
        return Pose(rotation @ self.rotation, scale * (rotation @ self.translation) + np.asarray(translation))

    def __eq__(self, other):
        return (isinstance(other, Pose) and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Camera:
    intrinsics: CameraIntrinsics
    pose: Pose

    def scaled(self, width: int, height: int) -> "Camera":
        return Camera(self.intrinsics.scaled(width, height), self.pose)


@dataclass(eq=False)
class DepthMap:
    """H x W metric depths (camera-frame z) with a validity mask."""

    depth: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.depth = np.asarray(self.depth)
        if self.valid is None:
            self.valid = np.isfinite(self.depth) & (self.depth > 0)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.depth.shape or self.depth.ndim != 2:
            raise ValidationError("depth and valid must be matching 2-D arrays")
        if np.any(self.valid & ~(self.depth > 0)):
            raise ValidationError("valid depths must be positive")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def copy(self) -> "DepthMap":
        return DepthMap(self.depth.copy(), self.valid.copy())


# ---------------------------------------------------------------------------
# point-wise operations


def project(intr: CameraIntrinsics, pose: Pose, p_world) -> tuple[np.ndarray, float]:
    """Pixel coordinates and camera-frame depth of a world point."""
    pc = pose.world_to_camera(np.asarray(p_world, dtype=np.float64))
    if pc[2] <= MIN_DEPTH:
        raise NonPositiveDepth(f"point has camera-frame z = {pc[2]}")
    pixel = np.array([intr.fx * pc[0] / pc[2] + intr.cx, intr.fy * pc[1] / pc[2] + intr.cy])
    return pixel, float(pc[2])


def back_project(intr: CameraIntrinsics, pose: Pose, pixel, depth: float) -> np.ndarray:
    if not depth > 0:
        raise NonPositiveDepth(f"depth must be positive, got {depth}")
    u, v = pixel
    pc = depth * np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    return pose.camera_to_world(pc)


def viewing_ray(intr: CameraIntrinsics, pose: Pose, pixel) -> np.ndarray:
    """Unit world-frame direction of the ray through ``pixel``."""
    return viewing_rays(intr, pose, np.asarray(pixel, dtype=np.float64)[None])[0]


# ---------------------------------------------------------------------------
# vectorized variants


def project_points(intr: CameraIntrinsics, pose: Pose, points: np.ndarray):
    """Project (..., 3) world points; returns ((..., 2) pixels, (...) z).

    No depth check is made: pixels for z <= 0 are meaningless and callers
    must mask on the returned z.
    """
    pc = pose.world_to_camera(points)
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * pc[..., 0] / z + intr.cx
        v = intr.fy * pc[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1), z


def back_project_pixels(intr: CameraIntrinsics, pose: Pose, pixels: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """World points for (..., 2) pixels at (...) depths."""
    pixels = np.asarray(pixels, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (pixels[..., 0] - intr.cx) / intr.fx * depth
    y = (pixels[..., 1] - intr.cy) / intr.fy * depth
    return pose.camera_to_world(np.stack([x, y, depth], axis=-1))


def camera_rays(intr: CameraIntrinsics, pixels: np.ndarray) -> np.ndarray:
    """Unit camera-frame directions for (..., 2) pixels."""
    pixels = np.asarray(pixels, dtype=np.float64)
    d = np.stack([(pixels[..., 0] - intr.cx) / intr.fx,
                  (pixels[..., 1] - intr.cy) / intr.fy,
                  np.ones(pixels.shape[:-1])], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def viewing_rays(intr: CameraIntrinsics, pose: Pose, pixels: np.ndarray) -> np.ndarray:
    return camera_rays(intr, pixels) @ pose.rotation.T


def pixel_grid(width: int, height: int) -> np.ndarray:
    """(H, W, 2) array of integer pixel-center coordinates (u, v)."""
    v, u = np.mgrid[0:height, 0:width]
    return np.stack([u, v], axis=-1).astype(np.float64)


def depth_to_points(camera: Camera, depthmap: DepthMap):
    """Back-project every valid pixel; returns ((P, 3) points, (P, 2) pixels)."""
    pix = pixel_grid(depthmap.width, depthmap.height)[depthmap.valid]
    pts = back_project_pixels(camera.intrinsics, camera.pose, pix, depthmap.depth[depthmap.valid])
    return pts, pix


# ---------------------------------------------------------------------------
# image-plane sampling


def bilinear_sample(fmap: np.ndarray, pt) -> np.ndarray:
    """Bilinearly interpolate an (H, W, C) map at continuous (x, y); border-clamped."""
    return bilinear_sample_many(fmap, np.asarray(pt, dtype=np.float64)[None])[0]


def bilinear_sample_many(fmap: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Vectorized :func:`bilinear_sample` for (N, 2) points; returns (N, C)."""
    fmap = np.asarray(fmap)
    squeeze = fmap.ndim == 2
    if squeeze:
        fmap = fmap[..., None]
    h, w = fmap.shape[:2]
    x = np.clip(pts[:, 0], 0.0, w - 1.0)
    y = np.clip(pts[:, 1], 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (x - x0)[:, None]
    ay = (y - y0)[:, None]
    top = fmap[y0, x0] * (1 - ax) + fmap[y0, x1] * ax
    bot = fmap[y1, x0] * (1 - ax) + fmap[y1, x1] * ax
    out = top * (1 - ay) + bot * ay
    return out[:, 0] if squeeze else out


# ---------------------------------------------------------------------------
# text formats


def write_poses(path, poses: dict[int, Pose]) -> None:
    lines = []
    for fid in sorted(poses):
        lines.append(f"frame {fid}")
        for row in poses[fid].as_matrix():
            lines.append(" ".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path) -> dict[int, Pose]:
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    poses = {}
    if len(rows) % 5:
        raise ValidationError(f"{path}: pose blocks must be 5 lines")
    for i in range(0, len(rows), 5):
        head = rows[i]
        if len(head) != 2 or head[0] != "frame":
            raise ValidationError(f"{path}: expected 'frame <id>', got {' '.join(head)!r}")
        try:
            m = np.array([[float(x) for x in r] for r in rows[i + 1:i + 5]])
        except ValueError as exc:
            raise ValidationError(f"{path}: bad matrix entry") from exc
        if m.shape != (4, 4):
            raise ValidationError(f"{path}: frame {head[1]} matrix is not 4x4")
        poses[int(head[1])] = Pose.from_matrix(m)
    return poses


def write_intrinsics(path, intrinsics: list[CameraIntrinsics]) -> None:
    lines = [" ".join([repr(float(k.fx)), repr(float(k.fy)), repr(float(k.cx)), repr(float(k.cy)),
                       str(k.width), str(k.height)]) for k in intrinsics]
    Path(path).write_text("\n".join(lines) + "\n")


def read_intrinsics(path) -> list[CameraIntrinsics]:
    out = []
    for ln in Path(path).read_text().splitlines():
        parts = ln.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise ValidationError(f"{path}: intrinsics lines need 6 fields")
        fx, fy, cx, cy = map(float, parts[:4])
        out.append(CameraIntrinsics(fx, fy, cx, cy, int(parts[4]), int(parts[5])))
    return out
