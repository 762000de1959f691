"""Deterministic box-world scenes with exact ray-cast depth and textured images.

A scene is an axis-aligned room shell (seen from inside) containing
axis-aligned boxes resting on the floor.  World +y points down, so gravity
is +y and the floor is the room's ``hi[1]`` face.  Cameras orbit the room
center looking inward.  Everything is a pure function of the seed and the
generator parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    Camera,
    CameraIntrinsics,
    DepthMap,
    Pose,
    camera_rays,
    pixel_grid,
    project_points,
    write_intrinsics,
    write_poses,
)

IMAGE_W, IMAGE_H = 320, 256
LIGHT = np.array([0.4, -0.8, 0.45]) / np.linalg.norm([0.4, -0.8, 0.45])
_EPS_T = 1e-9


@dataclass(frozen=True, eq=False)
class Box:
    lo: np.ndarray
    hi: np.ndarray
    textures: tuple = (0, 1, 2, 3, 4, 5)  # one texture id per face, face = 2 * axis + side

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))

    @property
    def area(self) -> float:
        e = self.hi - self.lo
        return float(2 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2]))


@dataclass(eq=False)
class SceneSpec:
    seed: int
    room: Box
    boxes: list
    trajectory: list
    intrinsics: CameraIntrinsics
    textured: bool = True
    params: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.trajectory)

    def camera(self, frame: int) -> Camera:
        return Camera(self.intrinsics, self.trajectory[frame])

    def cameras(self) -> list:
        return [self.camera(i) for i in range(self.n_frames)]


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(280.0, 280.0, (IMAGE_W - 1) / 2, (IMAGE_H - 1) / 2, IMAGE_W, IMAGE_H)


def look_at(position, target) -> Pose:
    """Camera-to-world pose at ``position`` looking at ``target`` with world +y down."""
    z = np.asarray(target, dtype=np.float64) - position
    z /= np.linalg.norm(z)
    x = np.cross([0.0, 1.0, 0.0], z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.column_stack([x, y, z])
    # re-orthonormalize so the pose passes the 1e-9 rotation checks
    u, _, vt = np.linalg.svd(r)
    return Pose(u @ vt, position)


def generate_scene(seed: int, n_boxes: int = 4, n_frames: int = 24, orbit_step_deg: float = 10.0,
                   textured: bool = True, jitter: float = 1.0) -> SceneSpec:
    """Random boxes in a room, seen from an inward-looking orbit.

    ``jitter`` scales the per-frame randomness of camera radius, height and
    look-at target; 0 gives a smooth arc.
    """
    rng = np.random.default_rng([int(seed), 0x5EED])
    half = np.array([rng.uniform(2.3, 2.6), 1.3, rng.uniform(2.3, 2.6)])
    room = Box(-half, half, tuple(int(t) for t in rng.integers(0, 1 << 30, 6)))
    floor = half[1]
    boxes = []
    for _ in range(n_boxes):
        r, a = 0.8 * np.sqrt(rng.uniform()), rng.uniform(0, 2 * np.pi)
        c = np.array([r * np.cos(a), 0.0, r * np.sin(a)])
        size = np.array([rng.uniform(0.3, 0.8), rng.uniform(0.3, 1.2), rng.uniform(0.3, 0.8)])
        lo = np.array([c[0] - size[0] / 2, floor - size[1], c[2] - size[2] / 2])
        hi = np.array([c[0] + size[0] / 2, floor, c[2] + size[2] / 2])
        boxes.append(Box(lo, hi, tuple(int(t) for t in rng.integers(0, 1 << 30, 6))))
    start = rng.uniform(0, 2 * np.pi)
    step = np.deg2rad(orbit_step_deg)
    trajectory = []
    for i in range(n_frames):
        a = start + i * step
        radius = 1.8 + jitter * rng.uniform(-0.05, 0.05)
        pos = np.array([radius * np.cos(a), -0.15 + jitter * rng.uniform(-0.15, 0.15), radius * np.sin(a)])
        target = np.array([0.0, 0.35, 0.0]) + jitter * rng.uniform([-0.3, -0.15, -0.3], [0.3, 0.15, 0.3])
        trajectory.append(look_at(pos, target))
    params = dict(n_boxes=n_boxes, n_frames=n_frames, orbit_step_deg=orbit_step_deg, textured=textured,
                  jitter=jitter)
    return SceneSpec(int(seed), room, boxes, trajectory, default_intrinsics(), textured, params)


# ---------------------------------------------------------------------------
# ray casting


def cast_rays(spec: SceneSpec, origins: np.ndarray, dirs: np.ndarray):
    """Nearest hit of each ray.

    Returns (t, surface, face): ray parameter, surface index (0 = room shell,
    1 + i = box i) and face index ``2 * axis + side``.
    """
    origins = np.broadcast_to(origins, dirs.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        # room shell: exit point of the slab intersection
        t_lo = (spec.room.lo - origins) * inv
        t_hi = (spec.room.hi - origins) * inv
        t_far = np.where(dirs > 0, t_hi, np.where(dirs < 0, t_lo, np.inf))
        axis = np.argmin(t_far, axis=-1)
        t = np.take_along_axis(t_far, axis[..., None], -1)[..., 0]
        side = (np.take_along_axis(dirs, axis[..., None], -1)[..., 0] > 0).astype(np.int64)
        surface = np.zeros(t.shape, dtype=np.int64)
        face = 2 * axis + side
        for i, box in enumerate(spec.boxes):
            a = (box.lo - origins) * inv
            b = (box.hi - origins) * inv
            near = np.where(np.isnan(a), -np.inf, np.minimum(a, b))
            far = np.where(np.isnan(a), np.inf, np.maximum(a, b))
            # axis-parallel rays outside the slab never hit
            outside = (dirs == 0) & ((origins < box.lo) | (origins > box.hi))
            near = np.where(outside, np.inf, near)
            tn = near.max(axis=-1)
            tf = far.min(axis=-1)
            hit = (tn <= tf) & (tn > _EPS_T) & (tn < t)
            if not np.any(hit):
                continue
            ax = np.argmax(near, axis=-1)
            sd = (np.take_along_axis(dirs, ax[..., None], -1)[..., 0] < 0).astype(np.int64)
            t = np.where(hit, tn, t)
            surface = np.where(hit, i + 1, surface)
            face = np.where(hit, 2 * ax + sd, face)
    return t, surface, face


def _frame_rays(spec: SceneSpec, frame: int, width: int, height: int):
    intr = spec.intrinsics.scaled(width, height) if (width, height) != (spec.intrinsics.width,
                                                                          spec.intrinsics.height) else spec.intrinsics
    pose = spec.trajectory[frame]
    cam_dirs = camera_rays(intr, pixel_grid(width, height))
    return pose, cam_dirs, cam_dirs @ pose.rotation.T


def render_depth(spec: SceneSpec, frame: int, width: int | None = None, height: int | None = None) -> DepthMap:
    """Exact camera-frame depth of the nearest surface for every pixel center."""
    width = width or spec.intrinsics.width
    height = height or spec.intrinsics.height
    pose, cam_dirs, dirs = _frame_rays(spec, frame, width, height)
    t, _, _ = cast_rays(spec, pose.center, dirs)
    depth = t * cam_dirs[..., 2]
    return DepthMap(depth, np.isfinite(depth) & (depth > 0))


def surface_normals(surface: np.ndarray, face: np.ndarray) -> np.ndarray:
    """Normals facing the visible side: outward for boxes, inward for the room."""
    axis, side = face // 2, face % 2
    sign = np.where(side == 1, 1.0, -1.0)
    sign = np.where(surface == 0, -sign, sign)
    n = np.zeros(surface.shape + (3,))
    np.put_along_axis(n, axis[..., None], sign[..., None], axis=-1)
    return n


def _hash01(*keys) -> np.ndarray:
    """Vectorized integer hash to [0, 1)."""
    h = np.zeros(np.broadcast(*keys).shape, dtype=np.uint64)
    for i, k in enumerate(keys):
        h ^= (np.asarray(k).astype(np.int64).astype(np.uint64) + np.uint64(0x9E3779B97F4A7C15 * (i + 1) % (1 << 64)))
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _value_noise(u, v, cell, key):
    gu, gv = u / cell, v / cell
    i0, j0 = np.floor(gu), np.floor(gv)
    fu, fv = gu - i0, gv - j0
    fu = fu * fu * (3 - 2 * fu)
    fv = fv * fv * (3 - 2 * fv)
    i0, j0 = i0.astype(np.int64), j0.astype(np.int64)
    n00, n10 = _hash01(key, i0, j0), _hash01(key, i0 + 1, j0)
    n01, n11 = _hash01(key, i0, j0 + 1), _hash01(key, i0 + 1, j0 + 1)
    return (n00 * (1 - fu) + n10 * fu) * (1 - fv) + (n01 * (1 - fu) + n11 * fu) * fv


def texture_albedo(texture_id: np.ndarray, seed: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """RGB albedo of a procedural texture at face coordinates (u, v) in meters."""
    key = np.asarray(texture_id, dtype=np.int64) ^ (int(seed) * 7919)
    coarse = _value_noise(u, v, 0.21, key)
    fine = _value_noise(u, v, 0.09, key + 1)
    checker = ((np.floor(u / 0.35) + np.floor(v / 0.35)) % 2)
    gray = 0.1 + 0.8 * (0.5 * coarse + 0.35 * fine + 0.15 * checker)
    tint = 0.6 + 0.4 * np.stack([_hash01(key, 11), _hash01(key, 12), _hash01(key, 13)], axis=-1)
    return gray[..., None] * tint


def _face_coords(points, face):
    axis = face // 2
    uax = np.where(axis == 0, 1, 0)
    vax = np.where(axis == 2, 1, 2)
    u = np.take_along_axis(points, uax[..., None], -1)[..., 0]
    v = np.take_along_axis(points, vax[..., None], -1)[..., 0]
    return u, v


def surface_albedo(spec: SceneSpec, points, surface, face) -> np.ndarray:
    tex_table = np.array([spec.room.textures] + [b.textures for b in spec.boxes], dtype=np.int64)
    tid = tex_table[surface, face]
    u, v = _face_coords(points, face)
    return texture_albedo(tid, spec.seed, u, v)


def render_image(spec: SceneSpec, frame: int) -> np.ndarray:
    """Textured, Lambertian-shaded (H, W, 3) image in [0, 1]."""
    w, h = spec.intrinsics.width, spec.intrinsics.height
    if not spec.textured:
        return np.full((h, w, 3), 0.5)
    pose, _, dirs = _frame_rays(spec, frame, w, h)
    t, surface, face = cast_rays(spec, pose.center, dirs)
    pts = pose.center + t[..., None] * dirs
    albedo = surface_albedo(spec, pts, surface, face)
    shade = 0.45 + 0.55 * np.maximum(0.0, surface_normals(surface, face) @ LIGHT)
    return np.clip(albedo * shade[..., None], 0.0, 1.0)


# ---------------------------------------------------------------------------
# ground-truth surface samples


def _faces(spec: SceneSpec):
    """(surface, face, lo, hi) rectangles of every face in the scene."""
    out = []
    for s, box in enumerate([spec.room] + list(spec.boxes)):
        for f in range(6):
            axis, side = divmod(f, 2)
            lo, hi = box.lo.copy(), box.hi.copy()
            if side:
                lo[axis] = hi[axis]
            else:
                hi[axis] = lo[axis]
            out.append((s, f, lo, hi))
    return out


def visible_mask(spec: SceneSpec, points: np.ndarray, frames=None, tol: float = 1e-6) -> np.ndarray:
    """True where a point is seen unoccluded inside at least one frame's image."""
    frames = range(spec.n_frames) if frames is None else frames
    seen = np.zeros(len(points), dtype=bool)
    intr = spec.intrinsics
    for f in frames:
        pose = spec.trajectory[f]
        pix, z = project_points(intr, pose, points)
        inside = (z > 1e-9) & (pix[:, 0] >= -0.5) & (pix[:, 0] < intr.width - 0.5) \
            & (pix[:, 1] >= -0.5) & (pix[:, 1] < intr.height - 0.5) & ~seen
        if not np.any(inside):
            continue
        d = points[inside] - pose.center
        dist = np.linalg.norm(d, axis=1)
        t, _, _ = cast_rays(spec, pose.center, d / dist[:, None])
        idx = np.nonzero(inside)[0]
        seen[idx] = t >= dist - tol * (1 + dist)
    return seen


def sample_gt_surface(spec: SceneSpec, density: float, seed: int | None = None) -> np.ndarray:
    """Uniform-area samples (``density`` per m^2) of surfaces observed by some frame."""
    rng = np.random.default_rng([spec.seed if seed is None else int(seed), 0x6A7])
    chunks = []
    for s, f, lo, hi in _faces(spec):
        ext = hi - lo
        area = float(np.prod(ext[ext > 0]))
        n = rng.poisson(area * density)
        if n == 0:
            continue
        pts = lo + rng.uniform(size=(n, 3)) * ext
        chunks.append(pts)
    pts = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    return pts[visible_mask(spec, pts)]


def surface_distance(spec: SceneSpec, points: np.ndarray) -> np.ndarray:
    """Euclidean distance from each point to the nearest face rectangle."""
    best = np.full(len(points), np.inf)
    for _, _, lo, hi in _faces(spec):
        d = np.linalg.norm(points - np.clip(points, lo, hi), axis=1)
        best = np.minimum(best, d)
    return best


# ---------------------------------------------------------------------------
# scene directories


def write_scene(spec: SceneSpec, directory) -> Path:
    """Dump intrinsics, poses, PFM depths and PPM images in the scene-directory layout."""
    from .io import write_pfm, write_ppm

    directory = Path(directory)
    (directory / "depth").mkdir(parents=True, exist_ok=True)
    (directory / "rgb").mkdir(parents=True, exist_ok=True)
    write_intrinsics(directory / "intrinsics.txt", [spec.intrinsics] * spec.n_frames)
    write_poses(directory / "poses.txt", {i: p for i, p in enumerate(spec.trajectory)})
    for i in range(spec.n_frames):
        dm = render_depth(spec, i)
        write_pfm(directory / "depth" / f"{i:04d}.pfm", np.where(dm.valid, dm.depth, 0.0))
        write_ppm(directory / "rgb" / f"{i:04d}.ppm", render_image(spec, i))
    (directory / "scene.json").write_text(json.dumps({"seed": spec.seed, **spec.params}, indent=1))
    return directory


def regenerate(directory) -> SceneSpec | None:
    """Rebuild the analytic spec of a dumped synthetic scene, if it recorded one."""
    meta = Path(directory) / "scene.json"
    if not meta.exists():
        return None
    params = json.loads(meta.read_text())
    seed = params.pop("seed")
    return generate_scene(seed, **params)
