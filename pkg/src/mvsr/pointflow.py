"""Hypothesis points along depth rays, their features, and the nested refinement loop.

Every valid pixel of a coarse depth map is lifted to a world point p.  Around
it we place 2h+1 hypotheses p + k s t, read a feature row for each from the
scene encoding and the source views, and let a small 1-D conv head score
them.  The expected displacement under the softmax of those scores moves the
depth along t.  An outer loop re-encodes the scene from the current depths;
the inner loop applies one displacement per step size against that fixed
encoding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffkern import ParameterStore, conv1d, group_norm
from .diffkern import tensor as T
from .errors import BadDirection, NonPositiveDepth, ShapeMismatch, check_finite
from .features import ViewIndexSet, view_statistics
from .geometry import Camera, DepthMap, back_project_pixels, camera_rays, pixel_grid
from .scenemodel import encode_scene, form_point_cloud, sparse_interp, voxelize

MODES = ("full", "no3d", "single_scale", "avg_feats")
DIRECTIONS = ("ray", "principal")
HEAD_WIDTHS = (64, 32, 16)


@dataclass(frozen=True, eq=False)
class HypothesisSet:
    anchor: np.ndarray
    direction: np.ndarray
    step: float
    half_count: int
    points: np.ndarray  # (2h+1, 3), row k+h is p + k s t


def _offsets(step: float, h: int) -> np.ndarray:
    return np.arange(-h, h + 1) * step


def build_hypotheses(p, t, s: float, h: int) -> HypothesisSet:
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if t.shape != (3,) or abs(np.linalg.norm(t) - 1.0) > 1e-9:
        raise BadDirection("hypothesis direction must be a unit 3-vector")
    if not s > 0 or h < 0:
        raise ValueError("step must be positive and h non-negative")
    pts = p + _offsets(s, h)[:, None] * t
    for a in (p, t, pts):
        a.flags.writeable = False
    return HypothesisSet(p, t, float(s), int(h), pts)


def hypothesis_points(anchors: np.ndarray, dirs: np.ndarray, s: float, h: int) -> np.ndarray:
    """Vectorized hypotheses: (P, 3) anchors and unit directions to (P, 2h+1, 3)."""
    return anchors[:, None, :] + _offsets(s, h)[None, :, None] * dirs[:, None, :]


# ---------------------------------------------------------------------------
# features


@dataclass(frozen=True, eq=False)
class SceneEncoding:
    """The volumes (V1 @ 4r, V2 @ 2r, V3 @ r) one outer loop refines against."""

    volumes: tuple
    fingerprint: str = field(default="")

    @staticmethod
    def of(volumes) -> "SceneEncoding":
        volumes = tuple(volumes)
        fp = "|".join(v.fingerprint() for v in volumes)
        return SceneEncoding(volumes, fp)

    def check(self) -> None:
        """Raise if the volumes were altered after the encoding was sealed."""
        if "|".join(v.fingerprint() for v in self.volumes) != self.fingerprint:
            raise RuntimeError("scene encoding changed within an outer loop")


def feature_channels(mode: str = "full", variance_channels: int = 32, widths=(32, 48, 64)) -> int:
    c0, c1, c2 = widths
    return variance_channels + {"full": c0 + c1 + c2, "avg_feats": c0 + c1 + c2, "single_scale": c0,
                                "no3d": 0}[mode]


def _volume_blocks(volumes, mode):
    if mode == "no3d" or volumes is None:
        return ()
    if isinstance(volumes, SceneEncoding):
        volumes = volumes.volumes
    return (volumes[2],) if mode == "single_scale" else tuple(volumes)


def hypothesis_feature_tensor(points: np.ndarray, volumes, views, maps: dict, cameras: dict,
                              mode: str = "full", dtype=np.float64) -> T.Tensor:
    """Rows [f1 | f2 | f3 | variance] for (..., 3) hypothesis points.

    Volume reads are differentiable; absent cells read as zero.  With
    ``mode="single_scale"`` only the finest volume is read and with
    ``"no3d"`` only the variance block remains.
    """
    points = np.asarray(points, dtype=np.float64)
    lead = points.shape[:-1]
    flat = points.reshape(-1, 3)
    ids = views.all if isinstance(views, ViewIndexSet) else tuple(views)
    var, _ = view_statistics(flat, ids, maps, cameras)
    blocks = [sparse_interp(v, flat) for v in _volume_blocks(volumes, mode)]
    blocks.append(T.Tensor(var.astype(dtype)))
    out = blocks[0] if len(blocks) == 1 else T.concat(blocks, axis=1)
    return T.reshape(out, lead + (out.shape[-1],))


def hypothesis_features(hs: HypothesisSet, volumes, views, maps: dict, cameras: dict, mode: str = "full") -> np.ndarray:
    """The (2h+1, c) feature matrix H of one hypothesis set."""
    return hypothesis_feature_tensor(hs.points, volumes, views, maps, cameras, mode).data


# ---------------------------------------------------------------------------
# offset head


def offset_scores(store: ParameterStore, H, path: str = "offset") -> T.Tensor:
    """(B, 2h+1, c) hypothesis features to (B, 2h+1) scores; conv1d c -> 64 -> 32 -> 16 -> 1."""
    x = T.as_tensor(H)
    for i, w in enumerate(HEAD_WIDTHS):
        x = group_norm(store, f"{path}/n{i}", conv1d(store, f"{path}/c{i}", x, w), relu=True)
    x = conv1d(store, f"{path}/c{len(HEAD_WIDTHS)}", x, 1)
    return T.reshape(x, x.shape[:2])


def expected_offset(prob, s: float) -> T.Tensor:
    """sum_k k s prob_k over the last axis (length 2h+1), paired as k (p_k - p_-k).

    Pairing the mirrored terms makes a symmetric distribution give exactly 0.
    """
    prob = T.as_tensor(prob)
    n = prob.shape[-1]
    h = n // 2
    if n % 2 == 0:
        raise ShapeMismatch("hypothesis axis must have odd length")
    if h == 0:
        return T.mul(T.tsum(prob, axis=-1), 0.0)
    hi = T.getitem(prob, (..., slice(h + 1, None)))
    lo = T.getitem(prob, (..., slice(h - 1, None, -1)))
    k = np.arange(1, h + 1, dtype=prob.dtype)
    return T.mul(T.tsum(T.mul(T.sub(hi, lo), k), axis=-1), s)


def predict_offset(H, store: ParameterStore | None, s: float, h: int, path: str = "offset", forced_prob=None):
    """Displacement along t for each hypothesis set.

    ``H`` is (2h+1, c) or batched (B, 2h+1, c).  Returns (offset tensor of
    shape () or (B,), probability tensor).
    """
    H = T.as_tensor(H)
    single = H.ndim == 2
    if single:
        H = T.reshape(H, (1,) + H.shape)
    if H.shape[1] != 2 * h + 1:
        raise ShapeMismatch(f"expected {2 * h + 1} hypotheses, got {H.shape[1]}")
    if forced_prob is not None:
        prob = T.as_tensor(np.asarray(forced_prob, dtype=H.dtype).reshape(H.shape[:2]))
    else:
        first = f"{path}/c0/w"
        if store is not None and first in store and store[first].shape[1] != H.shape[2]:
            raise ShapeMismatch(f"offset head expects {store[first].shape[1]} channels, got {H.shape[2]}")
        prob = T.softmax(offset_scores(store, H, path), axis=-1)
    delta = expected_offset(prob, s)
    if single:
        return T.reshape(delta, ()), T.reshape(prob, prob.shape[1:])
    return delta, prob


def zero_offset_head(store: ParameterStore, channels: int, path: str = "offset") -> None:
    """Zero the final layer so every hypothesis gets the same score (uniform probabilities)."""
    offset_scores(store, T.Tensor(np.zeros((1, 3, channels), dtype=store.dtype)), path)
    last = f"{path}/c{len(HEAD_WIDTHS)}"
    store.set(f"{last}/w", np.zeros(store[f"{last}/w"].shape))
    store.set(f"{last}/b", np.zeros(store[f"{last}/b"].shape))


# ---------------------------------------------------------------------------
# depth update


def ray_directions(camera: Camera, pixels: np.ndarray, direction: str = "ray"):
    """World unit directions for (P, 2) pixels and their camera-frame z components."""
    if direction == "ray":
        cam_dirs = camera_rays(camera.intrinsics, pixels)
    elif direction == "principal":
        cam_dirs = np.broadcast_to(np.array([0.0, 0.0, 1.0]), pixels.shape[:-1] + (3,))
    else:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    return cam_dirs @ camera.pose.rotation.T, cam_dirs[..., 2].copy()


def apply_offset(depthmap: DepthMap, pixel, delta: float, camera: Camera, direction: str = "ray") -> float:
    """Camera-frame depth of p + delta t for one integer pixel (u, v).

    The new value is written into ``depthmap``; a non-positive result marks
    the pixel invalid and raises NonPositiveDepth.
    """
    u, v = int(pixel[0]), int(pixel[1])
    if not depthmap.valid[v, u]:
        raise ValueError("pixel has no valid depth to update")
    _, tz = ray_directions(camera, np.array([[u, v]], dtype=np.float64), direction)
    new = depthmap.depth[v, u] + delta * tz[0]
    if not new > 0:
        depthmap.valid[v, u] = False
        raise NonPositiveDepth(f"update drives pixel ({u}, {v}) to depth {new}")
    depthmap.depth[v, u] = new
    return float(new)


@dataclass(eq=False)
class PassResult:
    depth: DepthMap  # updated map
    rows: np.ndarray  # flat indices of the pixels that were refined
    start: np.ndarray  # their depths before the pass
    tz: np.ndarray  # camera-frame z of each direction
    delta: T.Tensor  # (P,) displacement along t
    prob: T.Tensor  # (P, 2h+1)

    def depth_tensor(self) -> T.Tensor:
        """Refined depths of ``rows`` as start + delta tz (carries the head's gradient)."""
        return T.add(T.mul(self.delta, self.tz.astype(self.delta.dtype)), self.start.astype(self.delta.dtype))


def pointflow_pass(depth: DepthMap, camera: Camera, views: ViewIndexSet, encoding, maps: dict, cameras: dict,
                   store: ParameterStore | None, step: float, h: int, mode: str = "full", direction: str = "ray",
                   path: str = "offset", forced_prob=None) -> PassResult:
    """One displacement of every valid pixel of ``depth`` (camera at the map's resolution)."""
    if isinstance(encoding, SceneEncoding):
        encoding.check()
    rows = np.flatnonzero(depth.valid)
    pix = pixel_grid(depth.width, depth.height).reshape(-1, 2)[rows]
    start = depth.depth.reshape(-1)[rows]
    anchors = back_project_pixels(camera.intrinsics, camera.pose, pix, start)
    dirs, tz = ray_directions(camera, pix, direction)
    pts = hypothesis_points(anchors, dirs, step, h)
    dtype = store.dtype if store is not None else np.float64
    H = hypothesis_feature_tensor(pts, encoding, views, maps, cameras, mode, dtype)
    if forced_prob is not None:
        forced_prob = np.broadcast_to(forced_prob, (len(rows), 2 * h + 1))
    delta, prob = predict_offset(H, store, step, h, path, forced_prob)
    check_finite("PointFlow offset", delta.data)
    new = start + delta.data.astype(np.float64) * tz
    out = depth.copy()
    out.depth.reshape(-1)[rows] = new
    bad = ~(new > 0)
    if bad.any():
        out.valid.reshape(-1)[rows[bad]] = False
    return PassResult(out, rows, start, tz, delta, prob)


# ---------------------------------------------------------------------------
# nested refinement


@dataclass(frozen=True)
class RefinementSchedule:
    outer_loops: int = 2
    steps: tuple = (0.05, 0.05, 0.025)
    h: int = 3

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(float(s) for s in self.steps))
        if self.outer_loops < 0 or self.h < 0 or not all(s > 0 for s in self.steps):
            raise ValueError("schedule needs outer_loops >= 0, h >= 0 and positive steps")

    def stages(self):
        """(outer, inner, step) for every refinement, 1-based as in D^(lo, li)."""
        return [(lo, li + 1, s) for lo in range(1, self.outer_loops + 1) for li, s in enumerate(self.steps)]


def encode_depths(depths: dict, cameras: dict, viewsets: dict, maps: dict, store: ParameterStore,
                  mode: str = "full") -> SceneEncoding | None:
    """Point cloud, V0 and the U-Net volumes for the current depths (None in ``no3d`` mode)."""
    if mode == "no3d":
        return None
    reduce = "mean" if mode == "avg_feats" else "variance"
    cloud = form_point_cloud(depths, cameras, viewsets, maps, reduce)
    v0 = voxelize(cloud, store)
    return SceneEncoding.of(encode_scene(v0, store))


@dataclass(eq=False)
class RefinementResult:
    depths: dict
    snapshots: dict  # (lo, li) -> {frame: DepthMap}
    audit: list  # (lo, li, id(encoding), fingerprint) per inner pass
    offsets: dict  # (lo, li) -> {frame: |delta| max}


def refine_all(depths: dict, cameras: dict, viewsets: dict, maps: dict, schedule: RefinementSchedule | None = None,
               store: ParameterStore | None = None, mode: str = "full", direction: str = "ray",
               uniform: bool = False) -> RefinementResult:
    """Nested refinement of every depth map.

    ``cameras`` may be at any resolution; each map is refined with its
    camera rescaled to the map size.  ``uniform=True`` forces uniform
    hypothesis probabilities instead of running the offset head.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    schedule = schedule or RefinementSchedule()
    store = store if store is not None else ParameterStore()
    current = {k: depths[k].copy() for k in sorted(depths)}
    snapshots = {(0, 0): {k: d.copy() for k, d in current.items()}}
    audit, offsets = [], {}
    forced = np.full(2 * schedule.h + 1, 1.0 / (2 * schedule.h + 1)) if uniform else None
    for lo in range(1, schedule.outer_loops + 1):
        encoding = None if mode == "no3d" else encode_depths(current, cameras, viewsets, maps, store, mode)
        for li, step in enumerate(schedule.steps, start=1):
            worst = {}
            for fid in sorted(current):
                d = current[fid]
                cam = cameras[fid].scaled(d.width, d.height)
                res = pointflow_pass(d, cam, viewsets[fid], encoding, maps, cameras, store, step, schedule.h,
                                     mode, direction, forced_prob=forced)
                current[fid] = res.depth
                worst[fid] = float(np.abs(res.delta.data).max(initial=0.0))
            audit.append((lo, li, id(encoding), None if encoding is None else encoding.fingerprint))
            snapshots[(lo, li)] = {k: d.copy() for k, d in current.items()}
            offsets[(lo, li)] = worst
        if encoding is not None:
            encoding.check()
    return RefinementResult(current, snapshots, audit, offsets)


__all__ = [
    "DIRECTIONS", "HEAD_WIDTHS", "HypothesisSet", "MODES", "PassResult", "RefinementResult", "RefinementSchedule",
    "SceneEncoding", "apply_offset", "build_hypotheses", "encode_depths", "expected_offset", "feature_channels",
    "hypothesis_feature_tensor", "hypothesis_features", "hypothesis_points", "offset_scores", "pointflow_pass",
    "predict_offset", "ray_directions", "refine_all", "zero_offset_head",
]
