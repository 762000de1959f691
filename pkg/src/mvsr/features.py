"""Per-image feature maps and the multi-view variance feature.

Feature maps are (H, W, C) arrays.  For the 320x256 input the coarse map is
80x64 and the fine map 160x128, both with 32 channels.  The variance
feature of a world point is the per-channel population variance of the
coarse features sampled (bilinearly) where the point projects into each
view of its view set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy.ndimage import gaussian_filter

from .diffkern import ParameterStore, conv2d
from .diffkern import tensor as T
from .errors import BadImageSize, NoValidView

IMAGE_SIZE = (320, 256)
COARSE_SIZE = (80, 64)
FINE_SIZE = (160, 128)
CHANNELS = 32
EXTRACTORS = ("handcrafted32", "learned")


@dataclass(frozen=True)
class ViewIndexSet:
    """Reference frame id and its source frame ids."""

    reference: int
    sources: tuple

    @property
    def all(self) -> tuple:
        """The full set S_n: reference followed by the sources."""
        return (self.reference,) + tuple(self.sources)


def select_source_views(keyframes, n: int, m: int = 4) -> ViewIndexSet:
    """Up to m//2 previous and m//2 next keyframes around position ``n``.

    Near either end of the sequence the missing slots are filled from the
    other side, so the source count is ``min(m, len(keyframes) - 1)``.
    """
    keyframes = list(keyframes)
    if not keyframes:
        raise ValueError("keyframe list is empty")
    count = min(m, len(keyframes) - 1)
    before = list(range(n - 1, -1, -1))
    after = list(range(n + 1, len(keyframes)))
    take_before = min(len(before), max(m // 2, count - len(after)))
    take_after = count - take_before
    picked = sorted(before[:take_before] + after[:take_after])
    return ViewIndexSet(keyframes[n], tuple(keyframes[i] for i in picked))


@dataclass(frozen=True, eq=False)
class FeatureMapPair:
    coarse: np.ndarray
    fine: np.ndarray


# ---------------------------------------------------------------------------
# handcrafted extractor

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64) / 8.0
_LINE_0 = np.array([[-1, -1, -1], [2, 2, 2], [-1, -1, -1]], dtype=np.float64) / 6.0
_LINE_45 = np.array([[-1, -1, 2], [-1, 2, -1], [2, -1, -1]], dtype=np.float64) / 6.0
_KERNELS = [_SOBEL_X, _SOBEL_X.T, _LINE_0, _LINE_45, _LINE_0.T, _LINE_45[:, ::-1]]
# fixed gains bring luma and the filter responses to roughly unit spread on
# textured indoor images (raw spreads are about 0.09 and 0.01-0.03)
_GAINS = np.tile([10.0] + [50.0] * 7, 2)


def _filter3(img: np.ndarray, k: np.ndarray, dilation: int = 1) -> np.ndarray:
    """3x3 cross-correlation (taps ``dilation`` apart) with replicate borders.

    Taps are applied to differences from the center pixel, so zero-sum
    kernels give exactly zero on flat regions.
    """
    r = dilation
    p = np.pad(img, r, mode="edge")
    h, w = img.shape
    out = img * k.sum()
    for dy in range(3):
        for dx in range(3):
            if k[dy, dx] and (dy, dx) != (1, 1):
                out += k[dy, dx] * (p[dy * r:dy * r + h, dx * r:dx * r + w] - img)
    return out


def _block_mean(img: np.ndarray, f: int) -> np.ndarray:
    h, w = img.shape
    return img.reshape(h // f, f, w // f, f).mean(axis=(1, 3))


def luma(image: np.ndarray) -> np.ndarray:
    return image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114


def base_channels(gray: np.ndarray, dilation: int = 1) -> np.ndarray:
    """[luma, Sobel-x, Sobel-y, gradient magnitude, 4 oriented responses] as (H, W, 8)."""
    gx = _filter3(gray, _KERNELS[0], dilation)
    gy = _filter3(gray, _KERNELS[1], dilation)
    chans = [gray, gx, gy, np.sqrt(gx * gx + gy * gy)] + [_filter3(gray, k, dilation) for k in _KERNELS[2:]]
    return np.stack(chans, axis=-1)


def handcrafted_base(image: np.ndarray, factor: int) -> np.ndarray:
    """16 channels at 1/factor resolution: 8 at that level, 8 one octave coarser.

    Luma is low-pass filtered before decimation so features change smoothly
    under sub-pixel shifts.  The coarser octave is evaluated on the same
    output grid (extra blur, dilated taps) rather than on a decimated image,
    which keeps it equivariant to shifts of whole output pixels.
    """
    gray = _block_mean(gaussian_filter(luma(image), factor / 4, mode="nearest", truncate=2.0), factor)
    here = base_channels(gray)
    below = base_channels(gaussian_filter(gray, 0.7, mode="nearest", truncate=2.0), dilation=2)
    return np.concatenate([here, below], axis=-1) * _GAINS


def mixing_matrix(seed: int, rows: int = CHANNELS, cols: int = 16) -> np.ndarray:
    """Fixed (rows, cols) matrix with orthonormal columns."""
    rng = np.random.default_rng([int(seed), 0xFEA7])
    q, r = np.linalg.qr(rng.normal(size=(rows, cols)))
    return q * np.sign(np.diag(r))


def _handcrafted(image: np.ndarray, seed: int) -> FeatureMapPair:
    mix = mixing_matrix(seed)
    return FeatureMapPair(handcrafted_base(image, 4) @ mix.T, handcrafted_base(image, 2) @ mix.T)


# ---------------------------------------------------------------------------
# learned extractor (randomly initialized, frozen)


def _learned(image: np.ndarray, seed: int) -> FeatureMapPair:
    store = ParameterStore(seed)
    x = T.Tensor(image[None])
    x = T.relu(conv2d(store, "extractor/c0", x, 16, stride=2))
    fine = conv2d(store, "extractor/c1", x, 32)
    x = T.relu(conv2d(store, "extractor/c2", T.relu(fine), 32, stride=2))
    coarse = conv2d(store, "extractor/c3", x, 32)
    return FeatureMapPair(coarse.data[0], fine.data[0])


def extract_features(image: np.ndarray, extractor: str = "handcrafted32", seed: int = 0) -> FeatureMapPair:
    """Coarse (64, 80, 32) and fine (128, 160, 32) maps of a 320x256 RGB image."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (IMAGE_SIZE[1], IMAGE_SIZE[0], 3):
        raise BadImageSize(f"expected a 256x320x3 image, got {image.shape}")
    if extractor == "handcrafted32":
        return _handcrafted(image, seed)
    if extractor == "learned":
        return _learned(image, seed)
    raise ValueError(f"unknown extractor {extractor!r}; choose from {EXTRACTORS}")


# ---------------------------------------------------------------------------
# multi-view variance


@numba.njit(cache=True)
def _view_stats(points, rot, center, kparams, sizes, maps, mode):
    """Per-point mean (mode 1) or population variance (mode 0) over seeing views.

    ``rot`` holds camera-to-world rotations, ``kparams`` (fx, fy, cx, cy) at
    map resolution and ``sizes`` the (h, w) of each map inside the padded
    stack.  Views are accumulated in the given order.
    """
    n_pts = points.shape[0]
    n_views = maps.shape[0]
    c = maps.shape[3]
    out = np.zeros((n_pts, c))
    count = np.zeros(n_pts, dtype=np.int64)
    samples = np.empty((n_views, c))
    for i in range(n_pts):
        n = 0
        for v in range(n_views):
            dx = points[i, 0] - center[v, 0]
            dy = points[i, 1] - center[v, 1]
            dz = points[i, 2] - center[v, 2]
            x = rot[v, 0, 0] * dx + rot[v, 1, 0] * dy + rot[v, 2, 0] * dz
            y = rot[v, 0, 1] * dx + rot[v, 1, 1] * dy + rot[v, 2, 1] * dz
            z = rot[v, 0, 2] * dx + rot[v, 1, 2] * dy + rot[v, 2, 2] * dz
            if not z > 1e-9:
                continue
            h = sizes[v, 0]
            w = sizes[v, 1]
            u = kparams[v, 0] * x / z + kparams[v, 2]
            q = kparams[v, 1] * y / z + kparams[v, 3]
            if not (u >= -0.5 and u <= w - 0.5 and q >= -0.5 and q <= h - 0.5):
                continue
            u = min(max(u, 0.0), w - 1.0)
            q = min(max(q, 0.0), h - 1.0)
            x0 = int(np.floor(u))
            y0 = int(np.floor(q))
            x1 = min(x0 + 1, w - 1)
            y1 = min(y0 + 1, h - 1)
            ax = u - x0
            ay = q - y0
            for ch in range(c):
                top = maps[v, y0, x0, ch] * (1 - ax) + maps[v, y0, x1, ch] * ax
                bot = maps[v, y1, x0, ch] * (1 - ax) + maps[v, y1, x1, ch] * ax
                samples[n, ch] = top * (1 - ay) + bot * ay
            n += 1
        count[i] = n
        if n == 0:
            continue
        for ch in range(c):
            if mode == 1:
                s = 0.0
                for k in range(n):
                    s += samples[k, ch]
                out[i, ch] = s / n
                continue
            # two-pass variance on values shifted by the first sample, so
            # identical samples give exactly zero
            base = samples[0, ch]
            s = 0.0
            for k in range(n):
                s += samples[k, ch] - base
            mu = s / n
            s2 = 0.0
            for k in range(n):
                d = samples[k, ch] - base - mu
                s2 += d * d
            out[i, ch] = s2 / n
    return out, count


def _pack_views(view_ids, maps: dict, cameras: dict):
    ids = sorted(set(view_ids))
    arrs = [np.asarray(maps[i], dtype=np.float64) for i in ids]
    sizes = np.array([a.shape[:2] for a in arrs], dtype=np.int64)
    if (sizes == sizes[0]).all():
        stack = np.stack(arrs)
    else:
        stack = np.zeros((len(arrs),) + tuple(sizes.max(axis=0)) + arrs[0].shape[2:])
        for k, a in enumerate(arrs):
            stack[k, :a.shape[0], :a.shape[1]] = a
    cams = []
    for i, (h, w) in zip(ids, sizes):
        cam = cameras[i]
        cams.append(cam if (cam.intrinsics.width, cam.intrinsics.height) == (w, h) else cam.scaled(int(w), int(h)))
    rot = np.stack([c.pose.rotation for c in cams])
    center = np.stack([c.pose.translation for c in cams])
    kp = np.array([[c.intrinsics.fx, c.intrinsics.fy, c.intrinsics.cx, c.intrinsics.cy] for c in cams])
    return rot, center, kp, sizes, stack


def view_statistics(points: np.ndarray, view_ids, maps: dict, cameras: dict, reduce: str = "variance"):
    """Vectorized per-point feature statistic over the views that see each point.

    ``maps`` and ``cameras`` are keyed by frame id; cameras may be given at
    any resolution and are rescaled to the map size.  Views are processed in
    sorted id order, so the result does not depend on the order of
    ``view_ids``.  Returns ((..., C) statistic, (...) count of seeing views);
    points seen by no view get a zero row.
    """
    points = np.asarray(points, dtype=np.float64)
    lead = points.shape[:-1]
    rot, center, kp, sizes, stack = _pack_views(view_ids, maps, cameras)
    mode = {"variance": 0, "mean": 1}[reduce]
    out, count = _view_stats(np.ascontiguousarray(points.reshape(-1, 3)), rot, center, kp, sizes, stack, mode)
    return out.reshape(lead + (stack.shape[-1],)), count.reshape(lead)


def variance_feature(p, views, maps: dict, cameras: dict) -> np.ndarray:
    """Variance of coarse features at world point ``p`` over ``views``.

    ``views`` is a :class:`ViewIndexSet` or an iterable of frame ids.
    """
    ids = views.all if isinstance(views, ViewIndexSet) else tuple(views)
    out, count = view_statistics(np.asarray(p, dtype=np.float64)[None], ids, maps, cameras)
    if count[0] == 0:
        raise NoValidView("no view of the set sees the point")
    return out[0]


def variance_features(points, views, maps: dict, cameras: dict, reduce: str = "variance") -> np.ndarray:
    ids = views.all if isinstance(views, ViewIndexSet) else tuple(views)
    return view_statistics(points, ids, maps, cameras, reduce)[0]


def coarse_maps(features: dict) -> dict:
    return {k: v.coarse for k, v in features.items()}


__all__ = [
    "COARSE_SIZE", "FINE_SIZE", "FeatureMapPair", "ViewIndexSet", "base_channels", "coarse_maps",
    "extract_features", "handcrafted_base", "mixing_matrix", "select_source_views", "variance_feature",
    "variance_features", "view_statistics",
]
