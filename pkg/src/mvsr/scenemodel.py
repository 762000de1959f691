"""Feature-augmented point clouds, sparse voxel volumes and the sparse 3D U-Net.

Voxel cells are half-open cubes: a point p belongs to cell
``floor((p - origin) / r)``, so every point lands in exactly one cell.  The
grid origin is the cloud's bounding-box minimum snapped down to a multiple
of r.  Coarser levels reuse the same origin with edge 2r and 4r, and the
parent of cell i is ``i // 2``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .diffkern import ParameterStore, group_norm, mlp
from .diffkern import tensor as T
from .diffkern._kernels import trilinear_entries
from .errors import EmptyCloud
from .features import view_statistics
from .geometry import DepthMap, depth_to_points

VOXEL_SIZE = 0.08
UNET_WIDTHS = (32, 48, 64)
POINTNET_WIDTHS = (32, 32)
_OFF = 1 << 20
_M = 1 << 21
_NEIGHBORS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64)
_CHILDREN = np.array([(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)


def encode_keys(idx: np.ndarray) -> np.ndarray:
    """Integer cell indices (..., 3) to sortable int64 codes."""
    idx = np.asarray(idx, dtype=np.int64) + _OFF
    return (idx[..., 0] * _M + idx[..., 1]) * _M + idx[..., 2]


@dataclass(eq=False)
class FeaturePointCloud:
    positions: np.ndarray  # (P, 3)
    features: np.ndarray  # (P, C)
    frames: np.ndarray  # (P,)
    pixels: np.ndarray  # (P, 2)

    def __len__(self):
        return len(self.positions)


def form_point_cloud(depths: dict, cameras: dict, viewsets: dict, maps: dict, reduce: str = "variance"):
    """Back-project every valid depth pixel of every map and attach its view feature.

    ``depths``, ``cameras``, ``viewsets`` are keyed by frame id; cameras may
    be at any resolution and are rescaled to each depth map's size.
    """
    pos, feat, frames, pixels = [], [], [], []
    for fid in sorted(depths):
        dm: DepthMap = depths[fid]
        cam = cameras[fid].scaled(dm.width, dm.height)
        pts, pix = depth_to_points(cam, dm)
        if len(pts) == 0:
            continue
        f, _ = view_statistics(pts, viewsets[fid].all, maps, cameras, reduce)
        pos.append(pts)
        feat.append(f)
        frames.append(np.full(len(pts), fid, dtype=np.int64))
        pixels.append(pix)
    if not pos:
        raise EmptyCloud("no valid depth pixels in any map")
    return FeaturePointCloud(np.concatenate(pos), np.concatenate(feat), np.concatenate(frames),
                             np.concatenate(pixels))


class SparseFeatureVolume:
    """Hash-indexed cells of C-channel features at one resolution.

    Cells are stored in ascending key order.  ``features`` is a tensor (it
    may carry a gradient graph); arrays are read-only after construction.
    """

    def __init__(self, resolution: float, origin, keys: np.ndarray, features):
        self.resolution = float(resolution)
        self.origin = np.array(origin, dtype=np.float64)
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        codes = encode_keys(keys)
        order = np.argsort(codes, kind="stable")
        if np.any(order != np.arange(len(order))):
            keys, codes = keys[order], codes[order]
            features = T.getitem(T.as_tensor(features), order)
        if len(codes) > 1 and np.any(np.diff(codes) == 0):
            raise ValueError("duplicate cell keys")
        self.keys = keys
        self.codes = codes
        self.features = T.as_tensor(features)
        if self.features.shape[0] != len(keys):
            raise ValueError("one feature row per cell required")
        for a in (self.origin, self.keys, self.codes):
            a.flags.writeable = False

    def __len__(self):
        return len(self.keys)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def features_array(self) -> np.ndarray:
        return self.features.data

    def centers(self) -> np.ndarray:
        return self.origin + (self.keys + 0.5) * self.resolution

    def lookup(self, idx: np.ndarray) -> np.ndarray:
        """Row of each (..., 3) cell index, or -1 where the cell is absent."""
        q = encode_keys(idx)
        pos = np.searchsorted(self.codes, q)
        pos = np.minimum(pos, len(self.codes) - 1)
        return np.where(self.codes[pos] == q, pos, -1)

    def cell(self, idx):
        row = int(self.lookup(np.asarray(idx)[None])[0])
        return None if row < 0 else self.features.data[row]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.float64(self.resolution).tobytes())
        h.update(self.origin.tobytes())
        h.update(self.keys.tobytes())
        h.update(np.ascontiguousarray(self.features.data).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# voxelization (per-voxel pooled PointNet features)


def voxel_partition(points: np.ndarray, r: float = VOXEL_SIZE, origin=None):
    """Half-open voxel assignment.

    Returns (origin, keys (K, 3), cell index of each point (P,)).
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise EmptyCloud("cannot voxelize an empty cloud")
    if origin is None:
        origin = np.floor(points.min(axis=0) / r) * r
    idx = np.floor((points - origin) / r).astype(np.int64)
    keys, inverse = np.unique(idx, axis=0, return_inverse=True)
    return np.asarray(origin, dtype=np.float64), keys, inverse.ravel()


def voxelize(cloud: FeaturePointCloud, store: ParameterStore, r: float = VOXEL_SIZE, path: str = "pointnet",
             widths=POINTNET_WIDTHS, origin=None) -> SparseFeatureVolume:
    """V0: per-cell max over contained points of mlp([p - cell center, feature])."""
    origin, keys, inverse = voxel_partition(cloud.positions, r, origin)
    centers = origin + (keys[inverse] + 0.5) * r
    x = np.concatenate([cloud.positions - centers, cloud.features], axis=1).astype(store.dtype)
    h = mlp(store, path, T.Tensor(x), list(widths))
    pooled = T.segment_max(h, inverse, len(keys))
    return SparseFeatureVolume(r, origin, keys, pooled)


# ---------------------------------------------------------------------------
# sparse convolution


def _gather_table(src: SparseFeatureVolume | np.ndarray, dst_keys: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """(N_dst, K) source rows for cells ``dst_keys[:, None] + offsets`` (-1 = absent)."""
    codes = src.codes if isinstance(src, SparseFeatureVolume) else src
    q = encode_keys(dst_keys[:, None, :] + offsets[None])
    pos = np.minimum(np.searchsorted(codes, q), len(codes) - 1)
    return np.where(codes[pos] == q, pos, -1)


def sparse_conv(store: ParameterStore, path: str, x, table: np.ndarray, cout: int) -> T.Tensor:
    """Gather-matmul convolution: out[i] = sum_k W_k x[table[i, k]] + b, absent taps contribute 0."""
    x = T.as_tensor(x)
    n, k = table.shape
    cin = x.shape[1]
    w = store.get(f"{path}/w", (k, cin, cout), fan_in=k * cin, fan_out=k * cout)
    b = store.get(f"{path}/b", (cout,), init="zeros")
    cols = T.reshape(T.gather_rows(x, table.ravel()), (n, k * cin))
    return T.matmul(cols, T.reshape(w, (k * cin, cout))) + b


def _gn_relu(store, path, x):
    n, c = x.shape
    y = group_norm(store, path, T.reshape(x, (1, n, c)), relu=True)
    return T.reshape(y, (n, c))


@dataclass(eq=False)
class _Level:
    keys: np.ndarray
    codes: np.ndarray


def _level(keys: np.ndarray) -> _Level:
    codes = encode_keys(keys)
    order = np.argsort(codes)
    return _Level(keys[order], codes[order])


def encode_scene(v0: SparseFeatureVolume, store: ParameterStore, path: str = "unet", widths=UNET_WIDTHS):
    """Sparse U-Net over V0; returns (V1 @ 4r, V2 @ 2r, V3 @ r).

    Encoder: conv 3^3 at r, then twice a 2^3 stride-2 downsampling conv
    followed by a 3^3 conv, reaching 4r (the bottleneck, V1).  Decoder:
    nearest unpooling onto the occupied child cells, skip concatenation and
    a 3^3 conv, giving V2 at 2r and V3 at r.  Group norm and ReLU after
    every conv.
    """
    c0, c1, c2 = widths
    r = v0.resolution
    l0 = _Level(v0.keys, v0.codes)
    l1 = _level(np.unique(l0.keys // 2, axis=0))
    l2 = _level(np.unique(l1.keys // 2, axis=0))

    def conv(name, x, src: _Level, dst: _Level, offsets, cout):
        table = _gather_table(src.codes, dst.keys, offsets)
        return _gn_relu(store, f"{path}/{name}/n", sparse_conv(store, f"{path}/{name}", x, table, cout))

    def unpool(x, parent: _Level, child: _Level):
        return T.gather_rows(x, _gather_table(parent.codes, child.keys // 2, np.zeros((1, 3), np.int64)).ravel())

    children = _CHILDREN
    e0 = conv("e0", v0.features, l0, l0, _NEIGHBORS, c0)
    e1 = conv("e1", conv("down1", e0, l0, _child_level(l1), children, c1), l1, l1, _NEIGHBORS, c1)
    v1 = conv("e2", conv("down2", e1, l1, _child_level(l2), children, c2), l2, l2, _NEIGHBORS, c2)
    v2 = conv("u1", T.concat([unpool(v1, l2, l1), e1], axis=1), l1, l1, _NEIGHBORS, c1)
    v3 = conv("u0", T.concat([unpool(v2, l1, l0), e0], axis=1), l0, l0, _NEIGHBORS, c0)
    origin = v0.origin
    return (SparseFeatureVolume(4 * r, origin, l2.keys, v1), SparseFeatureVolume(2 * r, origin, l1.keys, v2),
            SparseFeatureVolume(r, origin, l0.keys, v3))


def _child_level(parent: _Level) -> _Level:
    """Parent cells expressed as the base of their 2^3 child block."""
    return _Level(parent.keys * 2, parent.codes)


# ---------------------------------------------------------------------------
# trilinear interpolation

_SNAP = 1e-9


def interp_matrix(v: SparseFeatureVolume, q: np.ndarray) -> sp.csr_matrix:
    """(M, N_cells) trilinear weights of query points over stored cell centers."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    g = (q - v.origin) / v.resolution - 0.5
    near = np.round(g)
    g = np.where(np.abs(g - near) < _SNAP, near, g)
    rows, cols, vals = trilinear_entries(np.ascontiguousarray(g), v.codes, _OFF, _M)
    return sp.csr_matrix((vals.astype(v.features.dtype), (rows, cols)), shape=(len(q), len(v)))


def sparse_interp(v: SparseFeatureVolume, q) -> T.Tensor:
    """Trilinear blend of the 8 surrounding cell-center features, zero for absent cells.

    ``q`` is a world point (3,) or an array (M, 3); returns (C,) or (M, C).
    """
    q = np.asarray(q, dtype=np.float64)
    out = T.sparse_matmul(interp_matrix(v, q), v.features)
    return T.reshape(out, (v.channels,)) if q.ndim == 1 else out
