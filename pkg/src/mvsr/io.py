"""File formats: PFM depth, binary PPM images, binary PLY clouds, volume dumps."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CorruptFile, ValidationError


def write_pfm(path, depth: np.ndarray) -> None:
    """Single-channel little-endian PFM (rows stored bottom-to-top)."""
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(depth[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise CorruptFile(f"{path}: not a PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dt = "<f4" if scale < 0 else ">f4"
        ch = 3 if kind == b"PF" else 1
        body = f.read()
    if len(body) != 4 * w * h * ch:
        raise CorruptFile(f"{path}: expected {w * h * ch} floats, found {len(body)} bytes")
    data = np.frombuffer(body, dtype=dt)
    data = data.reshape((h, w, ch) if ch == 3 else (h, w))[::-1]
    return data.astype(np.float32)


def write_ppm(path, image: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    """Binary P6 image as float (H, W, 3) in [0, 1]."""
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise CorruptFile(f"{path}: not a binary PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


_PLY_TYPES = {"f4": "float", "f8": "double", "u1": "uchar", "i4": "int", "u4": "uint"}
_PLY_NAMES = {v: k for k, v in _PLY_TYPES.items()} | {"float32": "f4", "uint8": "u1", "float64": "f8"}


def write_ply(path, points: np.ndarray, **properties) -> None:
    """Binary little-endian PLY vertex list: float32 x, y, z plus extra properties.

    Each keyword maps a property name to an (N,) array, or an (N, K) array
    that expands to ``name_0 .. name_{K-1}``; dtype is kept as given.
    """
    points = np.asarray(points)
    n = len(points)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    columns = [points[:, 0], points[:, 1], points[:, 2]]
    for name, arr in properties.items():
        arr = np.asarray(arr)
        code = arr.dtype.str[1:]
        if code not in _PLY_TYPES:
            raise ValidationError(f"unsupported PLY dtype {arr.dtype} for {name}")
        if arr.ndim == 1:
            fields.append((name, "<" + code))
            columns.append(arr)
        else:
            for k in range(arr.shape[1]):
                fields.append((f"{name}_{k}", "<" + code))
                columns.append(arr[:, k])
    rec = np.empty(n, dtype=fields)
    for (name, _), col in zip(fields, columns):
        rec[name] = col
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {_PLY_TYPES[dt[1:]]} {name}" for name, dt in fields]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path) -> dict:
    """Read a binary little-endian vertex PLY written by :func:`write_ply`."""
    blob = Path(path).read_bytes()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise CorruptFile(f"{path}: not a PLY file")
    lines = blob[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise CorruptFile(f"{path}: only binary little-endian PLY is supported")
    n, fields = 0, []
    for ln in lines:
        parts = ln.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            fields.append((parts[2], "<" + _PLY_NAMES[parts[1]]))
    dt = np.dtype(fields)
    body = blob[end + len(b"end_header\n"):]
    if len(body) < n * dt.itemsize:
        raise CorruptFile(f"{path}: truncated vertex data")
    rec = np.frombuffer(body, dtype=dt, count=n)
    out = {name: rec[name].copy() for name, _ in fields}
    out["points"] = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(np.float64)
    return out


def write_volume(path, volume) -> None:
    """Dump a sparse feature volume.

    Layout (little-endian): magic ``SVOL``, f64 resolution, 3 x f64 origin,
    u32 channel count, u64 cell count, then per cell 3 x i32 index and
    C x f32 feature.
    """
    keys = np.asarray(volume.keys, dtype="<i4")
    feats = np.asarray(volume.features_array, dtype="<f4")
    rec = np.empty(len(keys), dtype=[("index", "<i4", 3), ("feature", "<f4", feats.shape[1])])
    rec["index"] = keys
    rec["feature"] = feats
    with open(path, "wb") as f:
        f.write(b"SVOL")
        f.write(struct.pack("<d3dIQ", volume.resolution, *volume.origin, feats.shape[1], len(keys)))
        f.write(rec.tobytes())


def read_volume(path) -> dict:
    blob = Path(path).read_bytes()
    if blob[:4] != b"SVOL":
        raise CorruptFile(f"{path}: not a volume dump")
    res, ox, oy, oz, c, n = struct.unpack_from("<d3dIQ", blob, 4)
    dt = np.dtype([("index", "<i4", 3), ("feature", "<f4", c)])
    off = 4 + struct.calcsize("<d3dIQ")
    if len(blob) - off != n * dt.itemsize:
        raise CorruptFile(f"{path}: size does not match cell count")
    rec = np.frombuffer(blob, dtype=dt, count=n, offset=off)
    return {"resolution": res, "origin": np.array([ox, oy, oz]), "keys": rec["index"].astype(np.int64),
            "features": rec["feature"].astype(np.float64)}
