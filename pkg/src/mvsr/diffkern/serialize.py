"""Binary weight files.

Layout (little-endian): magic ``3DVW``, u32 format version, then one record
per parameter -- u32 path length, utf-8 path, u8 dtype tag (0 = f64,
1 = f32), u32 rank, rank x u32 extents, raw data -- and a trailing CRC32 of
everything before it.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import CorruptFile, VersionMismatch
from .layers import FORMAT_VERSION, ParameterStore
from .tensor import Tensor

MAGIC = b"3DVW"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TAGS = {np.dtype("float64"): 0, np.dtype("float32"): 1}


def dumps(store: ParameterStore, version: int = FORMAT_VERSION) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", version)
    for path, p in store.items():
        name = path.encode("utf-8")
        data = p.data
        out += struct.pack("<I", len(name)) + name
        out += struct.pack("<BI", _TAGS[data.dtype], data.ndim)
        out += struct.pack(f"<{data.ndim}I", *data.shape)
        out += np.ascontiguousarray(data, dtype=_DTYPES[_TAGS[data.dtype]]).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def loads(blob: bytes, expected_version: int = FORMAT_VERSION) -> ParameterStore:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CorruptFile("not a weight file (bad magic or too short)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != expected_version:
        raise VersionMismatch(f"weight file version {version}, expected {expected_version}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptFile("checksum mismatch")
    store = ParameterStore(version=version)
    pos = 8
    dtypes = set()
    try:
        while pos < len(body):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            path = body[pos:pos + n].decode("utf-8")
            pos += n
            tag, rank = struct.unpack_from("<BI", body, pos)
            pos += 5
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            dt = _DTYPES[tag]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + size > len(body):
                raise CorruptFile(f"record {path!r} runs past end of file")
            data = np.frombuffer(body, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(shape)
            pos += size
            store.params[path] = Tensor(data.astype(dt.newbyteorder("=")), requires_grad=True, name=path)
            dtypes.add(dt)
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"malformed record: {exc}") from exc
    if len(dtypes) == 1:
        store.dtype = np.dtype(dtypes.pop().newbyteorder("="))
    return store


def save_weights(store: ParameterStore, path, version: int = FORMAT_VERSION) -> None:
    Path(path).write_bytes(dumps(store, version))


def load_weights(path, expected_version: int = FORMAT_VERSION) -> ParameterStore:
    return loads(Path(path).read_bytes(), expected_version)
