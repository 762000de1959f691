"""Parameter storage and the layer vocabulary used by every learned block."""

from __future__ import annotations

import hashlib

import numpy as np

from ..errors import BadGroupCount, ShapeMismatch
from . import tensor as T
from .tensor import Tensor

FORMAT_VERSION = 1


def param_rng(seed: int, path: str) -> np.random.Generator:
    """Counter-based generator keyed by (seed, parameter path)."""
    digest = hashlib.sha256(f"{int(seed)}:{path}".encode()).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest[:16], "little")))


class ParameterStore:
    """Named parameters, created lazily on first use with deterministic init."""

    def __init__(self, seed: int = 0, dtype=np.float64, version: int = FORMAT_VERSION):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.version = version
        self.params: dict[str, Tensor] = {}
        self.frozen = False

    def __contains__(self, path):
        return path in self.params

    def __getitem__(self, path) -> Tensor:
        return self.params[path]

    def __iter__(self):
        return iter(sorted(self.params))

    def __len__(self):
        return len(self.params)

    def items(self):
        return [(k, self.params[k]) for k in sorted(self.params)]

    def get(self, path: str, shape, init="glorot", fan_in=None, fan_out=None) -> Tensor:
        shape = tuple(int(s) for s in shape)
        p = self.params.get(path)
        if p is not None:
            if p.shape != shape:
                raise ShapeMismatch(f"parameter {path} has shape {p.shape}, requested {shape}")
            return p
        if self.frozen:
            raise KeyError(f"parameter {path} missing from a frozen store")
        if init == "glorot":
            a = np.sqrt(6.0 / (fan_in + fan_out))
            data = param_rng(self.seed, path).uniform(-a, a, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Tensor(data.astype(self.dtype), requires_grad=True, name=path)
        self.params[path] = p
        return p

    def set(self, path: str, value) -> None:
        """Overwrite (or create) a parameter with explicit values."""
        value = np.asarray(value, dtype=self.dtype)
        if path in self.params:
            if self.params[path].shape != value.shape:
                raise ShapeMismatch(f"parameter {path} has shape {self.params[path].shape}")
            self.params[path].data = value.copy()
        else:
            self.params[path] = Tensor(value.copy(), requires_grad=True, name=path)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)

    def grads(self) -> dict[str, np.ndarray]:
        return {k: p.grad for k, p in self.params.items() if p.grad is not None}

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore(self.seed, dtype, self.version)
        for k, p in self.params.items():
            out.params[k] = Tensor(p.data.astype(dtype), requires_grad=True, name=k)
        out.frozen = self.frozen
        return out

    def copy(self) -> "ParameterStore":
        return self.astype(self.dtype)

    def equals(self, other: "ParameterStore") -> bool:
        if sorted(self.params) != sorted(other.params):
            return False
        return all(self.params[k].data.dtype == other.params[k].data.dtype
                   and np.array_equal(self.params[k].data, other.params[k].data) for k in self.params)


def default_groups(channels: int) -> int:
    return 8 if channels >= 8 else 1


# ---------------------------------------------------------------------------
# layers


def linear(store: ParameterStore, path: str, x, cout: int) -> Tensor:
    x = T.as_tensor(x)
    cin = x.shape[-1]
    w = store.get(f"{path}/w", (cin, cout), fan_in=cin, fan_out=cout)
    b = store.get(f"{path}/b", (cout,), init="zeros")
    return T.matmul(x, w) + b


def mlp(store: ParameterStore, path: str, x, widths, activation=T.relu) -> Tensor:
    """Affine layers of the given output widths; activation between, last linear."""
    if not widths:
        raise ShapeMismatch("mlp needs at least one layer width")
    for i, w in enumerate(widths):
        x = linear(store, f"{path}/l{i}", x, w)
        if i < len(widths) - 1:
            x = activation(x)
    return x


def group_norm(store: ParameterStore, path: str, x, groups=None, eps=1e-5, relu: bool = False) -> Tensor:
    c = x.shape[-1]
    groups = default_groups(c) if groups is None else groups
    if groups < 1 or c % groups:
        raise BadGroupCount(f"{c} channels not divisible into {groups} groups")
    gamma = store.get(f"{path}/gamma", (c,), init="ones")
    beta = store.get(f"{path}/beta", (c,), init="zeros")
    return T.group_norm(x, groups, gamma, beta, eps, relu)


def conv1d(store: ParameterStore, path: str, x, cout: int, k: int = 3) -> Tensor:
    """Zero-padded 'same' 1-D convolution over (B, L, Cin)."""
    x = T.as_tensor(x)
    if x.ndim != 3:
        raise ShapeMismatch(f"conv1d expects (B, L, C), got {x.shape}")
    cin = x.shape[-1]
    w = store.get(f"{path}/w", (k, cin, cout), fan_in=k * cin, fan_out=k * cout)
    b = store.get(f"{path}/b", (cout,), init="zeros")
    half = k // 2
    return T.conv_valid(T.pad(x, [(0, 0), (half, half), (0, 0)]), w) + b


def conv2d(store: ParameterStore, path: str, x, cout: int, stride: int = 1, pad: str = "zero", k: int = 3) -> Tensor:
    """3x3 cross-correlation over (B, H, W, Cin) with one pixel of padding."""
    x = T.as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"conv2d expects (B, H, W, C), got {x.shape}")
    if pad not in ("zero", "replicate"):
        raise ValueError(f"pad must be 'zero' or 'replicate', got {pad!r}")
    cin = x.shape[-1]
    w = store.get(f"{path}/w", (k, k, cin, cout), fan_in=k * k * cin, fan_out=k * k * cout)
    b = store.get(f"{path}/b", (cout,), init="zeros")
    half = k // 2
    xp = T.pad(x, [(0, 0), (half, half), (half, half), (0, 0)], mode=pad)
    if stride == 1:
        return T.conv_valid(xp, w) + b
    cols = T.unfold2d(xp, k, stride)
    return T.matmul(cols, T.reshape(w, (k * k * cin, cout))) + b


softmax = T.softmax


def channel_max_pool(rows, segment=None, count=None) -> Tensor:
    """Per-channel max over a set of feature rows (or over each segment of rows)."""
    rows = T.as_tensor(rows)
    if segment is None:
        segment = np.zeros(rows.shape[0], dtype=np.int64)
        out = T.segment_max(rows, segment, 1)
        return T.reshape(out, (rows.shape[1],))
    return T.segment_max(rows, segment, count)
