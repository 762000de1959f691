"""Dense tensors with reverse-mode gradients.

A :class:`Tensor` wraps a numpy array.  Operations on tensors that require
gradients record a closure that maps the output gradient to input
gradients; :func:`backward` replays those closures in reverse topological
order.  Only what the learned blocks of this package need is implemented.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from ..errors import ShapeMismatch
from . import _kernels as _k


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate(self, g) -> None:
        # never written in place, so the first gradient can be kept without a copy
        g = np.asarray(g, dtype=self.data.dtype).reshape(self.data.shape)
        self.grad = g if self.grad is None else self.grad + g

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


_grad_enabled = [True]


class no_grad:
    """Context in which operations record no graph (forward-only evaluation)."""

    def __enter__(self):
        self._prev = _grad_enabled[0]
        _grad_enabled[0] = False

    def __exit__(self, *exc):
        _grad_enabled[0] = self._prev


def _result(data, parents, backward):
    parents = tuple(parents)
    if _grad_enabled[0] and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(roots, grads=None) -> None:
    """Accumulate d(roots)/d(leaves) into ``leaf.grad``.

    ``roots`` is a tensor or list of tensors; ``grads`` the matching upstream
    gradients (ones for a scalar root when omitted).  Intermediate gradients
    and graph links are released afterwards.
    """
    if isinstance(roots, Tensor):
        roots = [roots]
        grads = None if grads is None else [grads]
    if grads is None:
        grads = [np.ones_like(r.data) for r in roots]
    order, seen = [], set()
    for root in roots:
        if not root.requires_grad:
            continue
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    for root, g in zip(roots, grads):
        if root.requires_grad:
            root.accumulate(g)
    for node in reversed(order):
        if node._backward is None:
            continue
        if node.grad is not None:
            node._backward(node.grad)
        node.grad = None
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), bw)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        x.accumulate(g * mask)

    return _result(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), bw)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: x.accumulate(g * out))


def log(x):
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: x.accumulate(g / x.data))


def tabs(x):
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: x.accumulate(g * sign))


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate(np.broadcast_to(g, x.shape))

    return _result(out, (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: x.accumulate(g.reshape(x.shape)))


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _result(x.data.transpose(axes), (x,), lambda g: x.accumulate(g.transpose(inv)))


def getitem(x, index):
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x.accumulate(full)

    return _result(x.data[index], (x,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t.accumulate(part)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def pad(x, widths, mode="zero"):
    """Pad with ``widths`` as in ``np.pad``; ``mode`` is 'zero' or 'replicate'."""
    x = as_tensor(x)
    widths = [tuple(w) for w in widths]
    if mode == "zero":
        out = np.pad(x.data, widths)
    elif mode == "replicate":
        out = np.pad(x.data, widths, mode="edge")
    else:
        raise ValueError(f"unknown pad mode {mode!r}")

    def bw(g):
        if mode == "replicate":
            # fold padded borders back onto the edge they copy
            for ax, (lo, hi) in enumerate(widths):
                if lo:
                    head = np.take(g, range(lo), axis=ax).sum(axis=ax, keepdims=True)
                    g = np.delete(g, range(lo), axis=ax)
                    idx = [slice(None)] * g.ndim
                    idx[ax] = slice(0, 1)
                    g[tuple(idx)] += head
                if hi:
                    n = g.shape[ax]
                    tail = np.take(g, range(n - hi, n), axis=ax).sum(axis=ax, keepdims=True)
                    g = np.delete(g, range(n - hi, n), axis=ax)
                    idx = [slice(None)] * g.ndim
                    idx[ax] = slice(-1, None)
                    g[tuple(idx)] += tail
            x.accumulate(g)
        else:
            idx = tuple(slice(lo, g.shape[i] - hi) for i, (lo, hi) in enumerate(widths))
            x.accumulate(g[idx])

    return _result(out, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """(..., K) @ (K, N) -> (..., N)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            k = a.shape[-1]
            b.accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))

    return _result(a.data @ b.data, (a, b), bw)


def sparse_matmul(A, x):
    """Constant sparse (M, N) matrix times (N, C) tensor."""
    x = as_tensor(x)
    if A.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"sparse operator {A.shape} vs input {x.shape}")
    A = sp.csr_matrix(A)
    AT = None

    def bw(g):
        nonlocal AT
        if AT is None:
            AT = A.T.tocsr()
        x.accumulate(AT @ g)

    out = np.asarray(A @ x.data).astype(x.dtype, copy=False)
    return _result(out, (x,), bw)


def gather_rows(x, index):
    """Rows of (N, C) ``x`` at ``index``; entries of -1 yield zero rows."""
    x = as_tensor(x)
    index = np.asarray(index).ravel()
    keep = index >= 0
    rows = np.nonzero(keep)[0]
    A = sp.csr_matrix((np.ones(len(rows), dtype=x.dtype), (rows, index[keep])),
                      shape=(len(index), x.shape[0]))
    return sparse_matmul(A, x)


# ---------------------------------------------------------------------------
# normalization / pooling


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x.accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (x,), bw)


def group_norm(x, groups, gamma, beta, eps=1e-5, relu=False):
    """Normalize (B, ..., C) per sample over all middle axes and channel groups.

    ``relu=True`` fuses a ReLU after the affine step.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    shape = x.shape
    b, c = shape[0], shape[-1]
    if c % groups:
        from ..errors import BadGroupCount
        raise BadGroupCount(f"{c} channels not divisible into {groups} groups")
    dt = np.result_type(x.dtype, gamma.dtype)
    xr = np.ascontiguousarray(x.data.reshape(b, -1, groups, c // groups), dtype=dt)
    gam = np.ascontiguousarray(gamma.data, dtype=dt)
    out, xhat, inv = _k.group_norm_forward(xr, gam, np.ascontiguousarray(beta.data, dtype=dt), eps, relu)

    def bw(g):
        gr = np.ascontiguousarray(g.reshape(xr.shape), dtype=dt)
        dx, dgamma, dbeta = _k.group_norm_backward(gr, xhat, inv, gam, out, relu)
        if gamma.requires_grad:
            gamma.accumulate(dgamma.astype(gamma.dtype))
        if beta.requires_grad:
            beta.accumulate(dbeta.astype(beta.dtype))
        if x.requires_grad:
            x.accumulate(dx.reshape(shape))

    return _result(out.reshape(shape), (x, gamma, beta), bw)


def segment_max(x, segment, count):
    """Per-channel max of the rows of (N, C) ``x`` grouped by ``segment`` ids.

    Every id in ``range(count)`` must occur.  Gradient flows to the first
    maximizing row of each (segment, channel).
    """
    x = as_tensor(x)
    segment = np.asarray(segment)
    order = np.argsort(segment, kind="stable")
    seg_sorted = segment[order]
    starts = np.searchsorted(seg_sorted, np.arange(count))
    if len(np.unique(seg_sorted)) != count:
        raise ShapeMismatch("segment_max needs every segment non-empty")
    xs = x.data[order]
    out = np.maximum.reduceat(xs, starts, axis=0)

    def bw(g):
        hit = xs == out[seg_sorted]
        csum = np.cumsum(hit, axis=0)
        base = np.zeros_like(out, dtype=csum.dtype)
        base[1:] = csum[starts[1:] - 1]
        first = hit & (csum - base[seg_sorted] == 1)
        gs = np.where(first, g[seg_sorted], 0)
        full = np.empty_like(x.data)
        full[order] = gs
        x.accumulate(full)

    return _result(out, (x,), bw)


# ---------------------------------------------------------------------------
# sliding windows


def unfold1d(x, k=3):
    """(B, L, C) -> (B, L-k+1, k*C) windows, tap-major then channel."""
    x = as_tensor(x)
    b, n, c = x.shape
    lo = n - k + 1
    out = np.concatenate([x.data[:, t:t + lo] for t in range(k)], axis=-1)

    def bw(g):
        full = np.zeros_like(x.data)
        for t in range(k):
            full[:, t:t + lo] += g[..., t * c:(t + 1) * c]
        x.accumulate(full)

    return _result(out, (x,), bw)


def unfold2d(x, k=3, stride=1):
    """(B, H, W, C) -> (B, H', W', k*k*C) windows, ordered (ky, kx, C)."""
    x = as_tensor(x)
    b, h, w, c = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1

    def tap(ky, kx):
        return (slice(None), slice(ky, ky + stride * (ho - 1) + 1, stride),
                slice(kx, kx + stride * (wo - 1) + 1, stride))

    out = np.concatenate([x.data[tap(ky, kx)] for ky in range(k) for kx in range(k)], axis=-1)

    def bw(g):
        full = np.zeros_like(x.data)
        for i, (ky, kx) in enumerate((ky, kx) for ky in range(k) for kx in range(k)):
            full[tap(ky, kx)] += g[..., i * c:(i + 1) * c]
        x.accumulate(full)

    return _result(out, (x,), bw)


def conv_valid(x, w):
    """Stride-1 'valid' cross-correlation as one matmul per tap plus shifted sums.

    ``x`` is (B, L, C) with ``w`` (k, C, O), or (B, H, W, C) with ``w``
    (k, k, C, O).  Reads the input contiguously, which is much cheaper than
    materializing the unfolded windows.
    """
    x, w = as_tensor(x), as_tensor(w)
    sp_dims = x.ndim - 2
    if sp_dims not in (1, 2) or w.ndim != sp_dims + 2 or w.shape[-2] != x.shape[-1]:
        raise ShapeMismatch(f"cannot convolve {x.shape} with {w.shape}")
    ks = w.shape[:sp_dims]
    c, o = w.shape[-2], w.shape[-1]
    out_sp = tuple(n - k + 1 for n, k in zip(x.shape[1:-1], ks))
    taps = list(np.ndindex(*ks))
    flat = x.data.reshape(-1, c)
    wt = w.data.reshape(-1, c, o)

    def window(t):
        return (slice(None),) + tuple(slice(i, i + n) for i, n in zip(t, out_sp))

    out = np.zeros((x.shape[0],) + out_sp + (o,), dtype=np.result_type(x.dtype, w.dtype))
    for i, t in enumerate(taps):
        out += (flat @ wt[i]).reshape(x.shape[:-1] + (o,))[window(t)]

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gflat = g.reshape(-1, o)
            for i, t in enumerate(taps):
                gx[window(t)] += (gflat @ wt[i].T).reshape(g.shape[:-1] + (c,))
            x.accumulate(gx)
        if w.requires_grad:
            gw = np.empty_like(wt)
            placed = np.zeros(x.shape[:-1] + (o,), dtype=g.dtype)
            for i, t in enumerate(taps):
                placed[...] = 0
                placed[window(t)] = g
                gw[i] = flat.T @ placed.reshape(-1, o)
            w.accumulate(gw.reshape(w.shape))

    return _result(out, (x, w), bw)

