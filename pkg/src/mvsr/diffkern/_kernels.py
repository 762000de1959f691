"""Compiled loops for the memory-bound ops that dominate training time."""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def group_norm_forward(x, gamma, beta, eps, relu):
    """x (B, M, G, Cg); returns (out, xhat, inv (B, G)).  Statistics accumulate in float64.

    With ``relu`` the output is clamped at zero (fused activation).
    """
    b, m, g, cg = x.shape
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty((b, g))
    n = m * cg
    for i in range(b):
        for j in range(g):
            s = 0.0
            for k in range(m):
                for c in range(cg):
                    s += x[i, k, j, c]
            mu = s / n
            v = 0.0
            for k in range(m):
                for c in range(cg):
                    d = x[i, k, j, c] - mu
                    v += d * d
            r = 1.0 / np.sqrt(v / n + eps)
            inv[i, j] = r
            for k in range(m):
                for c in range(cg):
                    h = (x[i, k, j, c] - mu) * r
                    xhat[i, k, j, c] = h
                    y = h * gamma[j * cg + c] + beta[j * cg + c]
                    out[i, k, j, c] = max(y, 0.0) if relu else y
    return out, xhat, inv


@numba.njit(cache=True)
def group_norm_backward(g, xhat, inv, gamma, out, relu):
    """Gradients (dx, dgamma, dbeta) for upstream ``g`` shaped like ``xhat``."""
    b, m, gr, cg = g.shape
    dx = np.empty_like(g)
    dgamma = np.zeros(gr * cg)
    dbeta = np.zeros(gr * cg)
    n = m * cg
    for i in range(b):
        for j in range(gr):
            s1 = 0.0
            s2 = 0.0
            for k in range(m):
                for c in range(cg):
                    gi = g[i, k, j, c]
                    if relu and out[i, k, j, c] <= 0:
                        gi = 0.0
                    h = xhat[i, k, j, c]
                    dxh = gi * gamma[j * cg + c]
                    s1 += dxh
                    s2 += dxh * h
                    dgamma[j * cg + c] += gi * h
                    dbeta[j * cg + c] += gi
            m1 = s1 / n
            m2 = s2 / n
            r = inv[i, j]
            for k in range(m):
                for c in range(cg):
                    gi = g[i, k, j, c]
                    if relu and out[i, k, j, c] <= 0:
                        gi = 0.0
                    dx[i, k, j, c] = r * (gi * gamma[j * cg + c] - m1 - xhat[i, k, j, c] * m2)
    return dx, dgamma, dbeta


@numba.njit(cache=True)
def trilinear_entries(g, codes, off, mul):
    """COO entries of trilinear weights for grid coordinates ``g`` (M, 3).

    Corners are looked up by key code in the sorted ``codes``; absent cells
    and zero weights are skipped.  Entries come corner-major, matching the
    order of the vectorized construction.
    """
    n = g.shape[0]
    rows = np.empty(8 * n, np.int64)
    cols = np.empty(8 * n, np.int64)
    vals = np.empty(8 * n)
    ncode = codes.shape[0]
    k = 0
    for corner in range(8):
        a, b, c = corner >> 2, (corner >> 1) & 1, corner & 1
        for i in range(n):
            x0, y0, z0 = np.floor(g[i, 0]), np.floor(g[i, 1]), np.floor(g[i, 2])
            fx, fy, fz = g[i, 0] - x0, g[i, 1] - y0, g[i, 2] - z0
            w = ((fx if a else 1.0 - fx) * (fy if b else 1.0 - fy)) * (fz if c else 1.0 - fz)
            if w == 0:
                continue
            code = ((np.int64(x0) + a + off) * mul + (np.int64(y0) + b + off)) * mul + (np.int64(z0) + c + off)
            lo, hi = 0, ncode
            while lo < hi:
                mid = (lo + hi) >> 1
                if codes[mid] < code:
                    lo = mid + 1
                else:
                    hi = mid
            if lo < ncode and codes[lo] == code:
                rows[k] = i
                cols[k] = lo
                vals[k] = w
                k += 1
    return rows[:k], cols[:k], vals[:k]
