"""Central finite-difference gradient checks."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| scaled by the larger of the two gradients' max magnitudes."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(fn, params, eps: float = 1e-6, atol: float = 1e-9, max_entries: int | None = None,
                    seed: int = 0) -> dict[str, float]:
    """Compare backprop gradients of scalar ``fn()`` with central differences.

    ``params`` maps names to leaf tensors (parameters or inputs) that ``fn``
    closes over.  Returns the relative error per name.  A parameter whose
    analytic and numeric gradients differ by less than ``atol`` everywhere
    scores 0: that is the finite-difference noise floor, reached for
    gradients that vanish identically (a bias feeding a normalization or a
    softmax).  ``max_entries`` checks a random subset of each parameter's
    entries instead of all of them.
    """
    params = dict(params)
    for p in params.values():
        p.grad = None
    loss = fn()
    backward(loss)
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    errors = {}
    for k, p in params.items():
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(np.random.default_rng(seed).choice(flat.size, max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn().data)
            flat[i] = orig - eps
            lo = float(fn().data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)
        a, n = analytic[k].reshape(-1)[idx], numeric.reshape(-1)[idx]
        diff = np.abs(a - n).max(initial=0.0)
        errors[k] = 0.0 if diff < atol else relative_error(a, n)
    for p in params.values():
        p.grad = None
    return errors


def leaf(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)
