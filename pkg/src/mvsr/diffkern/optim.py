"""Adam optimizer over a :class:`ParameterStore`."""

from __future__ import annotations

import numpy as np

from ..errors import MissingGradient
from .layers import ParameterStore


class AdamState:
    def __init__(self):
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(store: ParameterStore, grads: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, state: AdamState | None = None) -> ParameterStore:
    """Apply one Adam update in place and return the store.

    ``state`` carries the moment estimates between calls; a fresh state is
    used when omitted, which makes the call a first step.
    """
    state = AdamState() if state is None else state
    missing = [k for k in store.params if grads.get(k) is None]
    if missing:
        raise MissingGradient(f"no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, p in store.items():
        g = np.asarray(grads[k], dtype=p.data.dtype)
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


class Adam:
    def __init__(self, store: ParameterStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def step(self, grads: dict | None = None) -> None:
        grads = self.store.grads() if grads is None else grads
        adam_step(self.store, grads, self.lr, self.beta1, self.beta2, self.eps, self.state)
