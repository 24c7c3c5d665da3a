"""Adam with bias correction over a named subset of a ParamStore."""
from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import numpy as np

from .layers import ParamStore


class Adam:
    """Adam restricted to the parameters whose names start with one of ``prefixes``.

    Defaults follow the two-timescale setup used for adversarial training:
    beta1 = 0, beta2 = 0.9.
    """

    def __init__(self, store: ParamStore, prefixes: Sequence[str], lr: float,
                 betas=(0.0, 0.9), eps: float = 1e-8):
        self.store = store
        self.names: List[str] = [n for n in store.names() if any(n.startswith(p) for p in prefixes)]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {n: np.zeros_like(store.params[n]) for n in self.names}
        self.v: Dict[str, np.ndarray] = {n: np.zeros_like(store.params[n]) for n in self.names}

    def zero_grad(self) -> None:
        for n in self.names:
            self.store.grads[n].fill(0.0)

    def step(self, grads: Optional[Dict[str, np.ndarray]] = None) -> None:
        grads = self.store.grads if grads is None else grads
        missing = [n for n in self.names if n not in grads]
        if missing:
            raise KeyError(f"missing gradient for {missing[0]}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for n in self.names:
            g = grads[n]
            m, v = self.m[n], self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.store.params[n] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(store: ParamStore, state: Adam) -> ParamStore:
    state.step()
    return store
