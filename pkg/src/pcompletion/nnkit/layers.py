"""Dense layer kernels with explicit forward/backward passes.

Every layer object registers its parameters in a :class:`ParamStore` and
exposes ``forward(...) -> (output, cache)`` plus ``backward(grad, cache)``.
Caches are returned rather than stored on the layer, so one layer can be
applied several times in a single graph (the refiner runs twice) and each
application keeps its own saved activations.  Parameter gradients are
accumulated into ``store.grads``.
"""
from __future__ import annotations

from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
SN_EPS = 1e-12


class ParamStore:
    """Named trainable parameters, their gradients and non-trainable buffers."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> str:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=self.dtype)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return name

    def add_buffer(self, name: str, value: np.ndarray) -> str:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.buffers[name] = np.array(value, dtype=self.dtype)
        return name

    def __getitem__(self, name: str) -> np.ndarray:
        if name in self.params:
            return self.params[name]
        return self.buffers[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params or name in self.buffers

    def names(self, prefix: str = "") -> List[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def zero_grad(self, prefix: str = "") -> None:
        for name in self.names(prefix):
            self.grads[name].fill(0.0)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self.grads[name] += grad

    def state(self) -> Dict[str, np.ndarray]:
        """All tensors (parameters then buffers) keyed by name."""
        out = dict(self.params)
        out.update(self.buffers)
        return out

    def load_state(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        expected = set(self.params) | set(self.buffers)
        if strict:
            missing = expected - set(state)
            extra = set(state) - expected
            if missing or extra:
                raise ValueError(
                    f"parameter names do not match: missing {sorted(missing)[:5]}, "
                    f"unexpected {sorted(extra)[:5]}"
                )
        for name, value in state.items():
            if name not in expected:
                continue
            target = self[name]
            if target.shape != tuple(value.shape):
                raise ValueError(
                    f"shape mismatch for {name}: {target.shape} vs {tuple(value.shape)}"
                )
            target[...] = value

    def num_params(self, prefix: str = "") -> int:
        return int(sum(self.params[n].size for n in self.names(prefix)))


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- activations

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(dy: np.ndarray, x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x > 0, dy, slope * dy)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient given the sigmoid *output* ``y``."""
    return dy * y * (1.0 - y)


def dropout(x: np.ndarray, rate: float, rng: Optional[np.random.Generator],
            training: bool = True) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Inverted dropout.  Returns ``(y, mask)``; the mask is ``None`` in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dy: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    return dy if mask is None else dy * mask


# ---------------------------------------------------------------- linear

class Linear:
    """``y = x @ W + b`` over the last axis of ``x``."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 rng: np.random.Generator, bias: bool = True):
        self.store = store
        self.c_in, self.c_out = c_in, c_out
        self.w = store.add(f"{name}.w", uniform_init(rng, (c_in, c_out), c_in))
        self.b = store.add(f"{name}.b", np.zeros(c_out)) if bias else None

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.c_in:
            raise ValueError(f"linear expects {self.c_in} input channels, got {x.shape[-1]}")
        y = x @ self.store[self.w]
        if self.b is not None:
            y = y + self.store[self.b]
        return y, x

    def backward(self, dy: np.ndarray, x: np.ndarray) -> np.ndarray:
        x2 = x.reshape(-1, self.c_in)
        dy2 = dy.reshape(-1, self.c_out)
        self.store.accumulate(self.w, x2.T @ dy2)
        if self.b is not None:
            self.store.accumulate(self.b, dy2.sum(axis=0))
        return dy @ self.store[self.w].T


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: x {x.shape}, W {w.shape}, b {b.shape}")
    return x @ w + b


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Returns ``(dx, dW, db)``."""
    x2 = x.reshape(-1, w.shape[0])
    dy2 = dy.reshape(-1, w.shape[1])
    return dy @ w.T, x2.T @ dy2, dy2.sum(axis=0)


# ---------------------------------------------------------------- batch norm

class BatchNorm:
    """Channel-wise normalization over every axis but the last.

    ``h_bar = (h - mu) / (sigma + eps)`` with the biased standard deviation.
    Eval mode uses exponential running statistics.  The optional affine part
    is used by the encoder MLP; style folding supplies its own modulation.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, affine: bool = False):
        self.store = store
        self.channels = channels
        self.mean = store.add_buffer(f"{name}.running_mean", np.zeros(channels))
        self.std = store.add_buffer(f"{name}.running_std", np.ones(channels))
        self.gamma = store.add(f"{name}.gamma", np.ones(channels)) if affine else None
        self.beta = store.add(f"{name}.beta", np.zeros(channels)) if affine else None

    def forward(self, h: np.ndarray, training: bool = True):
        flat = h.reshape(-1, self.channels)
        if training:
            if flat.shape[0] < 2:
                raise ValueError("batch norm needs at least 2 entries per channel in training mode")
            mu = flat.mean(axis=0)
            centered = h - mu
            sigma = np.sqrt((centered.reshape(-1, self.channels) ** 2).mean(axis=0))
            m = BN_MOMENTUM
            self.store.buffers[self.mean] = m * self.store[self.mean] + (1 - m) * mu
            self.store.buffers[self.std] = m * self.store[self.std] + (1 - m) * sigma
        else:
            mu = self.store[self.mean]
            sigma = self.store[self.std]
            centered = h - mu
        scale = 1.0 / (sigma + BN_EPS)
        h_bar = centered * scale
        out = h_bar
        if self.gamma is not None:
            out = h_bar * self.store[self.gamma] + self.store[self.beta]
        return out, (centered, sigma, scale, h_bar, training)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        centered, sigma, scale, h_bar, training = cache
        c = self.channels
        if self.gamma is not None:
            self.store.accumulate(self.gamma, (dy * h_bar).reshape(-1, c).sum(axis=0))
            self.store.accumulate(self.beta, dy.reshape(-1, c).sum(axis=0))
            dy = dy * self.store[self.gamma]
        if not training:
            return dy * scale
        n = centered.size // c
        proj = (dy * centered).reshape(-1, c).sum(axis=0)
        safe = np.where(sigma > 0, sigma, 1.0)
        coef = np.where(sigma > 0, scale ** 2 * proj / (n * safe), 0.0)
        dc = dy * scale - centered * coef
        return dc - dc.reshape(-1, c).mean(axis=0)


# ---------------------------------------------------------------- spectral norm

def power_iterate(w2d: np.ndarray, u: np.ndarray, n_iter: int = 1) -> np.ndarray:
    """Advance the left singular vector estimate ``u`` by ``n_iter`` steps."""
    for _ in range(n_iter):
        v = w2d.T @ u
        v = v / max(np.linalg.norm(v), SN_EPS)
        u = w2d @ v
        u = u / max(np.linalg.norm(u), SN_EPS)
    return u


def spectral_normalize(w2d: np.ndarray, u: np.ndarray):
    """Return ``(W / sigma, sigma, v)`` with ``sigma = ||W^T u|| = u^T W v``.

    ``u`` is treated as a constant; then d(sigma)/dW = u v^T exactly.
    """
    wtu = w2d.T @ u
    sigma = max(float(np.linalg.norm(wtu)), SN_EPS)
    v = wtu / sigma
    return w2d / sigma, sigma, v


def spectral_normalize_backward(dw_sn: np.ndarray, w_sn: np.ndarray, sigma: float,
                                u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return (dw_sn - np.sum(dw_sn * w_sn) * np.outer(u, v)) / sigma


class SpectralMixin:
    """Weight wrapper that divides by a power-iteration estimate of the top singular value."""

    def _init_sn(self, store: ParamStore, name: str, rows: int, rng: np.random.Generator):
        u = rng.normal(size=rows)
        self.u = store.add_buffer(f"{name}.sn_u", u / np.linalg.norm(u))

    def power_iteration(self, n_iter: int = 1) -> None:
        w2d = self._weight_2d()
        self.store.buffers[self.u] = power_iterate(w2d, self.store[self.u], n_iter)

    def _effective_weight(self):
        w2d = self._weight_2d()
        if not self.spectral:
            return w2d, None
        u = self.store[self.u]
        w_sn, sigma, v = spectral_normalize(w2d, u)
        return w_sn, (w_sn, sigma, u, v)

    def _weight_grad(self, dw_eff2d: np.ndarray, sn_cache) -> np.ndarray:
        if sn_cache is None:
            return dw_eff2d
        return spectral_normalize_backward(dw_eff2d, *sn_cache)


class SNLinear(SpectralMixin):
    """Linear layer whose weight is optionally spectrally normalized."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 rng: np.random.Generator, spectral: bool = True):
        self.store = store
        self.c_in, self.c_out = c_in, c_out
        self.spectral = spectral
        self.w = store.add(f"{name}.w", uniform_init(rng, (c_out, c_in), c_in))
        self.b = store.add(f"{name}.b", np.zeros(c_out))
        if spectral:
            self._init_sn(store, name, c_out, rng)

    def _weight_2d(self) -> np.ndarray:
        return self.store[self.w]

    def forward(self, x: np.ndarray):
        w_eff, sn_cache = self._effective_weight()
        return x @ w_eff.T + self.store[self.b], (x, w_eff, sn_cache)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x, w_eff, sn_cache = cache
        self.store.accumulate(self.w, self._weight_grad(dy.T @ x, sn_cache))
        self.store.accumulate(self.b, dy.sum(axis=0))
        return dy @ w_eff


# ---------------------------------------------------------------- conv2d

class Conv2d(SpectralMixin):
    """3x3 cross-correlation, stride 2, padding 1 (NCHW)."""

    kernel = 3
    stride = 2
    pad = 1

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 rng: np.random.Generator, spectral: bool = False):
        self.store = store
        self.c_in, self.c_out = c_in, c_out
        self.spectral = spectral
        fan_in = c_in * self.kernel * self.kernel
        self.w = store.add(f"{name}.w", uniform_init(rng, (c_out, c_in, 3, 3), fan_in))
        self.b = store.add(f"{name}.b", np.zeros(c_out))
        if spectral:
            self._init_sn(store, name, c_out, rng)

    def _weight_2d(self) -> np.ndarray:
        return self.store[self.w].reshape(self.c_out, -1)

    @staticmethod
    def output_size(n: int) -> int:
        return (n + 2 - 3) // 2 + 1

    def forward(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ValueError(f"conv expects (B, {self.c_in}, H, W), got {x.shape}")
        b, _, h, w = x.shape
        ho, wo = self.output_size(h), self.output_size(w)
        w2d, sn_cache = self._effective_weight()
        kern = w2d.reshape(self.c_out, self.c_in, 3, 3)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        # im2col over the 9 taps: (B, Ho, Wo, C_in*9), channel-major like the kernel
        cols = np.empty((b, ho, wo, self.c_in, 3, 3), dtype=x.dtype)
        for i in range(3):
            for j in range(3):
                patch = xp[:, :, i:i + 2 * ho - 1:2, j:j + 2 * wo - 1:2]
                cols[..., i, j] = patch.transpose(0, 2, 3, 1)
        cols = cols.reshape(b, ho, wo, -1)
        y = cols @ kern.reshape(self.c_out, -1).T + self.store[self.b]
        return y.transpose(0, 3, 1, 2), (x.shape, cols, w2d, sn_cache)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x_shape, cols, w2d, sn_cache = cache
        b, _, h, w = x_shape
        ho, wo = dy.shape[2], dy.shape[3]
        dy_l = dy.transpose(0, 2, 3, 1)  # B, Ho, Wo, C_out
        flat_dy = dy_l.reshape(-1, self.c_out)
        dw2d = flat_dy.T @ cols.reshape(-1, cols.shape[-1])
        self.store.accumulate(self.w, self._weight_grad(dw2d, sn_cache).reshape(self.store[self.w].shape))
        self.store.accumulate(self.b, flat_dy.sum(axis=0))
        dcols = (dy_l @ w2d).reshape(b, ho, wo, self.c_in, 3, 3)
        dxp = np.zeros((b, self.c_in, h + 2, w + 2), dtype=dy.dtype)
        for i in range(3):
            for j in range(3):
                dxp[:, :, i:i + 2 * ho - 1:2, j:j + 2 * wo - 1:2] += dcols[..., i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, 1:h + 1, 1:w + 1]


def iter_spectral(layers: Iterable) -> Iterable[SpectralMixin]:
    return (layer for layer in layers if getattr(layer, "spectral", False))
