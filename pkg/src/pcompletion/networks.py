"""Encoder, style-based folding generator, refiner and discriminator.

All networks operate on batched arrays (``B x M x C`` for points,
``B x C x H x W`` for images) and follow the ``forward -> (out, cache)`` /
``backward(grad, cache)`` convention of :mod:`pcompletion.nnkit`.  Discrete
choices (k-NN graphs, minimum density sampling indices) are recorded in the
caches and may be passed back in to freeze them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numba
import numpy as np

from . import geometry
from .nnkit import layers as L
from .nnkit.layers import BatchNorm, Conv2d, Linear, ParamStore, SNLinear

K_NEIGHBORS = 8
DROPOUT_RATE = 0.75
DISC_CHANNELS = (16, 32, 64, 128)


@dataclass(frozen=True)
class Profile:
    """Channel plan of every network; ``toy`` keeps the ratios at CPU scale."""

    name: str
    encoder_channels: Tuple[int, ...]
    encoder_mlp: int
    fold_widths: Tuple[int, ...]
    n_elements: int
    n_points: int
    render_size: int
    refiner_channels: Tuple[int, ...]  # blocks 1..7; block 4 takes blocks 1 and 3 concatenated
    k: int = K_NEIGHBORS

    @property
    def code_dim(self) -> int:
        return 2 * self.encoder_mlp


PROFILES = {
    "toy": Profile("toy", (32, 32, 64, 128), 256, (512, 256, 128), 8, 512, 64,
                   (8, 16, 128, 64, 32, 16, 3)),
    "full": Profile("full", (256, 256, 512, 1024), 2048, (4096, 2048, 1024), 32, 16384, 256,
                    (64, 128, 1024, 512, 256, 128, 3)),
}


def gate_width(c_out: int) -> int:
    return max(1, c_out // 16)


# ---------------------------------------------------------------- CAE block

@numba.njit(cache=True)
def _edge_forward(a, q, nbr, slope):
    """Max and sum over the k edges ``leaky(a_i + q_nbr)`` without materializing them."""
    bsz, m, c = a.shape
    k = nbr.shape[2]
    emax = np.empty_like(a)
    jmax = np.empty((bsz, m, c), dtype=np.int64)
    esum = np.zeros((bsz, c))
    for b in range(bsz):
        for i in range(m):
            for t in range(c):
                emax[b, i, t] = -np.inf
            for j in range(k):
                n = nbr[b, i, j]
                for t in range(c):
                    v = a[b, i, t] + q[b, n, t]
                    if v <= 0:
                        v = slope * v
                    esum[b, t] += v
                    if v > emax[b, i, t]:
                        emax[b, i, t] = v
                        jmax[b, i, t] = j
    return emax, jmax, esum


@numba.njit(cache=True)
def _edge_backward(a, q, nbr, jmax, dwin, dall, slope):
    """Edge gradients ``dwin`` on the winning edge plus ``dall`` on every edge,
    pulled through the LeakyReLU and split onto ``a`` (self) and ``q`` (neighbor)."""
    bsz, m, c = a.shape
    k = nbr.shape[2]
    da = np.zeros_like(a)
    dq = np.zeros_like(q)
    for b in range(bsz):
        for i in range(m):
            for j in range(k):
                n = nbr[b, i, j]
                for t in range(c):
                    g = dall[b, t]
                    if jmax[b, i, t] == j:
                        g += dwin[b, i, t]
                    if g == 0.0:
                        continue
                    if a[b, i, t] + q[b, n, t] <= 0:
                        g = slope * g
                    da[b, i, t] += g
                    dq[b, n, t] += g
    return da, dq


class CAE:
    """Channel-attentive EdgeConv.

    Edges ``F1(p_i, q_ij - p_i)`` (linear + LeakyReLU) are recalibrated by a
    sigmoid gate computed from the mean edge feature of each cloud, max-pooled
    over the k neighbors, passed through ReLU and added to a linear skip.
    """

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 rng: np.random.Generator, k: int = K_NEIGHBORS, skip: bool = True,
                 gate: bool = True, out_relu: bool = True):
        self.store = store
        self.name = name
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.gate_enabled = gate
        self.out_relu = out_relu
        self.f1 = Linear(store, f"{name}.f1", 2 * c_in, c_out, rng)
        if gate:
            hidden = gate_width(c_out)
            self.f2a = Linear(store, f"{name}.f2a", c_out, hidden, rng)
            self.f2b = Linear(store, f"{name}.f2b", hidden, c_out, rng)
        self.f3 = Linear(store, f"{name}.f3", c_in, c_out, rng) if skip else None

    def forward(self, p: np.ndarray, nbr: Optional[np.ndarray] = None):
        bsz, m, c = p.shape
        if c != self.c_in:
            raise ValueError(f"{self.name}: expected {self.c_in} channels, got {c}")
        if m <= self.k:
            raise ValueError(f"{self.name}: need more than k={self.k} points, got {m}")
        if nbr is None:
            nbr = geometry.knn_batched(p, self.k)
        w = self.store[self.f1.w]
        w_self, w_nbr = w[:c], w[c:]
        a = p @ (w_self - w_nbr) + self.store[self.f1.b]
        q = p @ w_nbr
        emax, jmax, esum = _edge_forward(a, q, nbr, L.LEAKY_SLOPE)
        emax = emax.astype(p.dtype, copy=False)
        gate_cache = None
        if self.gate_enabled:
            e_mean = (esum / (m * self.k)).astype(p.dtype)
            h, c1 = self.f2a.forward(e_mean)
            ha = L.leaky_relu(h)
            z, c2 = self.f2b.forward(ha)
            eta = L.sigmoid(z)
            # eta > 0, so gating commutes with the max over neighbors
            pooled = emax * eta[:, None, :]
            gate_cache = (h, c1, c2, eta)
        else:
            pooled = emax
        out = L.relu(pooled) if self.out_relu else pooled
        skip_cache = None
        if self.f3 is not None:
            s, skip_cache = self.f3.forward(p)
            out = out + s
        return out, (p, nbr, a, q, emax, jmax, pooled, gate_cache, skip_cache)

    def selections(self, cache) -> list:
        """Discrete choices of one forward pass: neighbor argmax and activation sign patterns."""
        p, nbr, a, q, emax, jmax, pooled, gate_cache, skip_cache = cache
        edge = a[:, :, None, :] + q[np.arange(len(q))[:, None, None], nbr]
        out = [jmax, edge > 0]
        if self.out_relu:
            out.append(pooled > 0)
        if gate_cache is not None:
            out.append(gate_cache[0] > 0)
        return out

    def backward(self, dout: np.ndarray, cache) -> np.ndarray:
        p, nbr, a, q, emax, jmax, pooled, gate_cache, skip_cache = cache
        bsz, m, c = p.shape
        k = nbr.shape[2]
        dpool = L.relu_backward(dout, pooled) if self.out_relu else dout
        if gate_cache is not None:
            h, c1, c2, eta = gate_cache
            deta = (dpool * emax).sum(axis=1)
            dwin = dpool * eta[:, None, :]
            dha = self.f2b.backward(L.sigmoid_backward(deta, eta), c2)
            de_mean = self.f2a.backward(L.leaky_relu_backward(dha, h), c1)
            dall = de_mean / (m * k)
        else:
            dwin = dpool
            dall = np.zeros((bsz, self.c_out))
        da, dq = _edge_backward(a, q, nbr, jmax, np.ascontiguousarray(dwin, dtype=a.dtype),
                                np.ascontiguousarray(dall, dtype=np.float64), L.LEAKY_SLOPE)
        w = self.store[self.f1.w]
        w_self, w_nbr = w[:c], w[c:]
        p2 = p.reshape(-1, c)
        ga = p2.T @ da.reshape(-1, self.c_out)
        gq = p2.T @ dq.reshape(-1, self.c_out)
        self.store.accumulate(self.f1.w, np.concatenate([ga, gq - ga]))
        self.store.accumulate(self.f1.b, da.reshape(-1, self.c_out).sum(axis=0))
        dp = da @ (w_self - w_nbr).T + dq @ w_nbr.T
        if self.f3 is not None:
            dp = dp + self.f3.backward(dout, skip_cache)
        return dp


# ---------------------------------------------------------------- encoder

class Encoder:
    """Four chained CAE blocks, concatenation, shared MLP-BN-ReLU, max || avg pooling."""

    def __init__(self, store: ParamStore, profile: Profile, rng: np.random.Generator,
                 prefix: str = "encoder", gate: bool = True):
        chans = profile.encoder_channels
        self.blocks = []
        c_prev = 3
        for i, c in enumerate(chans):
            self.blocks.append(CAE(store, f"{prefix}.cae{i + 1}", c_prev, c, rng, profile.k,
                                   skip=i > 0, gate=gate))
            c_prev = c
        self.mlp = Linear(store, f"{prefix}.mlp", sum(chans), profile.encoder_mlp, rng)
        self.bn = BatchNorm(store, f"{prefix}.bn", profile.encoder_mlp, affine=True)
        self.code_dim = profile.code_dim

    def forward(self, x: np.ndarray, training: bool = True, graphs=None):
        if x.shape[1] <= self.blocks[0].k:
            raise ValueError(f"encoder needs more than {self.blocks[0].k} points, got {x.shape[1]}")
        feats, caches = [], []
        h = x
        for i, block in enumerate(self.blocks):
            h, c = block.forward(h, None if graphs is None else graphs[i])
            feats.append(h)
            caches.append(c)
        cat = np.concatenate(feats, axis=2)
        z, c_mlp = self.mlp.forward(cat)
        zb, c_bn = self.bn.forward(z, training)
        act = L.relu(zb)
        imax = act.argmax(axis=1)[:, None, :]
        g = np.concatenate([np.take_along_axis(act, imax, axis=1)[:, 0], act.mean(axis=1)], axis=1)
        return g, (caches, [f.shape[2] for f in feats], c_mlp, c_bn, zb, act, imax)

    def graphs(self, cache):
        return [c[1] for c in cache[0]]

    def selections(self, cache) -> list:
        caches, _, _, _, zb, _, imax = cache
        out = [sel for blk, c in zip(self.blocks, caches) for sel in blk.selections(c)]
        return out + [zb > 0, imax]

    def backward(self, dg: np.ndarray, cache) -> np.ndarray:
        caches, widths, c_mlp, c_bn, zb, act, imax = cache
        half = dg.shape[1] // 2
        m = act.shape[1]
        dact = np.broadcast_to(dg[:, None, half:] / m, act.shape).copy()
        np.put_along_axis(dact, imax, np.take_along_axis(dact, imax, axis=1) + dg[:, None, :half], axis=1)
        dz = self.bn.backward(L.relu_backward(dact, zb), c_bn)
        dcat = self.mlp.backward(dz, c_mlp)
        splits = np.split(dcat, np.cumsum(widths)[:-1], axis=2)
        dh = None
        for i in reversed(range(len(self.blocks))):
            total = splits[i] if dh is None else splits[i] + dh
            dh = self.blocks[i].backward(total, caches[i])
        return dh


# ---------------------------------------------------------------- generator

class FoldLayer:
    """One folding layer of a surface element.

    ``style``: linear -> batch norm -> per-cloud ``gamma``/``beta`` from the shape
    code -> CAE.  ``concat``: linear -> batch norm with a learned affine -> ReLU,
    the plain MLP layer of a folding that sees the code only through its input.
    """

    def __init__(self, store, name, c_in, c_out, rng, k, mode, gate=True):
        self.mode = mode
        self.lin = Linear(store, f"{name}.lin", c_in, c_out, rng)
        self.bn = BatchNorm(store, f"{name}.bn", c_out, affine=(mode == "concat"))
        self.cae = CAE(store, f"{name}.cae", c_out, c_out, rng, k, gate=gate) if mode == "style" else None

    def forward(self, p, gamma=None, beta=None, training=True, nbr=None):
        h, c1 = self.lin.forward(p)
        hb, c2 = self.bn.forward(h, training)
        if self.cae is None:
            return L.relu(hb), (c1, c2, None, hb, None)
        h_out = gamma[:, None, :] * hb + beta[:, None, :]
        out, c3 = self.cae.forward(h_out, nbr)
        return out, (c1, c2, c3, hb, gamma)

    def selections(self, cache) -> list:
        if self.cae is None:
            return [cache[3] > 0]
        return self.cae.selections(cache[2])

    def backward(self, dout, cache):
        c1, c2, c3, hb, gamma = cache
        dgamma = dbeta = None
        if self.cae is None:
            dh_out = L.relu_backward(dout, hb)
        else:
            dh_out = self.cae.backward(dout, c3)
            dgamma = (dh_out * hb).sum(axis=1)
            dbeta = dh_out.sum(axis=1)
            dh_out = dh_out * gamma[:, None, :]
        dp = self.lin.backward(self.bn.backward(dh_out, c2), c1)
        return dp, dgamma, dbeta


class Generator:
    """K surface elements folded from unit-square samples.

    Every element owns its folding weights; the modulation projections from the
    shape code are shared by all elements.  Output is element-major: points
    ``[e*n, (e+1)*n)`` come from element ``e``.
    """

    def __init__(self, store: ParamStore, profile: Profile, rng: np.random.Generator,
                 mode: str = "style", widths: Optional[Sequence[int]] = None,
                 prefix: str = "generator", gate: bool = True):
        if mode not in ("style", "concat"):
            raise ValueError(f"unknown folding mode {mode!r}")
        self.mode = mode
        self.n_elements = profile.n_elements
        self.code_dim = profile.code_dim
        self.widths = tuple(widths or profile.fold_widths)
        self.gamma, self.beta = [], []
        if mode == "style":
            for i, c in enumerate(self.widths):
                g = Linear(store, f"{prefix}.fold{i + 1}.gamma", self.code_dim, c, rng)
                store.params[g.b][:] = 1.0
                self.gamma.append(g)
                self.beta.append(Linear(store, f"{prefix}.fold{i + 1}.beta", self.code_dim, c, rng))
        self.elements = []
        for e in range(self.n_elements):
            folds = []
            c_prev = 2 if mode == "style" else 2 + self.code_dim
            for i, c in enumerate(self.widths):
                folds.append(FoldLayer(store, f"{prefix}.elem{e}.fold{i + 1}", c_prev, c, rng,
                                       profile.k, mode, gate))
                c_prev = c
            out = Linear(store, f"{prefix}.elem{e}.out", c_prev, 3, rng)
            self.elements.append((folds, out))

    def forward(self, g: np.ndarray, n_points: int, uv: np.ndarray, training: bool = True, graphs=None):
        """``uv`` is ``(K, n, 2)``; returns ``(B, N, 3)``."""
        k = self.n_elements
        if n_points % k:
            raise ValueError(f"N={n_points} is not divisible by K={k}")
        n = n_points // k
        if uv.shape != (k, n, 2):
            raise ValueError(f"uv samples must have shape {(k, n, 2)}, got {uv.shape}")
        if g.shape[1] != self.code_dim:
            raise ValueError(f"shape code has {g.shape[1]} dims, modulation expects {self.code_dim}")
        bsz = g.shape[0]
        mods = []
        if self.mode == "style":
            for gl, bl in zip(self.gamma, self.beta):
                gm, cg = gl.forward(g)
                bt, cb = bl.forward(g)
                mods.append((gm, cg, bt, cb))
        outs, caches = [], []
        for e, (folds, out_lin) in enumerate(self.elements):
            base = np.broadcast_to(uv[e], (bsz, n, 2))
            if self.mode == "concat":
                h = np.concatenate([base, np.broadcast_to(g[:, None, :], (bsz, n, g.shape[1]))], axis=2)
            else:
                h = base
            fcaches = []
            for i, fold in enumerate(folds):
                gm = mods[i][0] if mods else None
                bt = mods[i][2] if mods else None
                nbr = None if graphs is None else graphs[e][i]
                h, c = fold.forward(h, gm, bt, training, nbr)
                fcaches.append(c)
            y, c_out = out_lin.forward(h)
            outs.append(y)
            caches.append((fcaches, c_out))
        return np.concatenate(outs, axis=1), (caches, mods, g.shape, n)

    def graphs(self, cache):
        return [[None if fc[2] is None else fc[2][1] for fc in fcaches] for fcaches, _ in cache[0]]

    def selections(self, cache) -> list:
        out = []
        for (folds, _), (fcaches, _) in zip(self.elements, cache[0]):
            for fold, fc in zip(folds, fcaches):
                out.extend(fold.selections(fc))
        return out

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        caches, mods, g_shape, n = cache
        dg = np.zeros(g_shape, dtype=dy.dtype)
        dmods = [[0.0, 0.0] for _ in self.widths]
        for e, ((folds, out_lin), (fcaches, c_out)) in enumerate(zip(self.elements, caches)):
            dh = out_lin.backward(dy[:, e * n:(e + 1) * n], c_out)
            for i in reversed(range(len(folds))):
                dh, dgm, dbt = folds[i].backward(dh, fcaches[i])
                if dgm is not None:
                    dmods[i][0] = dmods[i][0] + dgm
                    dmods[i][1] = dmods[i][1] + dbt
            if self.mode == "concat":
                dg += dh[:, :, 2:].sum(axis=1)
        if self.mode == "style":
            for (gm, cg, bt, cb), (dgm, dbt), gl, bl in zip(mods, dmods, self.gamma, self.beta):
                dg += gl.backward(dgm, cg) + bl.backward(dbt, cb)
        return dg


# ---------------------------------------------------------------- refiner

def flag_points(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Concatenate partial input (flag 0) ahead of generated points (flag 1)."""
    fx = np.concatenate([x, np.zeros(x.shape[:2] + (1,), dtype=x.dtype)], axis=2)
    fy = np.concatenate([y, np.ones(y.shape[:2] + (1,), dtype=y.dtype)], axis=2)
    return np.concatenate([fx, fy], axis=1)


class Refiner:
    """Minimum density sampling of input + previous points, then a residual CAE network."""

    def __init__(self, store: ParamStore, profile: Profile, rng: np.random.Generator,
                 prefix: str = "refiner", bandwidth: float = geometry.MDS_BANDWIDTH, gate: bool = True):
        ch = profile.refiner_channels
        if len(ch) != 7 or ch[-1] != 3:
            raise ValueError("refiner needs 7 blocks ending in 3 channels")
        self.bandwidth = bandwidth
        ins = [4, ch[0], ch[1], ch[0] + ch[2], ch[3], ch[4], ch[5]]
        self.blocks = []
        for i, (ci, co) in enumerate(zip(ins, ch)):
            last = i == 6
            self.blocks.append(CAE(store, f"{prefix}.cae{i + 1}", ci, co, rng, profile.k,
                                   gate=gate and not last, out_relu=not last))

    def sample(self, flagged: np.ndarray, n: int) -> np.ndarray:
        return np.stack([geometry.minimum_density_sampling(f, n, self.bandwidth) for f in flagged])

    def forward(self, y_prev: np.ndarray, x: np.ndarray, idx: Optional[np.ndarray] = None, graphs=None):
        if y_prev.shape[1] == 0 or x.shape[1] == 0:
            raise ValueError("refiner needs non-empty inputs")
        n = y_prev.shape[1]
        flagged = flag_points(x, y_prev)
        if idx is None:
            idx = self.sample(flagged, n)
        s = np.take_along_axis(flagged, idx[:, :, None], axis=1)
        feats, caches = [], []
        h = s
        for i, block in enumerate(self.blocks):
            if i == 3:
                h = np.concatenate([feats[0], feats[2]], axis=2)
            h, c = block.forward(h, None if graphs is None else graphs[i])
            feats.append(h)
            caches.append(c)
        return s[:, :, :3] + h, (idx, caches, x.shape[1], n, feats[0].shape[2])

    def graphs(self, cache):
        return [c[1] for c in cache[1]]

    def selections(self, cache) -> list:
        out = [cache[0]]
        for blk, c in zip(self.blocks, cache[1]):
            out.extend(blk.selections(c))
        return out

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        """Gradient with respect to ``y_prev`` (the partial input is data)."""
        idx, caches, m, n, w1 = cache
        b = self.blocks
        d = dy
        for i in (6, 5, 4):
            d = b[i].backward(d, caches[i])
        dcat = b[3].backward(d, caches[3])
        d = b[2].backward(dcat[:, :, w1:], caches[2])
        d = b[1].backward(d, caches[1]) + dcat[:, :, :w1]
        dh = b[0].backward(d, caches[0])
        ds = dh[:, :, :3] + dy
        dprev = np.zeros((dy.shape[0], n, 3), dtype=dy.dtype)
        for b in range(dy.shape[0]):
            sel = idx[b] >= m
            np.add.at(dprev[b], idx[b][sel] - m, ds[b][sel])
        return dprev


# ---------------------------------------------------------------- discriminator

class Discriminator:
    """Four spectrally normalized conv + LeakyReLU + dropout stages and a linear score."""

    def __init__(self, store: ParamStore, image_size: int, rng: np.random.Generator,
                 prefix: str = "discriminator", in_channels: int = 16,
                 channels: Sequence[int] = DISC_CHANNELS, dropout: float = DROPOUT_RATE):
        self.in_channels = in_channels
        self.dropout = dropout
        self.convs = []
        c_prev, size = in_channels, image_size
        for i, c in enumerate(channels):
            self.convs.append(Conv2d(store, f"{prefix}.conv{i + 1}", c_prev, c, rng, spectral=True))
            c_prev, size = c, Conv2d.output_size(size)
        self.feature_shapes = []
        self.fc = SNLinear(store, f"{prefix}.fc", c_prev * size * size, 1, rng, spectral=True)

    def power_iteration(self, n_iter: int = 1) -> None:
        for layer in L.iter_spectral(self.convs + [self.fc]):
            layer.power_iteration(n_iter)

    def forward(self, x: np.ndarray, training: bool = True, rng: Optional[np.random.Generator] = None):
        """Returns ``(scores (B,), [D1..D4], cache)``."""
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"discriminator expects {self.in_channels} input channels, got shape {x.shape}")
        feats, caches = [], []
        h = x
        for conv in self.convs:
            z, c = conv.forward(h)
            a = L.leaky_relu(z)
            feats.append(a)
            h, mask = L.dropout(a, self.dropout, rng, training)
            caches.append((c, z, mask))
        flat = h.reshape(h.shape[0], -1)
        score, c_fc = self.fc.forward(flat)
        return score[:, 0], feats, (caches, c_fc, h.shape)

    def selections(self, cache) -> list:
        return [z > 0 for _, z, _ in cache[0]]

    def backward(self, dscore: np.ndarray, cache, dfeats: Optional[List[np.ndarray]] = None) -> np.ndarray:
        caches, c_fc, h_shape = cache
        dh = self.fc.backward(dscore[:, None], c_fc).reshape(h_shape)
        for i in reversed(range(len(self.convs))):
            c, z, mask = caches[i]
            da = L.dropout_backward(dh, mask)
            if dfeats is not None and dfeats[i] is not None:
                da = da + dfeats[i]
            dh = self.convs[i].backward(L.leaky_relu_backward(da, z), c)
        return dh


# ---------------------------------------------------------------- full model

@dataclass
class Model:
    store: ParamStore
    profile: Profile
    encoder: Encoder
    generator: Generator
    refiner: Refiner
    discriminator: Discriminator
    folding: str = "style"

    GENERATOR_PREFIXES = ("encoder.", "generator.", "refiner.")
    DISCRIMINATOR_PREFIXES = ("discriminator.",)


def concat_param_count(profile: Profile, widths: Sequence[int]) -> int:
    """Generator parameters of a concat folding (linear + affine batch norm per layer, output linear)."""
    total, c_prev = 0, 2 + profile.code_dim
    for c in widths:
        total += c_prev * c + c + 2 * c
        c_prev = c
    return profile.n_elements * (total + 3 * c_prev + 3)


def concat_widths_matching(profile: Profile, seed: int = 0) -> Tuple[int, ...]:
    """Fold widths for concat folding whose generator parameter count best matches style folding."""
    store = ParamStore()
    Generator(store, profile, np.random.default_rng(seed), "style", profile.fold_widths)
    target = store.num_params("generator.")
    best, best_gap = profile.fold_widths, None
    for scale in np.linspace(0.5, 4.0, 141):
        widths = tuple(max(8, int(round(w * scale / 8)) * 8) for w in profile.fold_widths)
        gap = abs(concat_param_count(profile, widths) - target)
        if best_gap is None or gap < best_gap:
            best, best_gap = widths, gap
    return best


def build_model(profile: Profile, seed: int = 0, folding: str = "style", dtype=np.float64,
                gate: bool = True, fold_widths: Optional[Sequence[int]] = None) -> Model:
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    enc = Encoder(store, profile, rng, gate=gate)
    gen = Generator(store, profile, rng, folding, fold_widths, gate=gate)
    ref = Refiner(store, profile, rng, gate=gate)
    disc = Discriminator(store, profile.render_size, rng)
    return Model(store, profile, enc, gen, ref, disc, folding)
