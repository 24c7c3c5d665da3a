"""Training losses and evaluation metrics.

Loss functions that training differentiates return ``(value, grad)``;
metrics used only for evaluation return plain floats.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Sequence, Tuple

import numba
import numpy as np

from .geometry import pairwise_sq_dists

ORACLE_MAX = 512
EXPANSION_LAMBDA = 1.5


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    rec: float = 200.0
    fd: float = 0.5
    adv: float = 0.1
    depth: float = 1.0
    fea: float = 1.0
    exp: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise MetricError(f"loss weight {k} must be non-negative")


@dataclass
class Assignment:
    perm: np.ndarray  # perm[i] = index in B matched to A[i]
    total: float
    mean: float


def _cost_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijc,ijc->ij", diff, diff))


def _check_pair(a, b):
    if len(a) != len(b):
        raise MetricError(f"EMD needs equal sizes, got {len(a)} and {len(b)}")
    if len(a) == 0:
        raise MetricError("EMD of empty clouds")


# ---------------------------------------------------------------- EMD

@numba.njit(cache=True)
def _hungarian_kernel(cost):
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[j]: 1-based row matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    minv = np.empty(n + 1)
    used = np.empty(n + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv[:] = np.inf
        used[:] = False
        while True:
            used[j0] = True
            i0 = owner[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    perm = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        perm[owner[j] - 1] = j - 1
    return perm


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect matching of a square matrix (shortest augmenting paths).

    Returns ``perm`` with row ``i`` assigned to column ``perm[i]``.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise MetricError(f"cost matrix must be square, got {cost.shape}")
    return _hungarian_kernel(cost)


def emd_exact(a: np.ndarray, b: np.ndarray) -> Tuple[float, Assignment]:
    """Mean Euclidean transport distance under the optimal bijection."""
    _check_pair(a, b)
    if len(a) > ORACLE_MAX:
        raise MetricError(f"exact EMD is limited to {ORACLE_MAX} points, got {len(a)}")
    cost = _cost_matrix(a, b)
    perm = hungarian(cost)
    # fsum is correctly rounded, so the value does not depend on point order
    total = math.fsum(cost[np.arange(len(a)), perm])
    return total / len(a), Assignment(perm, total, total / len(a))


@numba.njit(cache=True)
def _auction_kernel(benefit, eps_start, eps_final, factor, max_bids):
    n = benefit.shape[0]
    price = np.zeros(n)
    person_of = np.empty(n, dtype=np.int64)
    object_of = np.empty(n, dtype=np.int64)
    queue = np.empty(n, dtype=np.int64)
    eps = eps_start
    bids = 0
    while True:
        person_of[:] = -1
        object_of[:] = -1
        for i in range(n):
            queue[i] = i
        head = 0
        count = n
        # Gauss-Seidel: one bidder at a time, FIFO over unassigned persons
        while count > 0:
            i = queue[head]
            head = (head + 1) % n
            count -= 1
            best_j = -1
            best_v = -np.inf
            second_v = -np.inf
            for j in range(n):
                val = benefit[i, j] - price[j]
                if val > best_v:
                    second_v = best_v
                    best_v = val
                    best_j = j
                elif val > second_v:
                    second_v = val
            if n == 1:
                second_v = best_v
            price[best_j] += best_v - second_v + eps
            prev = person_of[best_j]
            person_of[best_j] = i
            object_of[i] = best_j
            if prev >= 0:
                object_of[prev] = -1
                queue[(head + count) % n] = prev
                count += 1
            bids += 1
            if bids > max_bids:
                return object_of, False
        if eps <= eps_final:
            break
        eps = max(eps / factor, eps_final)
    return object_of, True


def auction(cost: np.ndarray, eps_final: float = None, factor: float = 5.0,
            max_bids: int = 200_000_000) -> np.ndarray:
    """Auction with epsilon scaling for the minimum-cost assignment.

    The final assignment's total cost is within ``n * eps_final`` of optimal;
    the default ``eps_final`` is ``1e-5`` of the cost span.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    n = cost.shape[0]
    span = float(cost.max() - cost.min())
    if span == 0.0:
        return np.arange(n)
    if eps_final is None:
        eps_final = 1e-5 * span
    perm, ok = _auction_kernel(-cost, max(span / 4.0, eps_final), eps_final, factor, max_bids)
    if not ok:
        raise MetricError(f"auction did not converge within {max_bids} bids at eps={eps_final:g}")
    return perm


def emd_approx(a: np.ndarray, b: np.ndarray, eps: float = None):
    """Auction-based EMD.  Returns ``(mean cost, Assignment, grad wrt a)``."""
    _check_pair(a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cost = _cost_matrix(a, b)
    perm = auction(cost, eps)
    n = len(a)
    matched = cost[np.arange(n), perm]
    total = float(matched.sum())
    diff = a - b[perm]
    safe = np.where(matched > 0, matched, 1.0)
    grad = np.where(matched[:, None] > 0, diff / (n * safe[:, None]), 0.0)
    return total / n, Assignment(perm, total, total / n), grad


def emd_with_grad(a: np.ndarray, b: np.ndarray, perm: np.ndarray):
    """Mean matched distance for a fixed assignment, with its gradient wrt ``a``."""
    a = np.asarray(a, dtype=np.float64)
    diff = a - np.asarray(b, dtype=np.float64)[perm]
    dist = np.sqrt((diff ** 2).sum(axis=1))
    n = len(a)
    safe = np.where(dist > 0, dist, 1.0)
    grad = np.where(dist[:, None] > 0, diff / (n * safe[:, None]), 0.0)
    return float(dist.mean()), grad


# ---------------------------------------------------------------- nearest-neighbor metrics

def _nn_sq(a: np.ndarray, b: np.ndarray):
    """For each point of ``a``: index of and squared distance to its nearest point in ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = (a ** 2).sum(1)[:, None] + (b ** 2).sum(1)[None, :] - 2.0 * a @ b.T
    idx = d.argmin(axis=1)
    diff = a - b[idx]
    return idx, (diff ** 2).sum(axis=1)


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean of squared nearest-neighbor distances, halved."""
    if len(a) == 0 or len(b) == 0:
        raise MetricError("chamfer distance of an empty cloud")
    _, dab = _nn_sq(a, b)
    _, dba = _nn_sq(b, a)
    return 0.5 * (dab.mean() + dba.mean())


def chamfer_with_grad(a: np.ndarray, b: np.ndarray):
    """Chamfer distance and its gradient with respect to ``a`` (matches frozen)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ia, dab = _nn_sq(a, b)
    ib, dba = _nn_sq(b, a)
    grad = (a - b[ia]) / len(a)
    np.add.at(grad, ib, (a[ib] - b) / len(b))
    return 0.5 * (dab.mean() + dba.mean()), grad


def fidelity(x: np.ndarray, y: np.ndarray):
    """Mean squared distance from each input point to its nearest output point.

    Returns ``(value, grad wrt y)``.
    """
    if len(x) == 0 or len(y) == 0:
        raise MetricError("fidelity of an empty cloud")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    idx, d = _nn_sq(x, y)
    grad = np.zeros_like(y)
    np.add.at(grad, idx, 2.0 * (y[idx] - x) / len(x))
    return float(d.mean()), grad


# ---------------------------------------------------------------- image-domain losses

def depth_l1(a: np.ndarray, b: np.ndarray):
    """``sum |a - b| / (8 H W)`` over one multi-view stack; returns ``(value, grad wrt a)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"depth map shapes differ: {a.shape} vs {b.shape}")
    norm = float(np.prod(a.shape[-3:]))
    lead = a.size / norm
    return float(np.abs(a - b).sum() / norm / lead), np.sign(a - b) / norm / lead


def feature_weights(channels: Sequence[int]) -> np.ndarray:
    c = np.asarray(channels, dtype=np.float64)
    return c / c.sum()


def feature_match(fake: List[np.ndarray], real: List[np.ndarray]):
    """Channel-weighted squared L2 between discriminator features.

    Features are ``(B, D_i, H_i, W_i)``; the batch is averaged.  Returns
    ``(value, [grad wrt fake_i])``.
    """
    if len(fake) != len(real):
        raise MetricError("feature lists differ in length")
    alphas = feature_weights([f.shape[1] for f in fake])
    total, grads = 0.0, []
    for alpha, f, r in zip(alphas, fake, real):
        if f.shape != r.shape:
            raise MetricError(f"feature shapes differ: {f.shape} vs {r.shape}")
        bsz = f.shape[0]
        size = float(np.prod(f.shape[1:]))
        diff = f - r
        total += alpha / size * float((diff ** 2).sum()) / bsz
        grads.append(2.0 * alpha / size * diff / bsz)
    return total, grads


def lsgan_losses(score_real: np.ndarray, score_fake: np.ndarray):
    """Least-squares GAN objectives (targets 1 real, 0 fake; generator target 1).

    Returns ``(d_loss, g_loss, d d_loss/d real, d d_loss/d fake, d g_loss/d fake)``.
    """
    sr = np.atleast_1d(np.asarray(score_real, dtype=np.float64))
    sf = np.atleast_1d(np.asarray(score_fake, dtype=np.float64))
    d_loss = 0.5 * (((sr - 1.0) ** 2).mean() + (sf ** 2).mean())
    g_loss = ((sf - 1.0) ** 2).mean()
    return (float(d_loss), float(g_loss), (sr - 1.0) / sr.size, sf / sf.size,
            2.0 * (sf - 1.0) / sf.size)


# ---------------------------------------------------------------- expansion

def minimum_spanning_tree(points: np.ndarray) -> np.ndarray:
    """Prim's algorithm on the complete Euclidean graph; returns ``(n-1, 2)`` edges."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    d = np.sqrt(pairwise_sq_dists(pts))
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = d[0].copy()
    parent = np.zeros(n, dtype=np.int64)
    edges = np.empty((n - 1, 2), dtype=np.int64)
    for t in range(n - 1):
        cand = np.where(in_tree, np.inf, best)
        j = int(np.argmin(cand))
        edges[t] = (parent[j], j)
        in_tree[j] = True
        closer = d[j] < best
        best = np.where(closer, d[j], best)
        parent = np.where(closer, j, parent)
    return edges


def expansion(groups: np.ndarray, lam: float = EXPANSION_LAMBDA, edges=None):
    """Penalty on unusually long minimum-spanning-tree edges within each surface element.

    ``groups`` is ``(K, n, 3)``.  Per group, tree edges at least ``lam`` times the
    mean tree edge length contribute their length; the sum is divided by
    ``K * n``.  Returns ``(value, grad)``; the tree topology is held fixed
    (pass ``edges``, one tree per group, to reuse a topology).
    """
    groups = np.asarray(groups, dtype=np.float64)
    k, n, _ = groups.shape
    if n < 2:
        raise MetricError("expansion loss needs at least 2 points per group")
    total = 0.0
    grad = np.zeros_like(groups)
    for g in range(k):
        pts = groups[g]
        tree = minimum_spanning_tree(pts) if edges is None else edges[g]
        vec = pts[tree[:, 0]] - pts[tree[:, 1]]
        length = np.sqrt((vec ** 2).sum(axis=1))
        long = length >= lam * length.mean()
        total += float(length[long].sum())
        safe = np.where(length > 0, length, 1.0)
        unit = np.where((long & (length > 0))[:, None], vec / safe[:, None], 0.0)
        np.add.at(grad[g], tree[:, 0], unit)
        np.add.at(grad[g], tree[:, 1], -unit)
    scale = 1.0 / (k * n)
    return total * scale, grad * scale


# ---------------------------------------------------------------- total loss

COMPONENTS = ("rec", "fd", "depth", "fea", "adv", "exp")


def total_loss(components: Mapping[str, float], weights: LossWeights = LossWeights()) -> float:
    out = 0.0
    for name in COMPONENTS:
        value = float(components.get(name, 0.0))
        if not math.isfinite(value):
            raise MetricError(f"non-finite loss component {name}={value}")
        out += getattr(weights, name) * value
    return out


# ---------------------------------------------------------------- distribution metrics

def gaussian_stats(feats: np.ndarray):
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    mu = feats.mean(axis=0)
    if feats.shape[0] < 2:
        # a single sample has no spread to estimate
        cov = np.zeros((feats.shape[1], feats.shape[1]))
    else:
        cov = np.atleast_2d(np.cov(feats, rowvar=False))
    if feats.shape[0] < feats.shape[1] + 1:
        cov = cov + 1e-6 * np.eye(cov.shape[0])
    return mu, cov


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    if mu_a.shape != mu_b.shape:
        raise MetricError(f"feature dimensions differ: {mu_a.shape} vs {mu_b.shape}")
    root_a = _sqrt_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_root = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_root)
    return max(value, 0.0)


def fpd(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between Gaussians fitted to two feature sets."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[1] != b.shape[1]:
        raise MetricError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    mu_a, cov_a = gaussian_stats(a)
    mu_b, cov_b = gaussian_stats(b)
    # average the two orderings so the value is symmetric to rounding
    return 0.5 * (frechet_distance(mu_a, cov_a, mu_b, cov_b) + frechet_distance(mu_b, cov_b, mu_a, cov_a))


def mmd(outputs: Sequence[np.ndarray], gallery: Sequence[np.ndarray]) -> float:
    """Mean over outputs of the Chamfer distance to the closest gallery cloud."""
    if len(gallery) == 0:
        raise MetricError("empty gallery")
    if len(outputs) == 0:
        raise MetricError("no outputs to score")
    return float(np.mean([min(chamfer(o, g) for g in gallery) for o in outputs]))


def temporal_consistency(frames: Sequence[np.ndarray]) -> float:
    """Mean Chamfer distance between consecutive frames."""
    if len(frames) < 2:
        raise MetricError("temporal consistency needs at least 2 frames")
    return float(np.mean([chamfer(a, b) for a, b in zip(frames[:-1], frames[1:])]))
