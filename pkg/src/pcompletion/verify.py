"""Finite-difference verification of every hand-written backward pass.

Each check builds a small float64 instance, freezes the discrete choices
(neighbor graphs, sampling indices, dropout masks, max-splat winners) and
compares analytic gradients with central differences.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import objectives, render
from .networks import CAE, PROFILES, Discriminator, Encoder, FoldLayer, Generator, Refiner
from .nnkit import ParamStore, relative_error

FD_STEP = 1e-5
NETWORK_TOL = 1e-4
RENDER_TOL = 1e-3
LOSS_TOL = 1e-4
EXCLUSION_RADIUS = 1e-3


@dataclass
class CheckResult:
    name: str
    max_error: float
    threshold: float
    probed: int
    seconds: float
    excluded: int = 0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error < self.threshold)


def _fd_max_error(value: Callable[[], float], arr: np.ndarray, analytic: np.ndarray,
                  idx, step: float = FD_STEP) -> float:
    """Probe ``arr`` in place at flat indices ``idx``."""
    flat = arr.reshape(-1)
    if not np.shares_memory(flat, arr):
        raise ValueError("probed array must be contiguous")
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = value()
        flat[i] = orig - step
        fm = value()
        flat[i] = orig
        num = (fp - fm) / (2.0 * step)
        worst = max(worst, float(relative_error(analytic.reshape(-1)[i], num)))
    return worst


def _same(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _check_module(name: str, run, inputs: Dict[str, np.ndarray], store: ParamStore, prefix: str,
                  rng: np.random.Generator, per_tensor: int = 4, step: float = FD_STEP) -> CheckResult:
    """``run(backward)`` returns ``(loss, {input name: grad}, selections)`` from the live arrays.

    A probe counts only if neither perturbation changes a discrete selection
    (argmax choices, activation sign patterns); otherwise it is tallied as excluded.
    """
    t0 = time.time()
    store.zero_grad()
    _, g_in, base = run(True)
    targets = [(inputs[k], g_in[k]) for k in inputs]
    targets += [(store.params[n], store.grads[n].copy()) for n in store.names(prefix)]
    worst, probed, excluded = 0.0, 0, 0
    for arr, analytic in targets:
        flat = arr.reshape(-1)
        for i in rng.choice(arr.size, size=min(per_tensor, arr.size), replace=False):
            orig = flat[i]
            flat[i] = orig + step
            fp, _, sel_p = run(False)
            flat[i] = orig - step
            fm, _, sel_m = run(False)
            flat[i] = orig
            if not (_same(sel_p, base) and _same(sel_m, base)):
                excluded += 1
                continue
            num = (fp - fm) / (2.0 * step)
            worst = max(worst, float(relative_error(analytic.reshape(-1)[i], num)))
            probed += 1
    return CheckResult(name, worst, NETWORK_TOL, probed, time.time() - t0, excluded)


def _toy(**changes):
    return dataclasses.replace(PROFILES["toy"], **changes)


# ---------------------------------------------------------------- networks

def check_cae(seed: int = 0, gate: bool = True) -> CheckResult:
    rng = np.random.default_rng(seed)
    store = ParamStore(np.float64)
    cae = CAE(store, "cae", 32, 32, rng, k=8, gate=gate)
    p = rng.normal(size=(2, 24, 32))
    w = rng.normal(size=(2, 24, 32))
    _, cache = cae.forward(p)
    nbr = cache[1]

    def run(backward):
        out, c = cae.forward(p, nbr)
        grads = {"p": cae.backward(w, c)} if backward else {}
        return float((out * w).sum()), grads, cae.selections(c)

    return _check_module("cae" if gate else "cae (no gate)", run, {"p": p}, store, "cae.", rng)


def check_style_fold(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    store = ParamStore(np.float64)
    fold = FoldLayer(store, "fold", 2, 64, rng, 8, "style")
    p = rng.random((2, 16, 2))
    gamma = 1.0 + 0.3 * rng.normal(size=(2, 64))
    beta = 0.3 * rng.normal(size=(2, 64))
    w = rng.normal(size=(2, 16, 64))
    _, cache = fold.forward(p, gamma, beta, True)
    nbr = cache[2][1]

    def run(backward):
        out, c = fold.forward(p, gamma, beta, True, nbr)
        grads = {}
        if backward:
            dp, dg, db = fold.backward(w, c)
            grads = {"p": dp, "gamma": dg, "beta": db}
        return float((out * w).sum()), grads, fold.selections(c)

    return _check_module("style fold", run, {"p": p, "gamma": gamma, "beta": beta}, store, "fold.", rng)


def check_encoder(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    store = ParamStore(np.float64)
    enc = Encoder(store, _toy(), rng)
    x = rng.normal(size=(2, 32, 3)) * 0.3
    w = rng.normal(size=(2, enc.code_dim))
    _, cache = enc.forward(x, True)
    graphs = enc.graphs(cache)

    def run(backward):
        g, c = enc.forward(x, True, graphs)
        return float((g * w).sum()), {"x": enc.backward(w, c)} if backward else {}, enc.selections(c)

    return _check_module("encoder", run, {"x": x}, store, "encoder.", rng, per_tensor=3)


def check_generator(seed: int = 0, mode: str = "style") -> CheckResult:
    rng = np.random.default_rng(seed)
    store = ParamStore(np.float64)
    prof = _toy()
    gen = Generator(store, prof, rng, mode)
    n_points = 16 * prof.n_elements
    uv = rng.random((prof.n_elements, 16, 2))
    g = rng.normal(size=(2, prof.code_dim))
    w = rng.normal(size=(2, n_points, 3))
    _, cache = gen.forward(g, n_points, uv, True)
    graphs = gen.graphs(cache)

    def run(backward):
        y, c = gen.forward(g, n_points, uv, True, graphs)
        return float((y * w).sum()), {"g": gen.backward(w, c)} if backward else {}, gen.selections(c)

    return _check_module(f"generator ({mode})", run, {"g": g}, store, "generator.", rng, per_tensor=1)


def check_refiner(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    store = ParamStore(np.float64)
    ref = Refiner(store, _toy(), rng)
    x = rng.normal(size=(2, 24, 3)) * 0.3
    y = rng.normal(size=(2, 48, 3)) * 0.3
    w = rng.normal(size=(2, 48, 3))
    _, cache = ref.forward(y, x)
    idx, graphs = cache[0], ref.graphs(cache)

    def run(backward):
        out, c = ref.forward(y, x, idx, graphs)
        return float((out * w).sum()), {"y": ref.backward(w, c)} if backward else {}, ref.selections(c)

    return _check_module("refiner", run, {"y": y}, store, "refiner.", rng)


def check_discriminator(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    store = ParamStore(np.float64)
    disc = Discriminator(store, 32, rng)
    disc.power_iteration(5)
    x = rng.random((2, 16, 32, 32))
    w_score = rng.normal(size=2)
    w_feats = None

    def run(backward):
        nonlocal w_feats
        score, feats, c = disc.forward(x, True, np.random.default_rng(seed + 1))
        if w_feats is None:
            w_feats = [rng.normal(size=f.shape) for f in feats]
        loss = float(score @ w_score) + sum(float((f * wf).sum()) for f, wf in zip(feats, w_feats))
        return loss, {"x": disc.backward(w_score, c, w_feats)} if backward else {}, disc.selections(c)

    run(False)
    return _check_module("discriminator", run, {"x": x}, store, "discriminator.", rng)


def network_checks(seed: int = 0) -> List[CheckResult]:
    return [check_cae(seed), check_cae(seed, gate=False), check_style_fold(seed), check_encoder(seed),
            check_generator(seed), check_generator(seed, "concat"), check_refiner(seed),
            check_discriminator(seed)]


# ---------------------------------------------------------------- losses

def _loss_check(name, fn, x, rng, count=None, tol=LOSS_TOL) -> CheckResult:
    t0 = time.time()
    _, analytic = fn(x)
    idx = range(x.size) if count is None else rng.choice(x.size, size=min(count, x.size), replace=False)
    err = _fd_max_error(lambda: fn(x)[0], x, np.asarray(analytic), idx)
    return CheckResult(name, err, tol, len(idx), time.time() - t0)


def loss_checks(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(40, 3))
    b = rng.normal(size=(40, 3))
    x = rng.normal(size=(25, 3))
    perm = objectives.emd_exact(a, b)[1].perm
    groups = rng.normal(size=(4, 12, 3))
    edges = [objectives.minimum_spanning_tree(gr) for gr in groups]
    maps_b = rng.random((2, 8, 8, 8))
    fake = [rng.normal(size=(2, c, 4, 4)) for c in (4, 8)]
    real = [rng.normal(size=f.shape) for f in fake]
    out = [
        _loss_check("emd (fixed matching)", lambda z: objectives.emd_with_grad(z, b, perm), a.copy(), rng),
        _loss_check("chamfer", lambda z: objectives.chamfer_with_grad(z, b), a.copy(), rng),
        _loss_check("fidelity", lambda z: objectives.fidelity(x, z), a.copy(), rng),
        _loss_check("expansion (fixed trees)",
                    lambda z: objectives.expansion(z, edges=edges), groups.copy(), rng),
        _loss_check("depth l1", lambda z: objectives.depth_l1(z, maps_b), rng.random((2, 8, 8, 8)), rng, 60),
    ]
    fake0 = fake[0].copy()
    out.append(_loss_check("feature matching",
                           lambda z: (lambda v: (v[0], v[1][0]))(objectives.feature_match([z, fake[1]], real)),
                           fake0, rng, 60))
    sf = rng.normal(size=6)
    out.append(_loss_check("lsgan generator", lambda z: objectives.lsgan_losses(np.ones(6), z)[1::3],
                           sf.copy(), rng))
    return out


# ---------------------------------------------------------------- renderer

def _visible_extrema(ctx: render.ViewContext):
    idx = np.flatnonzero(ctx.proj.mask)
    if not len(idx):
        return -1, -1
    z = ctx.proj.depth[idx]
    return int(idx[np.argmin(z)]), int(idx[np.argmax(z)])


def _signature(points, cfg):
    dm = render.render_multiview(points, cfg)
    return dm, [c.raster.winner for c in dm.contexts], [_visible_extrema(c) for c in dm.contexts]


def renderer_check(n_clouds: int = 20, n_points: int = 32, size: int = 32, rho: float = 3.0,
                   seed: int = 0, step: float = FD_STEP, radius: float = EXCLUSION_RADIUS) -> CheckResult:
    """Multi-view renderer gradients against central differences.

    A coordinate is excluded when moving it by ``radius`` either way changes any
    max-splat winner or which points hold the depth extrema, or when its point
    is itself a depth extremum (the depth range is held constant in backward).
    """
    t0 = time.time()
    cfg = render.RenderConfig(size, size, rho)
    rng = np.random.default_rng(seed)
    worst, probed, excluded = 0.0, 0, 0
    for _ in range(n_clouds):
        pts = rng.uniform(-0.5, 0.5, size=(n_points, 3))
        w = rng.normal(size=(8, size, size))
        dm, winners, extrema = _signature(pts, cfg)
        analytic = render.render_multiview_backward(w, dm, cfg)
        on_extremum = {i for pair in extrema for i in pair}

        def value():
            return float((render.render_multiview(pts, cfg).maps * w).sum())

        keep = []
        for flat in range(pts.size):
            i, d = divmod(flat, 3)
            stable = i not in on_extremum
            for sign in (1.0, -1.0):
                if not stable:
                    break
                moved = pts.copy()
                moved[i, d] += sign * radius
                _, win2, ext2 = _signature(moved, cfg)
                stable = ext2 == extrema and all(np.array_equal(a, b) for a, b in zip(win2, winners))
            if stable:
                keep.append(flat)
            else:
                excluded += 1
        worst = max(worst, _fd_max_error(value, pts, analytic, keep, step))
        probed += len(keep)
    return CheckResult("renderer", worst, RENDER_TOL, probed, time.time() - t0, excluded)


SCOPES = ("renderer", "networks", "losses", "all")


def run_scope(scope: str, seed: int = 0) -> List[CheckResult]:
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {', '.join(SCOPES)}")
    out: List[CheckResult] = []
    if scope in ("renderer", "all"):
        out.append(renderer_check(seed=seed))
    if scope in ("networks", "all"):
        out.extend(network_checks(seed))
    if scope in ("losses", "all"):
        out.extend(loss_checks(seed))
    return out


def format_table(results: List[CheckResult]) -> str:
    lines = [f"{'check':<24} {'max rel err':>12} {'threshold':>10} {'probed':>7} {'excluded':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<24} {r.max_error:12.3e} {r.threshold:10.1e} {r.probed:7d} {r.excluded:8d}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
