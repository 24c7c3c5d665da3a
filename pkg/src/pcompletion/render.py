"""Differentiable multi-view point-to-depth-map renderer.

Each point is projected with a pinhole camera placed on a corner of the cube
``[-1, 1]^3`` and splatted as a truncated Gaussian ``exp(-d^2 / 2 rho^2)``
weighted by its normalized negative depth; every pixel keeps the maximum
contribution (or 0).  The backward pass routes each pixel's gradient to the
point that won the maximum.
"""
from __future__ import annotations

import collections
import itertools
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numba
import numpy as np

# incremented by every backward call; lets tests prove a render path stayed inactive
CALLS: collections.Counter = collections.Counter()

CORNERS = np.array(list(itertools.product((-1.0, 1.0), repeat=3)))
FOV_DEG = 50.0


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    height: int = 256
    width: int = 256
    rho: float = 3.0
    truncation: Optional[float] = None  # pixels; defaults to 3 * rho

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise RenderError("render size must be at least 8x8")
        if self.rho <= 0:
            raise RenderError("rho must be positive")

    @property
    def cutoff(self) -> float:
        return 3.0 * self.rho if self.truncation is None else float(self.truncation)


@dataclass(frozen=True)
class Camera:
    center: np.ndarray
    rotation: np.ndarray  # rows: right, down, forward
    focal: float
    cx: float
    cy: float
    near: float = 1e-4

    @property
    def view_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = -self.rotation @ self.center
        return m


@dataclass
class Projected:
    px: np.ndarray
    py: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    cam: np.ndarray  # camera-space coordinates, (N, 3)


@dataclass
class RasterContext:
    winner: np.ndarray  # (H*W,) point index or -1
    kernel: np.ndarray  # (H*W,) kernel value of the winner
    shape: tuple


@dataclass
class ViewContext:
    camera: Camera
    proj: Projected
    values: np.ndarray  # per-point F (0 for masked points)
    zmin: float
    zmax: float
    raster: RasterContext


@dataclass
class DepthMapSet:
    maps: np.ndarray  # (8, H, W)
    contexts: List[ViewContext] = field(default_factory=list)
    n_points: int = 0


def camera_from_corner(idx: int, cfg: RenderConfig = RenderConfig()) -> Camera:
    if not 0 <= idx < 8:
        raise RenderError(f"view index must be in [0, 8), got {idx}")
    center = CORNERS[idx].copy()
    forward = -center / np.linalg.norm(center)
    up = np.array([0.0, 1.0, 0.0])
    if abs(forward @ up) > 0.99:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    focal = (cfg.height / 2.0) / math.tan(math.radians(FOV_DEG / 2.0))
    return Camera(center, np.stack([right, down, forward]), focal, cfg.width / 2.0, cfg.height / 2.0)


def project(points: np.ndarray, cam: Camera) -> Projected:
    pts = np.asarray(points, dtype=np.float64)[:, :3]
    cam_xyz = (pts - cam.center) @ cam.rotation.T
    z = cam_xyz[:, 2]
    mask = z > cam.near
    safe = np.where(mask, z, 1.0)
    px = cam.focal * cam_xyz[:, 0] / safe + cam.cx
    py = cam.focal * cam_xyz[:, 1] / safe + cam.cy
    return Projected(px, py, z, mask, cam_xyz)


def normalize_depth(depth: np.ndarray):
    """``F = 1 - (z - min) / (max - min)``; all ones for a constant depth.

    Returns ``(F, zmin, zmax)``.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.size == 0:
        raise RenderError("no visible points to normalize")
    zmin, zmax = float(depth.min()), float(depth.max())
    if zmax == zmin:
        return np.ones_like(depth), zmin, zmax
    return 1.0 - (depth - zmin) / (zmax - zmin), zmin, zmax


@numba.njit(cache=True)
def _splat_max(px, py, values, idx, height, width, rho, cut):
    n_pix = height * width
    image = np.zeros(n_pix)
    winner = np.full(n_pix, -1, dtype=np.int64)
    kernel = np.zeros(n_pix)
    r = int(np.ceil(cut)) + 1
    inv = 1.0 / (2.0 * rho * rho)
    cut2 = cut * cut
    # points in increasing index order with a strict comparison: ties keep the lowest index
    for t in range(idx.shape[0]):
        i = idx[t]
        bx = int(np.floor(px[i]))
        by = int(np.floor(py[i]))
        for ys in range(max(by - r, 0), min(by + r + 1, height)):
            dy = ys + 0.5 - py[i]
            for xs in range(max(bx - r, 0), min(bx + r + 1, width)):
                dx = xs + 0.5 - px[i]
                d2 = dx * dx + dy * dy
                if d2 > cut2:
                    continue
                psi = np.exp(-d2 * inv)
                val = psi * values[i]
                pix = ys * width + xs
                if val > image[pix]:
                    image[pix] = val
                    winner[pix] = i
                    kernel[pix] = psi
    return image, winner, kernel


def rasterize(px: np.ndarray, py: np.ndarray, values: np.ndarray, cfg: RenderConfig,
              mask: Optional[np.ndarray] = None):
    """Max-splat points with per-point values; returns ``(image, RasterContext)``."""
    idx = np.arange(len(px)) if mask is None else np.flatnonzero(mask)
    px = np.ascontiguousarray(px, dtype=np.float64)
    py = np.ascontiguousarray(py, dtype=np.float64)
    # points far outside the image cannot touch it; clip so floor() stays in integer range
    lim = 4.0 * (cfg.width + cfg.height + cfg.cutoff)
    px, py = np.clip(px, -lim, lim), np.clip(py, -lim, lim)
    image, winner, kernel = _splat_max(px, py, np.ascontiguousarray(values, dtype=np.float64),
                                       idx.astype(np.int64), cfg.height, cfg.width,
                                       float(cfg.rho), float(cfg.cutoff))
    return image.reshape(cfg.height, cfg.width), RasterContext(winner, kernel, (cfg.height, cfg.width))


def rasterize_backward(grad_map: np.ndarray, ctx: RasterContext, px: np.ndarray, py: np.ndarray,
                       values: np.ndarray, cfg: RenderConfig):
    """Subgradient of the max-splat: returns ``(dF, dpx, dpy)`` per point."""
    CALLS["rasterize_backward"] += 1
    if grad_map.shape != ctx.shape:
        raise RenderError(f"stale raster context: gradient {grad_map.shape} vs {ctx.shape}")
    n = len(px)
    g = grad_map.reshape(-1)
    pix = np.flatnonzero((ctx.winner >= 0) & (g != 0))
    w = ctx.winner[pix]
    gk = g[pix] * ctx.kernel[pix]
    ys, xs = np.divmod(pix, cfg.width)
    coef = gk * values[w] / cfg.rho ** 2
    d_f = np.bincount(w, weights=gk, minlength=n)
    d_px = np.bincount(w, weights=coef * (xs + 0.5 - px[w]), minlength=n)
    d_py = np.bincount(w, weights=coef * (ys + 0.5 - py[w]), minlength=n)
    return d_f, d_px, d_py


def render_view(points: np.ndarray, idx: int, cfg: RenderConfig,
                values: Optional[np.ndarray] = None):
    """One depth map (or feature map when ``values`` is given) from corner ``idx``."""
    cam = camera_from_corner(idx, cfg)
    proj = project(points, cam)
    full = np.zeros(len(proj.depth))
    zmin = zmax = 0.0
    if proj.mask.any():
        if values is None:
            f, zmin, zmax = normalize_depth(proj.depth[proj.mask])
            full[proj.mask] = f
        else:
            full = np.asarray(values, dtype=np.float64)
    image, raster = rasterize(proj.px, proj.py, full, cfg, proj.mask)
    return image, ViewContext(cam, proj, full, zmin, zmax, raster)


def render_multiview(points: np.ndarray, cfg: RenderConfig = RenderConfig()) -> DepthMapSet:
    """Eight depth maps, channel ``i`` seen from cube corner ``i``."""
    maps, ctxs = [], []
    for i in range(8):
        image, ctx = render_view(points, i, cfg)
        maps.append(image)
        ctxs.append(ctx)
    return DepthMapSet(np.stack(maps), ctxs, len(points))


def render_view_backward(grad_map: np.ndarray, ctx: ViewContext, cfg: RenderConfig) -> np.ndarray:
    proj = ctx.proj
    d_f, d_px, d_py = rasterize_backward(grad_map, ctx.raster, proj.px, proj.py, ctx.values, cfg)
    n = len(proj.depth)
    d_cam = np.zeros((n, 3))
    m = proj.mask
    z = proj.depth[m]
    f = ctx.camera.focal
    x_c, y_c = proj.cam[m, 0], proj.cam[m, 1]
    d_cam[m, 0] = d_px[m] * f / z
    d_cam[m, 1] = d_py[m] * f / z
    d_cam[m, 2] = -(d_px[m] * f * x_c + d_py[m] * f * y_c) / (z * z)
    if ctx.zmax > ctx.zmin:
        # min/max of the depth range are held constant
        d_cam[m, 2] += -d_f[m] / (ctx.zmax - ctx.zmin)
    return d_cam @ ctx.camera.rotation


def render_multiview_backward(grad: np.ndarray, depth_maps: DepthMapSet,
                              cfg: RenderConfig = RenderConfig()) -> np.ndarray:
    """Gradient of a loss on the 8 maps with respect to the point coordinates."""
    CALLS["render_multiview_backward"] += 1
    if grad.shape != depth_maps.maps.shape or len(depth_maps.contexts) != 8:
        raise RenderError(f"stale render context: gradient {grad.shape} vs {depth_maps.maps.shape}")
    out = np.zeros((depth_maps.n_points, 3))
    for i, ctx in enumerate(depth_maps.contexts):
        out += render_view_backward(grad[i], ctx, cfg)
    return out


# ---------------------------------------------------------------- PGM export

def write_pgm(image: np.ndarray, path) -> None:
    """16-bit binary PGM (P5, maxval 65535, big-endian), rows from the top."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise RenderError("PGM export needs a 2-D map")
    if not np.all((image >= 0.0) & (image <= 1.0)):
        raise RenderError("PGM export needs values in [0, 1]")
    samples = np.floor(image * 65535.0 + 0.5).astype(">u2")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(samples.tobytes())


def read_pgm(path) -> np.ndarray:
    """Inverse of :func:`write_pgm`; returns the raw 16-bit samples."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    pos += 1
    if tokens[0] != "P5" or tokens[3] != "65535":
        raise RenderError(f"{path}: not a 16-bit P5 PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[pos:pos + 2 * w * h], dtype=">u2").reshape(h, w).astype(np.int64)
