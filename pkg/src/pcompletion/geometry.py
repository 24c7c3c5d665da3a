"""Point-cloud IO, neighbor search, sampling and synthetic shapes.

Clouds are plain ``(N, 3)`` float arrays; flagged clouds carry a fourth
column holding 0 (partial input) or 1 (generated point).
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence, Tuple, Union

import numba
import numpy as np

SHAPE_KINDS = ("sphere", "box", "cylinder", "torus", "composite")
DEFAULT_RADIUS = 0.4
MDS_BANDWIDTH = 0.05


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------- IO

def _parse_xyz_lines(lines, source: str) -> np.ndarray:
    pts = []
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text:
            continue
        parts = text.split()
        if len(parts) != 3:
            raise GeometryError(f"{source}: line {lineno}: expected 3 numbers, got {len(parts)}")
        try:
            xyz = [float(p) for p in parts]
        except ValueError:
            raise GeometryError(f"{source}: line {lineno}: malformed number in {text!r}") from None
        if not all(math.isfinite(v) for v in xyz):
            raise GeometryError(f"{source}: line {lineno}: non-finite coordinate")
        pts.append(xyz)
    if not pts:
        raise GeometryError(f"{source}: zero points")
    return np.asarray(pts, dtype=np.float64)


def _read_ply(path: Path) -> np.ndarray:
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise GeometryError(f"{path}: not a PLY file")
    count, props, in_vertex, header_end = None, [], False, None
    for i, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise GeometryError(f"{path}: only ASCII PLY is supported")
        if tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            header_end = i
            break
    if header_end is None or count is None or not {"x", "y", "z"} <= set(props):
        raise GeometryError(f"{path}: PLY header lacks vertex x/y/z")
    cols = [props.index(a) for a in "xyz"]
    body = lines[header_end + 1:header_end + 1 + count]
    rows = []
    for j, line in enumerate(body, start=header_end + 2):
        vals = line.split()
        try:
            rows.append(" ".join(vals[c] for c in cols))
        except IndexError:
            raise GeometryError(f"{path}: line {j}: too few vertex properties") from None
    return _parse_xyz_lines(rows, str(path))


def load_xyz(path: Union[str, Path]) -> np.ndarray:
    """Read an ASCII ``x y z`` file (or ASCII PLY) into an ``(N, 3)`` array."""
    path = Path(path)
    if not path.is_file():
        raise GeometryError(f"{path}: no such file")
    if path.suffix.lower() == ".ply":
        return _read_ply(path)
    with path.open() as fh:
        return _parse_xyz_lines(fh, str(path))


def save_xyz(cloud: np.ndarray, path: Union[str, Path]) -> None:
    cloud = np.asarray(cloud, dtype=np.float64)
    with open(path, "w", newline="\n") as fh:
        for x, y, z in cloud[:, :3]:
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")


# ---------------------------------------------------------------- normalization

def normalize_to_ball(cloud: np.ndarray, radius: float = DEFAULT_RADIUS):
    """Center on the centroid and scale so the farthest point sits at ``radius``.

    Returns ``(normalized, centroid, scale)``; the input is recovered as
    ``normalized / scale + centroid``.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or len(cloud) == 0:
        raise GeometryError("cannot normalize an empty cloud")
    centroid = cloud.mean(axis=0)
    centered = cloud - centroid
    far = np.sqrt((centered ** 2).sum(axis=1)).max()
    scale = 1.0 if far == 0 else radius / far
    return centered * scale, centroid, scale


def denormalize(cloud: np.ndarray, centroid: np.ndarray, scale: float) -> np.ndarray:
    return np.asarray(cloud) / scale + centroid


# ---------------------------------------------------------------- neighbors

@numba.njit(cache=True)
def _sq_dists_exact(f):
    m, c = f.shape
    d = np.empty((m, m))
    for i in range(m):
        d[i, i] = 0.0
        for j in range(i + 1, m):
            acc = 0.0
            for t in range(c):
                diff = f[i, t] - f[j, t]
                acc += diff * diff
            d[i, j] = acc
            d[j, i] = acc
    return d


def pairwise_sq_dists(features: np.ndarray) -> np.ndarray:
    """Exact differences for narrow features, the Gram expansion for wide ones."""
    f = np.ascontiguousarray(features, dtype=np.float64)
    m, c = f.shape
    if c <= 16:
        return _sq_dists_exact(f)
    sq = np.einsum("ij,ij->i", f, f)
    return sq[:, None] + sq[None, :] - 2.0 * (f @ f.T)


@numba.njit(cache=True)
def _select_k(d, k):
    """Row-wise ``k`` smallest off-diagonal entries; equal values keep index order."""
    m = d.shape[0]
    out = np.empty((m, k), dtype=np.int64)
    best_d = np.empty(k)
    best_i = np.empty(k, dtype=np.int64)
    for i in range(m):
        filled = 0
        for j in range(m):
            if j == i:
                continue
            v = d[i, j]
            if filled == k and v >= best_d[k - 1]:
                continue
            pos = filled if filled < k else k - 1
            while pos > 0 and best_d[pos - 1] > v:
                if pos < k:
                    best_d[pos] = best_d[pos - 1]
                    best_i[pos] = best_i[pos - 1]
                pos -= 1
            best_d[pos] = v
            best_i[pos] = j
            if filled < k:
                filled += 1
        out[i] = best_i
    return out


def knn(features: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest other points per row, ties to the lower index."""
    features = np.asarray(features)
    m = features.shape[0]
    if k >= m:
        raise GeometryError(f"k={k} must be smaller than the number of points {m}")
    if k < 1:
        raise GeometryError("k must be positive")
    return _select_k(pairwise_sq_dists(features), k)


def knn_batched(features: np.ndarray, k: int) -> np.ndarray:
    """``(B, M, C)`` features to a ``(B, M, k)`` neighbor table."""
    return np.stack([knn(f, k) for f in features])


# ---------------------------------------------------------------- sampling

def sample_unit_square(n: int, mode: str = "grid", seed: int = 0) -> np.ndarray:
    """``n`` points in ``[0, 1]^2``: lattice cell centers (row-major) or seeded uniform."""
    if n < 1:
        raise GeometryError("need at least one sample")
    if mode == "grid":
        side = math.isqrt(n - 1) + 1
        idx = np.arange(n)
        return np.stack([(idx % side + 0.5) / side, (idx // side + 0.5) / side], axis=1)
    if mode in ("uniform", "seeded-uniform"):
        return np.random.default_rng(seed).random((n, 2))
    raise GeometryError(f"unknown sampling mode {mode!r}")


def minimum_density_sampling(points: np.ndarray, n: int,
                             bandwidth: float = MDS_BANDWIDTH) -> np.ndarray:
    """Greedy minimum-density subsampling on the xyz coordinates.

    Each round picks the unselected point whose Gaussian density with respect
    to the already-selected points is smallest; ties go to the lowest index.
    """
    pts = np.asarray(points, dtype=np.float64)[:, :3]
    count = len(pts)
    if n > count:
        raise GeometryError(f"cannot sample {n} points out of {count}")
    if n == count:
        return np.arange(count)
    return _mds_kernel(np.ascontiguousarray(pts), n, 1.0 / (2.0 * bandwidth * bandwidth))


@numba.njit(cache=True)
def _mds_kernel(pts, n, inv):
    count = pts.shape[0]
    density = np.zeros(count)
    taken = np.zeros(count, dtype=np.bool_)
    out = np.empty(n, dtype=np.int64)
    for t in range(n):
        best = -1
        for j in range(count):
            if not taken[j] and (best < 0 or density[j] < density[best]):
                best = j
        out[t] = best
        taken[best] = True
        for j in range(count):
            d2 = 0.0
            for c in range(3):
                diff = pts[j, c] - pts[best, c]
                d2 += diff * diff
            density[j] += np.exp(-d2 * inv)
    return out


# ---------------------------------------------------------------- synthetic shapes

def _sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _box(rng, n, dims=(1.0, 0.6, 0.4)):
    a, b, c = (d / 2 for d in dims)
    faces = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    which = rng.choice(6, size=n, p=faces / faces.sum())
    uv = rng.uniform(-1, 1, size=(n, 2))
    pts = np.empty((n, 3))
    half = np.array([a, b, c])
    for f in range(6):
        sel = which == f
        axis, sign = f // 2, 1.0 if f % 2 == 0 else -1.0
        others = [i for i in range(3) if i != axis]
        pts[sel, axis] = sign * half[axis]
        pts[sel, others[0]] = uv[sel, 0] * half[others[0]]
        pts[sel, others[1]] = uv[sel, 1] * half[others[1]]
    return pts


def _cylinder(rng, n, radius=0.5, height=1.2):
    side, cap = 2 * np.pi * radius * height, np.pi * radius ** 2
    which = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    r = np.where(which == 0, radius, radius * np.sqrt(rng.random(n)))
    y = np.where(which == 0, rng.uniform(-height / 2, height / 2, size=n),
                 np.where(which == 1, height / 2, -height / 2))
    return np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=1)


def _torus(rng, n, major=1.0, minor=0.35):
    out = np.empty((0, 3))
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        u = rng.uniform(0, 2 * np.pi, size=m)
        v = rng.uniform(0, 2 * np.pi, size=m)
        # area element is proportional to (R + r cos v)
        keep = rng.random(m) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        out = np.vstack([out, np.stack([ring * np.cos(u), minor * np.sin(v), ring * np.sin(u)], axis=1)])
    return out[:n]


def _composite(rng, n, top=(1.2, 0.12, 0.8), leg_h=0.8, leg_r=0.07):
    # table: a slab on four cylindrical legs, parts weighted by surface area
    tx, ty, tz = top
    slab_area = 2 * (tx * ty + tx * tz + ty * tz)
    leg_area = 2 * np.pi * leg_r * leg_h
    areas = np.array([slab_area] + [leg_area] * 4)
    counts = rng.multinomial(n, areas / areas.sum())
    parts = [_box(rng, counts[0], top) + np.array([0.0, leg_h / 2, 0.0])]
    for i, (sx, sz) in enumerate([(1, 1), (1, -1), (-1, 1), (-1, -1)]):
        c = counts[i + 1]
        theta = rng.uniform(0, 2 * np.pi, size=c)
        y = rng.uniform(-leg_h / 2, leg_h / 2, size=c)
        leg = np.stack([leg_r * np.cos(theta), y, leg_r * np.sin(theta)], axis=1)
        parts.append(leg + np.array([sx * (tx / 2 - 2 * leg_r), 0.0, sz * (tz / 2 - 2 * leg_r)]))
    pts = np.vstack(parts)
    return pts[rng.permutation(len(pts))]


def synth_shape(kind: str, n: int, seed: int = 0, jitter: bool = False) -> np.ndarray:
    """``n`` points uniformly on the surface of a primitive, scaled into the 0.4 ball.

    Shapes are built around their geometric center (the origin) and scaled so the
    farthest point lies at radius 0.4.  ``jitter`` varies the aspect ratios with
    the seed, which gives distinct instances within one category.
    """
    if kind not in SHAPE_KINDS:
        raise GeometryError(f"unknown shape kind {kind!r}; expected one of {', '.join(SHAPE_KINDS)}")
    if n < 1:
        raise GeometryError("need at least one point")
    rng = np.random.default_rng([seed, SHAPE_KINDS.index(kind)])
    scale = rng.uniform(0.75, 1.25, size=3) if jitter else np.ones(3)
    if kind == "sphere":
        pts = _sphere(rng, n)
        pts = pts * scale if jitter else pts
    elif kind == "box":
        pts = _box(rng, n, tuple(np.array([1.0, 0.6, 0.4]) * scale))
    elif kind == "cylinder":
        pts = _cylinder(rng, n, 0.5 * scale[0], 1.2 * scale[1])
    elif kind == "torus":
        pts = _torus(rng, n, 1.0, 0.35 * scale[0])
    else:
        pts = _composite(rng, n, top=(1.2 * scale[0], 0.12, 0.8 * scale[2]), leg_h=0.8 * scale[1])
        pts = pts - (pts.max(axis=0) + pts.min(axis=0)) / 2
    far = np.sqrt((pts ** 2).sum(axis=1)).max()
    return pts * (DEFAULT_RADIUS / far)


def _view_basis(view_dir: np.ndarray):
    d = np.asarray(view_dir, dtype=np.float64)
    d = d / np.linalg.norm(d)
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1)
    return d, e1, np.cross(d, e1)


def _view_cells(cloud, view_dir, grid, extent):
    d, e1, e2 = _view_basis(view_dir)
    a = np.clip(((cloud @ e1 + extent) / (2 * extent) * grid).astype(np.int64), 0, grid - 1)
    b = np.clip(((cloud @ e2 + extent) / (2 * extent) * grid).astype(np.int64), 0, grid - 1)
    return a * grid + b, cloud @ d


def partial_view(cloud: np.ndarray, view_dir: Sequence[float], grid: int = 64,
                 extent: float = 0.5) -> np.ndarray:
    """Keep the front-most point of each occupied cell of an orthographic z-buffer.

    The lattice covers the fixed square ``[-extent, extent]^2`` of the view
    plane (points beyond it clamp to border cells), so repeated culling along
    the same direction is idempotent.  Depth ties go to the lowest index.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    if len(cloud) == 0:
        raise GeometryError("cannot cull an empty cloud")
    cell, depth = _view_cells(cloud, view_dir, grid, extent)
    order = np.lexsort((np.arange(len(cloud)), depth, cell))
    first = np.ones(len(order), dtype=bool)
    first[1:] = cell[order[1:]] != cell[order[:-1]]
    keep = np.sort(order[first])
    return cloud[keep]


def visible_subset(cloud: np.ndarray, occluder: np.ndarray, view_dir: Sequence[float],
                   grid: int = 32, extent: float = 0.5, tol: float = None) -> np.ndarray:
    """Points of ``cloud`` lying on the front surface seen in ``occluder``'s z-buffer.

    A point survives when its depth is within ``tol`` (default one cell width)
    of the nearest occluder point in its cell; cells the occluder leaves empty
    keep nothing.  The result is a subset of ``cloud``.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    occluder = np.asarray(occluder, dtype=np.float64)
    tol = 2 * extent / grid if tol is None else tol
    front = np.full(grid * grid, np.inf)
    occ_cell, occ_depth = _view_cells(occluder, view_dir, grid, extent)
    np.minimum.at(front, occ_cell, occ_depth)
    cell, depth = _view_cells(cloud, view_dir, grid, extent)
    f = front[cell]
    return cloud[np.isfinite(f) & (depth <= f + tol)]


def random_view_direction(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def resample(cloud: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Exactly ``m`` points: a random subset, or all points plus random repeats."""
    n = len(cloud)
    if n >= m:
        idx = np.sort(rng.choice(n, size=m, replace=False))
    else:
        idx = np.concatenate([np.arange(n), rng.choice(n, size=m - n, replace=True)])
    return cloud[idx]


def make_pair(kind: str, n_points: int, seed: int, partial_points: int = None,
              grid: int = 32) -> Tuple[np.ndarray, np.ndarray]:
    """A ``(partial, groundtruth)`` pair for one synthetic instance.

    The partial cloud is the part of the groundtruth visible from a random
    direction, with occlusion decided by an 8x denser sampling of the same
    surface, resampled to ``partial_points`` (default ``n_points // 2``).
    """
    partial_points = n_points // 2 if partial_points is None else partial_points
    gt = synth_shape(kind, n_points, seed, jitter=True)
    # the dense cloud shares the jittered dimensions because the jitter draw comes first
    dense = synth_shape(kind, 8 * n_points, seed, jitter=True)
    rng = np.random.default_rng([seed, 7919])
    visible = visible_subset(gt, dense, random_view_direction(rng), grid=grid)
    if len(visible) == 0:
        raise GeometryError(f"{kind} instance {seed} has no visible points")
    return resample(visible, partial_points, rng), gt