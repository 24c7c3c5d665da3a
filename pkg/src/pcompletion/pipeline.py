"""Training, evaluation and ablation orchestration."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import geometry, objectives, render
from .networks import PROFILES, Model, Profile, build_model, concat_widths_matching
from .nnkit import Adam, load_checkpoint, save_checkpoint
from .objectives import LossWeights

log = logging.getLogger(__name__)

ADV_TARGETS = ("r1", "r2")
CSV_HEADER = ("step", "rec", "fd", "depth", "fea", "adv", "exp", "total", "d_loss", "lr_g", "lr_d")
CONFIG_NAME = "config.txt"
DEFAULT_MILESTONES = (100, 150)
FULL_SCHEDULE_EPOCHS = 200


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    profile: str = "toy"
    n_points: Optional[int] = None  # defaults to the profile's N
    partial_points: Optional[int] = None  # defaults to N / 2
    batch_size: int = 4
    epochs: int = 10
    max_steps: Optional[int] = None
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    milestones: Optional[Tuple[int, ...]] = None  # defaults to 100, 150 (scaled below 200 epochs)
    weights: LossWeights = field(default_factory=LossWeights)
    adv_targets: Tuple[str, ...] = ("r1",)
    seed: int = 0
    folding: str = "style"
    gate: bool = True
    fold_widths: Optional[Tuple[int, ...]] = None
    disc_updates: bool = True
    checkpoint_every: int = 0
    render_size: Optional[int] = None
    rho: float = 3.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        if self.folding not in ("style", "concat"):
            raise ConfigError(f"unknown folding mode {self.folding!r}")
        bad = set(self.adv_targets) - set(ADV_TARGETS)
        if bad:
            raise ConfigError(f"adversarial targets must be drawn from r1, r2; got {sorted(bad)}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be positive and epochs non-negative")

    @property
    def spec(self) -> Profile:
        base = PROFILES[self.profile]
        changes = {}
        if self.n_points is not None:
            changes["n_points"] = self.n_points
        if self.render_size is not None:
            changes["render_size"] = self.render_size
        return dataclasses.replace(base, **changes) if changes else base

    @property
    def n_partial(self) -> int:
        return self.partial_points or self.spec.n_points // 2

    def decay_milestones(self) -> Tuple[int, ...]:
        if self.milestones is not None:
            return tuple(self.milestones)
        if self.epochs >= FULL_SCHEDULE_EPOCHS:
            return DEFAULT_MILESTONES
        return (int(round(0.5 * self.epochs)), int(round(0.75 * self.epochs)))

    def lr_at(self, epoch: int) -> Tuple[float, float]:
        drops = sum(epoch >= m for m in self.decay_milestones())
        return self.lr_g * 0.1 ** drops, self.lr_d * 0.1 ** drops

    def render_config(self) -> render.RenderConfig:
        size = self.spec.render_size
        return render.RenderConfig(size, size, self.rho)


# ---------------------------------------------------------------- config files

_WEIGHT_KEYS = {f"w_{f.name}": f.name for f in fields(LossWeights)}


def _parse_bool(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ConfigError(f"expected true/false, got {text!r}")


def _parse_list(text: str, conv=str) -> Tuple:
    text = text.strip()
    if text in ("", "none"):
        return ()
    return tuple(conv(t.strip()) for t in text.split(","))


def parse_config(text: str) -> TrainConfig:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    kwargs, weights = {}, {}
    types = {f.name: f for f in fields(TrainConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in _WEIGHT_KEYS:
                weights[_WEIGHT_KEYS[key]] = float(value)
            elif key in ("adv_targets",):
                kwargs[key] = _parse_list(value)
            elif key in ("milestones", "fold_widths"):
                kwargs[key] = _parse_list(value, int) or None
            elif key in ("gate", "disc_updates"):
                kwargs[key] = _parse_bool(value)
            elif key in ("profile", "folding", "dtype"):
                kwargs[key] = value
            elif key in ("lr_g", "lr_d", "rho"):
                kwargs[key] = float(value)
            elif key in types and key != "weights":
                kwargs[key] = None if value == "none" else int(value)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
    return TrainConfig(weights=LossWeights(**weights), **kwargs)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        value = getattr(cfg, f.name)
        if f.name == "weights":
            for wk, attr in _WEIGHT_KEYS.items():
                lines.append(f"{wk} = {getattr(value, attr)!r}")
            continue
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, tuple):
            text = ",".join(str(v) for v in value) or "none"
        elif value is None:
            text = "none"
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------- data

@dataclass
class Sample:
    partial: np.ndarray
    gt: np.ndarray
    category: str
    name: str = ""


def synthesize_dataset(shapes: Sequence[str], per_shape: int, n_points: int, seed: int = 0,
                       partial_points: Optional[int] = None) -> List[Sample]:
    out = []
    for kind in shapes:
        for i in range(per_shape):
            inst = seed * 100_003 + i
            partial, gt = geometry.make_pair(kind, n_points, inst, partial_points)
            out.append(Sample(partial, gt, kind, f"{kind}_{i:03d}"))
    return out


def save_dataset(samples: Sequence[Sample], root) -> None:
    root = Path(root)
    for s in samples:
        d = root / s.category
        d.mkdir(parents=True, exist_ok=True)
        geometry.save_xyz(s.partial, d / f"{s.name}.partial.xyz")
        geometry.save_xyz(s.gt, d / f"{s.name}.gt.xyz")


def load_dataset(root) -> List[Sample]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: no such dataset directory")
    out = []
    for gt_path in sorted(root.glob("*/*.gt.xyz")):
        name = gt_path.name[: -len(".gt.xyz")]
        partial_path = gt_path.with_name(f"{name}.partial.xyz")
        if not partial_path.exists():
            raise FileNotFoundError(f"{partial_path}: missing partial cloud for {gt_path.name}")
        out.append(Sample(geometry.load_xyz(partial_path), geometry.load_xyz(gt_path),
                          gt_path.parent.name, name))
    if not out:
        raise FileNotFoundError(f"{root}: dataset is empty")
    return out


def load_cloud_dir(root) -> List[np.ndarray]:
    """Every ``.xyz`` file of a directory, in name order."""
    paths = sorted(Path(root).glob("*.xyz"))
    if not paths:
        raise FileNotFoundError(f"{root}: no .xyz files")
    return [geometry.load_xyz(p) for p in paths]


def stack_batch(samples: Sequence[Sample], n_points: int, n_partial: int, dtype) -> Tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for s in samples:
        if len(s.gt) != n_points:
            raise ConfigError(f"{s.name}: groundtruth has {len(s.gt)} points, model expects {n_points}")
        x = s.partial
        if len(x) != n_partial:
            x = geometry.resample(x, n_partial, np.random.default_rng(0))
        xs.append(x)
        ys.append(s.gt)
    return np.asarray(xs, dtype=dtype), np.asarray(ys, dtype=dtype)


# ---------------------------------------------------------------- model plumbing

def make_model(cfg: TrainConfig) -> Model:
    widths = cfg.fold_widths
    if widths is None and cfg.folding == "concat":
        widths = concat_widths_matching(cfg.spec)
    return build_model(cfg.spec, cfg.seed, cfg.folding, np.dtype(cfg.dtype), cfg.gate, widths)


def uv_samples(model: Model, n_points: int, mode: str, seed=0) -> np.ndarray:
    k = model.generator.n_elements
    n = n_points // k
    if mode == "grid":
        return np.broadcast_to(geometry.sample_unit_square(n, "grid"), (k, n, 2)).copy()
    rng_seed = np.random.default_rng(seed).integers(0, 2 ** 31)
    return np.stack([geometry.sample_unit_square(n, "uniform", int(rng_seed) + e) for e in range(k)])


def complete(model: Model, x: np.ndarray, n_points: int, training: bool = False, uv=None):
    """Run encoder, generator and both refiner passes; returns ``(Y_c, Y_r1, Y_r2)``."""
    x = np.asarray(x, dtype=model.store.dtype)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if uv is None:
        uv = uv_samples(model, n_points, "grid")
    uv = uv.astype(model.store.dtype)
    g, _ = model.encoder.forward(x, training)
    yc, _ = model.generator.forward(g, n_points, uv, training)
    y1, _ = model.refiner.forward(yc, x)
    y2, _ = model.refiner.forward(y1, x)
    if squeeze:
        return yc[0], y1[0], y2[0]
    return yc, y1, y2


class RenderCache:
    """Multi-view renders of fixed clouds (inputs and groundtruth), keyed by sample."""

    def __init__(self, cfg: render.RenderConfig):
        self.cfg = cfg
        self._maps: Dict[Tuple[str, str], np.ndarray] = {}

    def get(self, key: Tuple[str, str], cloud: np.ndarray) -> np.ndarray:
        if key not in self._maps:
            self._maps[key] = render.render_multiview(cloud, self.cfg).maps
        return self._maps[key]


def build_gan_batch(x_maps: np.ndarray, gt_maps: np.ndarray, cond_maps: np.ndarray):
    """Real = [pi(Y_gt) | pi(X)], fake = [pi(Y_cond) | pi(X)] along channels."""
    if not (x_maps.shape == gt_maps.shape == cond_maps.shape):
        raise ValueError(f"render shapes differ: {x_maps.shape}, {gt_maps.shape}, {cond_maps.shape}")
    axis = x_maps.ndim - 3
    return (np.concatenate([gt_maps, x_maps], axis=axis),
            np.concatenate([cond_maps, x_maps], axis=axis))


# ---------------------------------------------------------------- training

@dataclass
class StepRecord:
    step: int
    losses: Dict[str, float]  # the six weighted components and d_loss
    total: float
    emd: float  # EMD(Y, Y_gt), batch mean
    lr_g: float
    lr_d: float

    def csv_row(self) -> List:
        l = self.losses
        return [self.step, l["rec"], l["fd"], l["depth"], l["fea"], l["adv"], l["exp"],
                self.total, l["d_loss"], self.lr_g, self.lr_d]


class Trainer:
    """Holds the model, both optimizers and the render cache for a training run."""

    def __init__(self, cfg: TrainConfig, model: Optional[Model] = None):
        self.cfg = cfg
        self.model = model or make_model(cfg)
        store = self.model.store
        self.opt_g = Adam(store, Model.GENERATOR_PREFIXES, cfg.lr_g)
        self.opt_d = Adam(store, Model.DISCRIMINATOR_PREFIXES, cfg.lr_d)
        self.rcfg = cfg.render_config()
        self.cache = RenderCache(self.rcfg)
        self.step_count = 0

    def set_lr(self, lr_g: float, lr_d: float) -> None:
        self.opt_g.lr, self.opt_d.lr = lr_g, lr_d

    def _renders_needed(self):
        w = self.cfg.weights
        need_r1 = w.depth > 0 or w.fea > 0 or "r1" in self.cfg.adv_targets
        need_r2 = "r2" in self.cfg.adv_targets
        use_disc = w.fea > 0 or (w.adv > 0 and self.cfg.adv_targets)
        return need_r1, need_r2, use_disc

    def train_step(self, samples: Sequence[Sample]) -> StepRecord:
        cfg, model = self.cfg, self.model
        spec = cfg.spec
        dt = model.store.dtype
        w = cfg.weights
        step = self.step_count
        n_pts = spec.n_points
        x, ygt = stack_batch(samples, n_pts, cfg.n_partial, dt)
        bsz = len(samples)
        disc = model.discriminator
        disc.power_iteration()

        uv = uv_samples(model, n_pts, "uniform", seed=[cfg.seed, step]).astype(dt)
        g, c_enc = model.encoder.forward(x, True)
        yc, c_gen = model.generator.forward(g, n_pts, uv, True)
        y1, c_r1 = model.refiner.forward(yc, x)
        y2, c_r2 = model.refiner.forward(y1, x)

        d_yc = np.zeros(yc.shape)
        d_y1 = np.zeros(y1.shape)
        d_y2 = np.zeros(y2.shape)
        rec = fd = exp_l = emd_final = 0.0
        k = model.generator.n_elements
        for b in range(bsz):
            ec, _, gc = objectives.emd_approx(yc[b], ygt[b], _train_eps(ygt[b]))
            e2, _, g2 = objectives.emd_approx(y2[b], ygt[b], _train_eps(ygt[b]))
            f, gf = objectives.fidelity(x[b], y2[b])
            ex, gx = objectives.expansion(yc[b].reshape(k, -1, 3))
            rec += (ec + e2) / bsz
            fd += f / bsz
            exp_l += ex / bsz
            emd_final += e2 / bsz
            d_yc[b] += (w.rec * gc + w.exp * gx.reshape(-1, 3)) / bsz
            d_y2[b] += (w.rec * g2 + w.fd * gf) / bsz

        depth = fea = adv = d_loss = 0.0
        need_r1, need_r2, use_disc = self._renders_needed()
        if need_r1 or need_r2:
            x_maps = np.stack([self.cache.get((s.name, "x"), xi) for s, xi in zip(samples, x)])
            gt_maps = np.stack([self.cache.get((s.name, "gt"), yi) for s, yi in zip(samples, ygt)])
            r1 = [render.render_multiview(c, self.rcfg) for c in y1] if need_r1 else None
            r2 = [render.render_multiview(c, self.rcfg) for c in y2] if need_r2 else None
            dmaps = {"r1": np.zeros((bsz, 8) + x_maps.shape[2:]), "r2": np.zeros((bsz, 8) + x_maps.shape[2:])}
            maps = {"r1": np.stack([r.maps for r in r1]) if r1 else None,
                    "r2": np.stack([r.maps for r in r2]) if r2 else None}
            if w.depth > 0:
                depth, gd = objectives.depth_l1(maps["r1"], gt_maps)
                dmaps["r1"] += w.depth * gd
            if use_disc:
                real_in, _ = build_gan_batch(x_maps, gt_maps, gt_maps)
                _, real_feats, _ = disc.forward(real_in.astype(dt), True, _drop_rng(cfg.seed, step, 0))
                targets = [t for t in ("r1",) if w.fea > 0] + [t for t in cfg.adv_targets if w.adv > 0]
                for t in dict.fromkeys(targets):
                    _, fake_in = build_gan_batch(x_maps, gt_maps, maps[t])
                    score, feats, c_d = disc.forward(fake_in.astype(dt), True, _drop_rng(cfg.seed, step, 1))
                    dscore = np.zeros(bsz)
                    dfeats = None
                    if t == "r1" and w.fea > 0:
                        fea, gfe = objectives.feature_match(feats, real_feats)
                        dfeats = [w.fea * gi for gi in gfe]
                    if t in cfg.adv_targets and w.adv > 0:
                        _, g_loss, _, _, dg = objectives.lsgan_losses(np.ones(bsz), score)
                        adv += g_loss / len(cfg.adv_targets)
                        dscore = w.adv * dg / len(cfg.adv_targets)
                    dfeats = [None if d is None else d.astype(dt) for d in (dfeats or [None] * 4)]
                    d_in = disc.backward(dscore.astype(dt), c_d, dfeats)
                    dmaps[t] += d_in[:, :8]
            if need_r1:
                for b in range(bsz):
                    if np.any(dmaps["r1"][b]):
                        d_y1[b] += render.render_multiview_backward(dmaps["r1"][b], r1[b], self.rcfg)
            if need_r2:
                for b in range(bsz):
                    if np.any(dmaps["r2"][b]):
                        d_y2[b] += render.render_multiview_backward(dmaps["r2"][b], r2[b], self.rcfg)

        components = {"rec": rec, "fd": fd, "depth": depth, "fea": fea, "adv": adv, "exp": exp_l}
        try:
            total = objectives.total_loss(components, w)
        except objectives.MetricError as exc:
            raise TrainingError(f"step {step}: {exc}; components={components}") from None

        self.opt_g.zero_grad()
        d_y1 = d_y1 + model.refiner.backward(d_y2.astype(dt), c_r2)
        d_yc = d_yc + model.refiner.backward(d_y1.astype(dt), c_r1)
        dg = model.generator.backward(d_yc.astype(dt), c_gen)
        model.encoder.backward(dg, c_enc)
        _check_finite(model.store, Model.GENERATOR_PREFIXES, step)
        self.opt_g.step()

        if cfg.disc_updates and cfg.adv_targets and (need_r1 or need_r2):
            self.opt_d.zero_grad()
            real_in, _ = build_gan_batch(x_maps, gt_maps, gt_maps)
            for t in cfg.adv_targets:
                _, fake_in = build_gan_batch(x_maps, gt_maps, maps[t])
                rng_r, rng_f = _drop_rng(cfg.seed, step, 2), _drop_rng(cfg.seed, step, 3)
                s_real, _, c_real = disc.forward(real_in.astype(dt), True, rng_r)
                s_fake, _, c_fake = disc.forward(fake_in.astype(dt), True, rng_f)
                dl, _, d_real, d_fake, _ = objectives.lsgan_losses(s_real, s_fake)
                scale = 1.0 / len(cfg.adv_targets)
                d_loss += dl * scale
                disc.backward((d_real * scale).astype(dt), c_real)
                disc.backward((d_fake * scale).astype(dt), c_fake)
            _check_finite(model.store, Model.DISCRIMINATOR_PREFIXES, step)
            self.opt_d.step()

        self.step_count += 1
        losses = dict(components, d_loss=d_loss)
        return StepRecord(step, losses, total, emd_final, self.opt_g.lr, self.opt_d.lr)


def _train_eps(gt: np.ndarray) -> float:
    # auction slack: 1e-4 of the cloud diameter keeps the matching within 0.01% of optimal
    return 1e-4 * float(2 * np.sqrt((np.asarray(gt, float) ** 2).sum(axis=1).max()) or 1.0)


def _drop_rng(seed: int, step: int, call: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, call, 17])


def _check_finite(store, prefixes, step):
    for name in store.names():
        if name.startswith(prefixes) and not np.all(np.isfinite(store.grads[name])):
            raise TrainingError(f"step {step}: non-finite gradient in {name}")


def train(dataset: Sequence[Sample], cfg: TrainConfig, out_dir=None,
          progress=None) -> Tuple[Trainer, List[StepRecord]]:
    """Epoch loop with milestone decay, checkpointing and a loss-curve CSV."""
    if not dataset:
        raise ConfigError("dataset is empty")
    trainer = Trainer(cfg)
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / CONFIG_NAME).write_text(format_config(cfg))
        fh = open(out / "loss_curve.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        if cfg.epochs == 0:
            save_checkpoint(trainer.model.store.state(), out / "initial.spnt")
    records: List[StepRecord] = []
    order_rng = np.random.default_rng([cfg.seed, 99])
    try:
        for epoch in range(cfg.epochs):
            trainer.set_lr(*cfg.lr_at(epoch))
            order = order_rng.permutation(len(dataset))
            for start in range(0, len(order), cfg.batch_size):
                if cfg.max_steps is not None and trainer.step_count >= cfg.max_steps:
                    break
                batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
                rec = trainer.train_step(batch)
                records.append(rec)
                if writer is not None:
                    writer.writerow(rec.csv_row())
                if progress is not None:
                    progress(rec)
            if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(trainer.model.store.state(), out / f"epoch{epoch + 1:04d}.spnt")
            if cfg.max_steps is not None and trainer.step_count >= cfg.max_steps:
                break
        if out is not None and cfg.epochs > 0:
            save_checkpoint(trainer.model.store.state(), out / "final.spnt")
    finally:
        if fh is not None:
            fh.close()
    return trainer, records


# ---------------------------------------------------------------- evaluation

def load_model(ckpt_path, cfg: Optional[TrainConfig] = None) -> Tuple[Model, TrainConfig]:
    """Rebuild the model described by the run's config file and load its weights."""
    ckpt_path = Path(ckpt_path)
    if cfg is None:
        cfg_path = ckpt_path.parent / CONFIG_NAME
        cfg = load_config(cfg_path) if cfg_path.exists() else TrainConfig()
    cfg = dataclasses.replace(cfg, dtype="float64")
    state = load_checkpoint(ckpt_path)
    model = make_model(cfg)
    try:
        model.store.load_state(state)
    except ValueError as exc:
        raise ConfigError(f"checkpoint does not match the {cfg.profile} profile: {exc}") from None
    return model, cfg


_FEATURE_NET = {}


def point_features(clouds: Sequence[np.ndarray], seed: int = 2021) -> np.ndarray:
    """Embeddings from a frozen, randomly initialized toy encoder (fixed seed)."""
    if seed not in _FEATURE_NET:
        _FEATURE_NET[seed] = build_model(PROFILES["toy"], seed).encoder
    enc = _FEATURE_NET[seed]
    return np.concatenate([enc.forward(np.asarray(c, np.float64)[None], training=False)[0] for c in clouds])


def metric_rows(preds: Sequence[np.ndarray], samples: Sequence[Sample]) -> List[Tuple[str, str, float]]:
    """CD, EMD and FPD per category plus ``avg`` rows."""
    by_cat: Dict[str, List[int]] = {}
    for i, s in enumerate(samples):
        by_cat.setdefault(s.category, []).append(i)
    cd = [objectives.chamfer(p, s.gt) for p, s in zip(preds, samples)]
    emd = []
    for p, s in zip(preds, samples):
        if len(p) <= objectives.ORACLE_MAX:
            emd.append(objectives.emd_exact(p, s.gt)[0])
        else:
            emd.append(objectives.emd_approx(p, s.gt)[0])
    fp = point_features(preds)
    fg = point_features([s.gt for s in samples])
    rows = []
    for cat in sorted(by_cat):
        idx = by_cat[cat]
        rows.append(("cd", cat, float(np.mean([cd[i] for i in idx]))))
        rows.append(("emd", cat, float(np.mean([emd[i] for i in idx]))))
        rows.append(("fpd", cat, objectives.fpd(fp[idx], fg[idx])))
    rows.append(("cd", "avg", float(np.mean(cd))))
    rows.append(("emd", "avg", float(np.mean(emd))))
    rows.append(("fpd", "avg", objectives.fpd(fp, fg)))
    return rows


def evaluate(ckpt_path, dataset: Sequence[Sample], gallery=None, sequence=None,
             cfg: Optional[TrainConfig] = None) -> List[Tuple[str, str, float]]:
    model, cfg = load_model(ckpt_path, cfg)
    n = cfg.spec.n_points
    preds = []
    for s in dataset:
        if len(s.gt) != n:
            raise ConfigError(f"{s.name}: groundtruth has {len(s.gt)} points, checkpoint produces {n}")
        x = s.partial if len(s.partial) == cfg.n_partial else geometry.resample(
            s.partial, cfg.n_partial, np.random.default_rng(0))
        preds.append(complete(model, x, n)[2])
    rows = metric_rows(preds, dataset)
    if gallery is not None:
        rows.append(("mmd", "avg", objectives.mmd(preds, gallery)))
    if sequence is not None:
        outs = [complete(model, geometry.resample(f, cfg.n_partial, np.random.default_rng(0))
                         if len(f) != cfg.n_partial else f, n)[2] for f in sequence]
        rows.append(("consistency", "avg", objectives.temporal_consistency(outs)))
        rows.append(("fidelity", "avg", float(np.mean([objectives.fidelity(f, o)[0]
                                                        for f, o in zip(sequence, outs)]))))
    return rows


def write_report(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("metric", "category", "value"))
        for metric, cat, value in rows:
            w.writerow((metric, cat, f"{value:.9g}"))


# ---------------------------------------------------------------- ablations

def ablation_run(base: TrainConfig, variants: Dict[str, Dict], dataset: Sequence[Sample],
                 out_path=None, progress=None) -> Dict[str, List[StepRecord]]:
    """Train each variant of ``base`` on the same data and seed.

    Writes one CSV with aligned per-step curves (``variant,step,...``) and,
    alongside it, final metrics per variant.
    """
    results: Dict[str, List[StepRecord]] = {}
    finals = []
    for name, overrides in variants.items():
        cfg = dataclasses.replace(base, **overrides)
        trainer, records = train(dataset, cfg, progress=progress)
        results[name] = records
        preds = [complete(trainer.model, s.partial if len(s.partial) == cfg.n_partial else
                          geometry.resample(s.partial, cfg.n_partial, np.random.default_rng(0)),
                          cfg.spec.n_points)[2].astype(np.float64) for s in dataset]
        for metric, cat, value in metric_rows(preds, dataset):
            if cat == "avg":
                finals.append((name, metric, value))
        finals.append((name, "params", float(trainer.model.store.num_params("generator."))))
    if out_path is not None:
        out_path = Path(out_path)
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("variant",) + CSV_HEADER + ("emd",))
            for name, records in results.items():
                for r in records:
                    w.writerow([name] + r.csv_row() + [r.emd])
        with open(out_path.with_name(out_path.stem + "_final.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("variant", "metric", "value"))
            for row in finals:
                w.writerow(row)
    return results


def adversarial_variants(weights: Iterable[float] = (0.0, 0.1, 0.2, 5.0)) -> Dict[str, Dict]:
    """Adversarial-target subsets plus the adversarial weight sweep."""
    out = {
        "adv_none": {"adv_targets": ()},
        "adv_r1": {"adv_targets": ("r1",)},
        "adv_r2": {"adv_targets": ("r2",)},
        "adv_r1_r2": {"adv_targets": ("r1", "r2")},
    }
    for wa in weights:
        out[f"w_adv_{wa:g}"] = {"weights": dataclasses.replace(LossWeights(), adv=wa)}
    return out


# ---------------------------------------------------------------- desk-scale overfit

def overfit_dataset(n_shapes: int = 8, n_points: int = 512, seed: int = 17) -> List[Sample]:
    """``n_shapes`` synthetic pairs cycling through the shape kinds."""
    kinds = geometry.SHAPE_KINDS
    out = []
    for i in range(n_shapes):
        kind = kinds[i % len(kinds)]
        partial, gt = geometry.make_pair(kind, n_points, seed * 1000 + i)
        out.append(Sample(partial, gt, kind, f"{kind}_{i:03d}"))
    return out


def overfit_config(folding: str = "style", steps: int = 2000, batch_size: int = 4, seed: int = 17,
                   n_shapes: int = 8, **overrides) -> TrainConfig:
    """Toy-profile config that stops after ``steps`` updates; decay at 50% and 75% of the epochs."""
    epochs = -(-steps * batch_size // n_shapes)
    return TrainConfig(profile="toy", batch_size=batch_size, epochs=epochs, max_steps=steps, seed=seed,
                       folding=folding, milestones=(round(0.5 * epochs), round(0.75 * epochs)),
                       **overrides)


def dataset_emd(model: Model, dataset: Sequence[Sample], cfg: TrainConfig) -> float:
    """Mean exact EMD of the final output over ``dataset``, batch statistics as in training."""
    n = cfg.spec.n_points
    uv = uv_samples(model, n, "grid")
    vals = []
    for start in range(0, len(dataset), cfg.batch_size):
        batch = dataset[start:start + cfg.batch_size]
        x, ygt = stack_batch(batch, n, cfg.n_partial, model.store.dtype)
        _, _, y2 = complete(model, x, n, training=True, uv=uv)
        for yb, gb in zip(y2, ygt):
            vals.append(objectives.emd_exact(yb, gb)[0] if n <= objectives.ORACLE_MAX
                        else objectives.emd_approx(yb, gb)[0])
    return float(np.mean(vals))


@dataclass
class OverfitResult:
    records: List[StepRecord]
    emd_start: float
    emd_end: float
    n_params: int


def overfit_run(cfg: TrainConfig, dataset: Sequence[Sample], progress=None, out_dir=None) -> OverfitResult:
    """Train on a fixed small set, measuring dataset EMD before the first and after the last step."""
    model = make_model(cfg)
    start = dataset_emd(model, dataset, cfg)
    # train() builds its own identically seeded model, so the measurement pass above leaves it untouched
    trainer, records = train(dataset, cfg, out_dir=out_dir, progress=progress)
    end = dataset_emd(trainer.model, dataset, cfg)
    return OverfitResult(records, start, end, trainer.model.store.num_params("generator."))


def window_means(values: Sequence[float], window: int) -> List[float]:
    values = np.asarray(values, dtype=np.float64)
    return [float(values[i:i + window].mean()) for i in range(0, len(values) - window + 1, window)]
