import csv
import dataclasses

import numpy as np
import pytest

from pcompletion import pipeline as P
from pcompletion import render
from pcompletion.nnkit import load_checkpoint
from pcompletion.objectives import LossWeights

# 16 points per element keeps every CAE above k; 16x16 renders keep steps fast
SMALL = dict(profile="toy", n_points=128, render_size=16, batch_size=2, fold_widths=(16, 16, 16))


def _cfg(**kw):
    return P.TrainConfig(**{**SMALL, **kw})


@pytest.fixture(scope="module")
def data():
    return P.synthesize_dataset(["sphere", "box"], 2, 128, seed=3)


# ---- config

def test_defaults():
    cfg = P.TrainConfig()
    assert cfg.lr_d / cfg.lr_g == pytest.approx(4.0)
    assert cfg.adv_targets == ("r1",)
    assert cfg.weights == LossWeights()


def test_config_round_trip():
    cfg = _cfg(adv_targets=("r1", "r2"), milestones=(3, 5), weights=LossWeights(adv=5.0), gate=False)
    assert P.parse_config(P.format_config(cfg)) == cfg


def test_parse_config_syntax():
    cfg = P.parse_config("# run\nepochs = 3  # short\nadv_targets = r2\nw_adv = 0.2\ndisc_updates = false\n")
    assert cfg.epochs == 3 and cfg.adv_targets == ("r2",)
    assert cfg.weights.adv == 0.2 and cfg.disc_updates is False


@pytest.mark.parametrize("text", ["epochs = 3\nbogus = 1\n", "epochs three\n", "epochs = x\n",
                                  "gate = maybe\n", "adv_targets = r3\n", "profile = huge\n"])
def test_parse_config_errors(text):
    with pytest.raises(P.ConfigError):
        P.parse_config(text)


def test_milestones_scaling():
    assert P.TrainConfig(epochs=200).decay_milestones() == (100, 150)
    assert P.TrainConfig(epochs=20).decay_milestones() == (10, 15)
    cfg = P.TrainConfig(epochs=20)
    assert cfg.lr_at(9) == (1e-4, 4e-4)
    lo_g, lo_d = cfg.lr_at(10)
    assert lo_g == pytest.approx(1e-5, rel=1e-12) and lo_d == pytest.approx(4e-5, rel=1e-12)


# ---- data

def test_dataset_round_trip(tmp_path, data):
    P.save_dataset(data, tmp_path)
    back = P.load_dataset(tmp_path)
    assert sorted(s.name for s in back) == sorted(s.name for s in data)
    by_name = {s.name: s for s in back}
    for s in data:
        np.testing.assert_array_equal(by_name[s.name].gt, s.gt)
        assert by_name[s.name].category == s.category
        assert len(s.partial) <= len(s.gt) == 128


def test_load_dataset_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        P.load_dataset(tmp_path / "none")
    with pytest.raises(FileNotFoundError):
        P.load_dataset(tmp_path)


# ---- GAN batch

def test_gan_batch_structure():
    rng = np.random.default_rng(0)
    x, gt, cond = (rng.random((2, 8, 4, 4)) for _ in range(3))
    real, fake = P.build_gan_batch(x, gt, cond)
    assert real.shape[1] == fake.shape[1] == 16
    np.testing.assert_array_equal(real[:, 8:], fake[:, 8:])
    np.testing.assert_array_equal(real[:, 8:], x)
    same_real, same_fake = P.build_gan_batch(x, gt, gt)
    np.testing.assert_array_equal(same_real, same_fake)
    with pytest.raises(ValueError):
        P.build_gan_batch(x, gt, cond[:, :4])


# ---- training

def test_step_record_components(data):
    rec = P.Trainer(_cfg()).train_step(data[:2])
    assert set(rec.losses) == {"rec", "fd", "depth", "fea", "adv", "exp", "d_loss"}
    assert all(np.isfinite(v) for v in rec.losses.values())
    assert len(rec.csv_row()) == len(P.CSV_HEADER)


def test_training_deterministic(data):
    cfg = _cfg(epochs=1)
    _, a = P.train(data, cfg)
    _, b = P.train(data, cfg)
    assert [r.csv_row() for r in a] == [r.csv_row() for r in b]


def test_pure_reconstruction_never_renders_backward(data):
    cfg = _cfg(adv_targets=(), weights=LossWeights(adv=0.0, depth=0.0, fea=0.0), disc_updates=False)
    trainer = P.Trainer(cfg)
    before = {n: v.copy() for n, v in trainer.model.store.params.items() if n.startswith("discriminator.")}
    render.CALLS.clear()
    rec = trainer.train_step(data[:2])
    assert sum(render.CALLS.values()) == 0
    assert rec.losses["adv"] == rec.losses["depth"] == rec.losses["fea"] == rec.losses["d_loss"] == 0.0
    for n, v in before.items():
        np.testing.assert_array_equal(trainer.model.store.params[n], v)


def test_default_step_uses_renderer(data):
    render.CALLS.clear()
    P.Trainer(_cfg()).train_step(data[:2])
    assert render.CALLS["render_multiview_backward"] > 0


def test_parameter_partition(data):
    trainer = P.Trainer(_cfg(weights=LossWeights(rec=0.0, fd=0.0, exp=0.0, depth=0.0, fea=0.0)))
    store = trainer.model.store
    gen = [n for n in store.names() if n.startswith(P.Model.GENERATOR_PREFIXES)]
    disc = [n for n in store.names() if n.startswith(P.Model.DISCRIMINATOR_PREFIXES)]
    assert not set(gen) & set(disc)
    assert set(trainer.opt_g.names) == set(gen) and set(trainer.opt_d.names) == set(disc)


def test_zero_epochs_writes_initial_only(tmp_path, data):
    P.train(data, _cfg(epochs=0), tmp_path)
    assert sorted(p.name for p in tmp_path.glob("*.spnt")) == ["initial.spnt"]
    with open(tmp_path / "loss_curve.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows == [list(P.CSV_HEADER)]


def test_lr_drop_recorded(tmp_path, data):
    cfg = _cfg(epochs=2, milestones=(1,), checkpoint_every=1)
    _, records = P.train(data, cfg, tmp_path)
    lrs = [r.lr_g for r in records]
    assert lrs[0] == 1e-4 and lrs[-1] == pytest.approx(1e-5, rel=1e-12)
    assert lrs[0] / lrs[-1] == pytest.approx(10.0, rel=1e-12)
    names = sorted(p.name for p in tmp_path.glob("*.spnt"))
    assert names == ["epoch0001.spnt", "epoch0002.spnt", "final.spnt"]
    with open(tmp_path / "loss_curve.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(records)
    assert float(rows[-1]["lr_d"]) == pytest.approx(4e-5, rel=1e-12)


def test_empty_dataset():
    with pytest.raises(P.ConfigError):
        P.train([], _cfg())


# ---- evaluation

@pytest.fixture(scope="module")
def trained(tmp_path_factory, data):
    out = tmp_path_factory.mktemp("run")
    P.train(data, _cfg(epochs=1), out)
    return out


def test_load_model_reads_sidecar_config(trained):
    model, cfg = P.load_model(trained / "final.spnt")
    assert cfg.n_points == 128 and model.store.dtype == np.float64
    state = load_checkpoint(trained / "final.spnt")
    for name, value in state.items():
        np.testing.assert_array_equal(model.store.params.get(name, model.store.buffers.get(name)), value)


def test_load_model_profile_mismatch(trained):
    with pytest.raises(P.ConfigError):
        P.load_model(trained / "final.spnt", P.TrainConfig())


def test_evaluate_rows(trained, data):
    rows = P.evaluate(trained / "final.spnt", data)
    cats = {c for m, c, _ in rows if m == "cd"}
    assert cats == {"sphere", "box", "avg"}
    for metric in ("cd", "emd", "fpd"):
        vals = [v for m, _, v in rows if m == metric]
        assert len(vals) == 3 and all(np.isfinite(v) and v >= 0 for v in vals)
    assert not any(m in ("mmd", "consistency") for m, _, _ in rows)


def test_evaluate_optional_metrics(trained, data):
    rows = P.evaluate(trained / "final.spnt", data, gallery=[s.gt for s in data],
                      sequence=[s.partial for s in data[:3]])
    metrics = {m for m, _, _ in rows}
    assert {"mmd", "consistency", "fidelity"} <= metrics


def test_groundtruth_metrics_zero(data):
    rows = P.metric_rows([s.gt for s in data], data)
    for metric, _, value in rows:
        if metric in ("cd", "emd"):
            assert value == 0.0
        else:
            assert value < 1e-6


def test_write_report(tmp_path):
    P.write_report([("cd", "avg", 0.5)], tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == "metric,category,value\ncd,avg,0.5\n"


# ---- ablation plumbing

def test_adversarial_variants():
    v = P.adversarial_variants()
    assert [v[k]["adv_targets"] for k in ("adv_none", "adv_r1", "adv_r2", "adv_r1_r2")] == \
        [(), ("r1",), ("r2",), ("r1", "r2")]
    assert [v[f"w_adv_{w:g}"]["weights"].adv for w in (0, 0.1, 0.2, 5)] == [0, 0.1, 0.2, 5]


def test_ablation_run_writes_aligned_curves(tmp_path, data):
    base = _cfg(epochs=1)
    variants = {"style": {}, "concat": {"folding": "concat", "fold_widths": (16, 16, 16)}}
    out = P.ablation_run(base, variants, data, tmp_path / "ab.csv")
    assert [r.step for r in out["style"]] == [r.step for r in out["concat"]]
    with open(tmp_path / "ab_final.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["variant"] for r in rows} == {"style", "concat"}


def test_window_means():
    assert P.window_means([1, 2, 3, 4, 5], 2) == [1.5, 3.5]


def test_overfit_dataset_cycles_kinds():
    d = P.overfit_dataset(6, 64)
    assert [s.category for s in d][:5] == list(P.geometry.SHAPE_KINDS)
    assert all(len(s.gt) == 64 for s in d)
