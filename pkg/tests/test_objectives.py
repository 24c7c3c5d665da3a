import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from pcompletion import objectives as O


def _cloud(seed, n):
    return np.random.default_rng(seed).normal(size=(n, 3))


# ---- EMD

def test_emd_single_pair():
    v, asg = O.emd_exact(np.zeros((1, 3)), np.array([[1.0, 0, 0]]))
    assert v == 1.0 and asg.perm.tolist() == [0]


def test_emd_identity():
    a = _cloud(0, 30)
    v, asg = O.emd_exact(a, a)
    assert v == 0.0
    np.testing.assert_array_equal(asg.perm, np.arange(30))
    assert O.emd_approx(a, a)[0] == 0.0


def test_emd_size_mismatch():
    with pytest.raises(O.MetricError):
        O.emd_exact(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(O.MetricError):
        O.emd_exact(np.zeros((0, 3)), np.zeros((0, 3)))


@pytest.mark.parametrize("seed", range(10))
def test_hungarian_matches_scipy(seed):
    cost = np.random.default_rng(seed).random((40, 40))
    perm = O.hungarian(cost)
    r, c = linear_sum_assignment(cost)
    assert cost[np.arange(40), perm].sum() == pytest.approx(cost[r, c].sum(), abs=1e-12)
    assert sorted(perm.tolist()) == list(range(40))


def test_hungarian_brute_force_small():
    rng = np.random.default_rng(5)
    for _ in range(20):
        cost = rng.random((5, 5))
        best = min(sum(cost[i, p[i]] for i in range(5)) for p in itertools.permutations(range(5)))
        perm = O.hungarian(cost)
        assert cost[np.arange(5), perm].sum() == pytest.approx(best, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40))
def test_emd_symmetry_and_permutation(seed, n):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    v = O.emd_exact(a, b)[0]
    assert O.emd_exact(b, a)[0] == pytest.approx(v, rel=1e-12)
    pa, pb = rng.permutation(n), rng.permutation(n)
    assert O.emd_exact(a[pa], b[pb])[0] == pytest.approx(v, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 64))
def test_auction_near_optimal(seed, n):
    rng = np.random.default_rng(seed)
    a, b = rng.random((n, 3)), rng.random((n, 3))
    exact = O.emd_exact(a, b)[0]
    approx, asg, _ = O.emd_approx(a, b)
    assert sorted(asg.perm.tolist()) == list(range(n))
    assert approx >= exact - 1e-12
    assert approx <= exact * 1.01 + 1e-12


def test_emd_approx_gradient_direction():
    a = np.array([[0.0, 0, 0]])
    b = np.array([[2.0, 0, 0]])
    _, _, g = O.emd_approx(a, b)
    np.testing.assert_allclose(g, [[-1.0, 0, 0]])


def test_emd_with_grad_matches_fd():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    perm = rng.permutation(6)
    _, g = O.emd_with_grad(a, b, perm)
    h = 1e-6
    for i, c in itertools.product(range(6), range(3)):
        ap, am = a.copy(), a.copy()
        ap[i, c] += h
        am[i, c] -= h
        fd = (O.emd_with_grad(ap, b, perm)[0] - O.emd_with_grad(am, b, perm)[0]) / (2 * h)
        assert fd == pytest.approx(g[i, c], abs=1e-7)


# ---- nearest-neighbor metrics

def test_chamfer_example():
    assert O.chamfer(np.zeros((1, 3)), np.array([[0.0, 0, 0], [1.0, 0, 0]])) == pytest.approx(0.25)


def test_chamfer_identity_and_symmetry():
    a, b = _cloud(1, 20), _cloud(2, 15)
    assert O.chamfer(a, a) == 0.0
    assert O.chamfer(a, b) == pytest.approx(O.chamfer(b, a))


def test_chamfer_grad_fd():
    a, b = _cloud(3, 7), _cloud(4, 9)
    v, g = O.chamfer_with_grad(a, b)
    assert v == pytest.approx(O.chamfer(a, b))
    h = 1e-6
    for i, c in itertools.product(range(7), range(3)):
        ap, am = a.copy(), a.copy()
        ap[i, c] += h
        am[i, c] -= h
        assert (O.chamfer(ap, b) - O.chamfer(am, b)) / (2 * h) == pytest.approx(g[i, c], abs=1e-6)


def test_fidelity_examples():
    assert O.fidelity(np.zeros((1, 3)), np.array([[3.0, 4, 0]]))[0] == pytest.approx(25.0)
    y = _cloud(5, 12)
    assert O.fidelity(y[:4], y)[0] == 0.0


def test_fidelity_empty():
    with pytest.raises(O.MetricError):
        O.fidelity(np.zeros((0, 3)), np.zeros((2, 3)))


# ---- image losses

def test_depth_l1_examples():
    a = np.zeros((8, 4, 5))
    assert O.depth_l1(a, a)[0] == 0.0
    b = a.copy()
    b[3, 1, 2] = 1.0
    assert O.depth_l1(a, b)[0] == pytest.approx(1.0 / (8 * 4 * 5))


def test_feature_weights():
    w = O.feature_weights([16, 32, 64, 128])
    assert w[0] == pytest.approx(1 / 15, abs=1e-15)
    np.testing.assert_allclose(w, np.array([16, 32, 64, 128]) / 240)


def test_feature_match_identity():
    feats = [np.ones((2, c, 4, 4)) for c in (16, 32, 64, 128)]
    v, grads = O.feature_match(feats, feats)
    assert v == 0.0 and all(not g.any() for g in grads)


def test_lsgan_targets():
    d, g, *_ = O.lsgan_losses(np.array([1.0]), np.array([0.0]))
    assert d == 0.0 and g == 1.0
    assert O.lsgan_losses(np.array([0.3]), np.array([1.0]))[1] == 0.0


# ---- expansion

def test_expansion_equal_edges_zero():
    pts = np.zeros((1, 4, 3))
    pts[0, :, 0] = [0, 1, 2, 3]
    assert O.expansion(pts)[0] == 0.0


def test_expansion_collinear_example():
    k, n = 2, 3
    groups = np.zeros((k, n, 3))
    groups[0, :, 0] = [0, 1, 10]
    groups[1, :, 0] = [0, 1, 2]
    assert O.expansion(groups)[0] == pytest.approx(9.0 / (k * n))


def test_mst_edge_count_and_weight():
    pts = _cloud(6, 25)
    edges = O.minimum_spanning_tree(pts)
    assert edges.shape == (24, 2)
    from scipy.sparse.csgraph import minimum_spanning_tree as sp_mst
    d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    ours = sum(d[i, j] for i, j in edges)
    assert ours == pytest.approx(sp_mst(d).sum(), rel=1e-12)


# ---- total loss

def test_default_weights():
    w = O.LossWeights()
    assert (w.rec, w.fd, w.adv, w.depth, w.fea, w.exp) == (200, 0.5, 0.1, 1, 1, 0.1)


def test_total_loss_unit_and_zero():
    assert O.total_loss({k: 1.0 for k in O.COMPONENTS}) == pytest.approx(202.7, abs=1e-12)
    assert O.total_loss({k: 0.0 for k in O.COMPONENTS}) == 0.0


def test_total_loss_rejects_nan():
    with pytest.raises(O.MetricError):
        O.total_loss({"rec": float("nan")})


def test_negative_weight_rejected():
    with pytest.raises(O.MetricError):
        O.LossWeights(rec=-1)


# ---- distribution metrics

def test_fpd_1d_example():
    assert O.fpd(np.array([-1.0, 1.0]), np.array([0.0, 2.0])) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_fpd_self_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(40, 6))
    b = rng.normal(size=(30, 6)) + 0.5
    assert O.fpd(a, a) < 1e-6
    assert abs(O.fpd(a, b) - O.fpd(b, a)) < 1e-8


def test_fpd_matches_scipy_sqrtm():
    from scipy.linalg import sqrtm
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(50, 4)), rng.normal(size=(60, 4)) * 1.3
    ma, ca = a.mean(0), np.cov(a, rowvar=False)
    mb, cb = b.mean(0), np.cov(b, rowvar=False)
    ref = ((ma - mb) ** 2).sum() + np.trace(ca + cb - 2 * np.real(sqrtm(ca @ cb)))
    assert O.fpd(a, b) == pytest.approx(ref, rel=1e-8)


def test_fpd_single_sample_is_mean_distance():
    a, b = np.array([[1.0, 2.0, 0.0]]), np.array([[0.0, 0.0, 2.0]])
    assert O.fpd(a, b) == pytest.approx(9.0, abs=1e-9)
    assert O.fpd(a, a) == pytest.approx(0.0, abs=1e-12)


def test_fpd_dim_mismatch():
    with pytest.raises(O.MetricError):
        O.fpd(np.zeros((5, 2)), np.zeros((5, 3)))


def test_mmd_examples():
    out = np.zeros((1, 3))
    near = np.array([[np.sqrt(0.2), 0, 0]])
    far = np.array([[np.sqrt(0.5), 0, 0]])
    assert O.chamfer(out, near) == pytest.approx(0.2)
    assert O.mmd([out], [far, near]) == pytest.approx(0.2)
    assert O.mmd([near, far], [far, near]) == 0.0


def test_temporal_examples():
    a = _cloud(7, 10)
    assert O.temporal_consistency([a, a, a]) == 0.0
    b = _cloud(8, 10)
    assert O.temporal_consistency([a, b]) == pytest.approx(O.chamfer(a, b))
    f0 = np.zeros((1, 3))
    f1 = np.array([[np.sqrt(0.2), 0, 0]])
    f2 = np.array([[np.sqrt(0.2) + np.sqrt(0.4), 0, 0]])
    assert O.temporal_consistency([f0, f1, f2]) == pytest.approx(0.3)
    with pytest.raises(O.MetricError):
        O.temporal_consistency([a])
