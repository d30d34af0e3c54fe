import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from morewsss import cam
from morewsss.autodiff import Tensor

unit = st.floats(0, 1, allow_nan=False)


def amap(scores):
    return cam.ActivationMap(np.asarray(scores, dtype=float), "CAM")


def test_zero_weights_give_zero_map():
    p = np.random.default_rng(0).normal(size=(4, 5))
    m = cam.compute_cam(p, np.zeros((5, 2)), (2, 2))
    np.testing.assert_array_equal(m.scores, 0.0)


def test_single_patch_map_is_clipped_raw_score():
    p, w = np.array([[0.5, 0.2]]), np.array([[1.0, -1.0], [0.5, 3.0]])
    m = cam.compute_cam(p, w, (1, 1))
    raw = p @ w
    np.testing.assert_allclose(m.scores.reshape(-1), np.clip(raw, 0, 1).reshape(-1))


def test_cam_matches_loop_oracle():
    rng = np.random.default_rng(1)
    p, w = rng.normal(size=(6, 4)), rng.normal(size=(4, 3))
    m = cam.compute_cam(p, w, (2, 3)).scores
    for c in range(3):
        col = [sum(p[j, a] * w[a, c] for a in range(4)) for j in range(6)]
        lo, hi = min(col), max(col)
        for j in range(6):
            assert m[j // 3, j % 3, c] == pytest.approx((col[j] - lo) / (hi - lo), abs=1e-12)


def test_absent_classes_are_zeroed():
    rng = np.random.default_rng(2)
    m = cam.compute_cam(rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), (2, 2), labels=np.array([0.0, 1.0]))
    np.testing.assert_array_equal(m.scores[..., 0], 0.0)
    assert m.scores[..., 1].max() == 1.0


@pytest.mark.parametrize("scores,expected", [([0.8, 0.3], 1), ([0.1, 0.2], 0), ([0.5, 0.4], 255)])
def test_threshold_branches(scores, expected):
    mask = cam.multi_threshold_filter(amap([[scores]]), 0.25, 0.70)
    assert mask.labels[0, 0] == expected


def test_threshold_grid_cases():
    low = cam.multi_threshold_filter(amap(np.full((2, 2, 2), 0.1)), 0.25, 0.7).labels
    np.testing.assert_array_equal(low, 0)
    hot = np.zeros((2, 2, 3))
    hot[..., 2] = 0.9
    np.testing.assert_array_equal(cam.multi_threshold_filter(amap(hot), 0.25, 0.7).labels, 3)
    mixed = amap([[[0.9, 0.1], [0.2, 0.1]], [[0.3, 0.6], [0.1, 0.95]]])
    np.testing.assert_array_equal(cam.multi_threshold_filter(mixed, 0.25, 0.7).labels, [[1, 0], [255, 2]])


def test_threshold_order_validated():
    with pytest.raises(ValueError):
        cam.multi_threshold_filter(amap([[[0.5]]]), 0.7, 0.25)


@settings(max_examples=500, deadline=None)
@given(arrays(float, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3)), elements=unit),
       st.floats(0.01, 0.49), st.floats(0.5, 0.98), st.floats(0, 1))
def test_partition_and_monotonicity(s, low, high, frac):
    C = s.shape[-1]
    m = cam.multi_threshold_filter(amap(s), low, high).labels
    assert np.all((m == 0) | (m == 255) | ((m >= 1) & (m <= C)))
    fg = ~np.isin(m, (0, 255))
    higher = cam.multi_threshold_filter(amap(s), low, high + (0.99 - high) * frac).labels
    assert not np.any(~np.isin(higher, (0, 255)) & ~fg)
    lower = cam.multi_threshold_filter(amap(s), max(low * frac, 1e-3), high).labels
    assert not np.any((lower == 0) & (m != 0))


def test_lam_parallel_and_orthogonal():
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    p = np.array([[2.0, 0.0], [3.0, 0.0], [0.5, 0.0], [1.0, 0.0]])
    m = cam.compute_lam(q, p, (2, 2)).scores
    np.testing.assert_allclose(m[..., 0], 1.0)
    np.testing.assert_array_equal(m[..., 1], 0.0)


def test_lam_matches_cosine_loop():
    rng = np.random.default_rng(3)
    q, p = rng.normal(size=(2, 5)), rng.normal(size=(9, 5))
    m = cam.compute_lam(q, p, (3, 3)).scores
    for c in range(2):
        cos = [q[c] @ p[j] / np.linalg.norm(q[c]) / np.linalg.norm(p[j]) for j in range(9)]
        lo, hi = min(cos), max(cos)
        np.testing.assert_allclose(m[..., c].reshape(-1), (np.array(cos) - lo) / (hi - lo), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100))
def test_lam_is_scale_invariant(seed, lam):
    rng = np.random.default_rng(seed)
    q, p = rng.normal(size=(2, 4)), rng.normal(size=(4, 4))
    a = cam.compute_lam(q, p, (2, 2)).scores
    b = cam.compute_lam(q * lam, p * (1 + lam), (2, 2)).scores
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_pseudo_label_background_threshold():
    s = amap([[[0.3, 0.2], [0.5, 0.9]]])
    np.testing.assert_array_equal(cam.to_pseudo_label(s, 0.45), [[0, 2]])


def test_upsample_constant_and_identity():
    x = np.random.default_rng(0).random((4, 4, 2))
    np.testing.assert_allclose(cam.upsample(x, (4, 4)), x)
    np.testing.assert_allclose(cam.upsample(np.full((2, 2, 1), 0.3), (8, 8)), 0.3)
    up = cam.upsample(np.array([[[0.0], [1.0]]]), (1, 4))
    np.testing.assert_allclose(up[0, :, 0], [0.0, 0.25, 0.75, 1.0])


@pytest.mark.parametrize("pooling", ["mean", "max", "topk"])
def test_pooling_modes(pooling):
    raw = Tensor(np.arange(8, dtype=float).reshape(1, 8, 1))
    got = cam.pool_scores(raw, pooling).data.item()
    assert got == {"mean": 3.5, "max": 7.0, "topk": 6.5}[pooling]
