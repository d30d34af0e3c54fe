import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morewsss import autodiff as ad
from morewsss import gcr
from morewsss.autodiff import Tensor
from morewsss.verify import naive_gcr

TAILS = np.array([[2.0, 0.0], [0.0, 3.0], [1.0, 0.0]])


def test_hand_case_neighbors_and_relations():
    r, nb = gcr.select_neighbors(Tensor([1.0, 0.0]), Tensor(TAILS), 2)
    assert nb.tolist() == [0, 2]
    np.testing.assert_allclose(r.data, [0.7310585786300049, 0.2689414213699951], rtol=1e-12)


def test_full_k_is_dense_softmax_over_all_scores():
    r, nb = gcr.select_neighbors(Tensor([1.0, 0.0]), Tensor(TAILS), 3)
    assert sorted(nb.tolist()) == [0, 1, 2]
    s = TAILS @ np.array([1.0, 0.0])
    np.testing.assert_allclose(r.data, np.exp(s[nb]) / np.exp(s).sum(), rtol=1e-12)


def test_k_out_of_range_raises():
    with pytest.raises(ValueError):
        gcr.select_neighbors(Tensor([1.0, 0.0]), Tensor(TAILS), 4)


def test_identity_projection_passes_tokens_through():
    D = 3
    params = gcr.init_params(D, 0)
    params["gcr.head.w"].data = np.eye(D)
    params["gcr.head.b"].data = np.zeros(D)
    ct = np.random.default_rng(0).normal(size=(2, D))
    h, _ = gcr.project(ct, np.zeros((4, D)), params)
    np.testing.assert_array_equal(h.data, ct)


def test_edge_arithmetic():
    e = gcr.edge_embeddings(Tensor([0.0, 0.0]), Tensor([[1.0, 1.0]]), Tensor([0.25]), np.array([0]))
    np.testing.assert_allclose(e.data, [[0.25, 0.25]])
    e1 = gcr.edge_embeddings(Tensor([5.0, -1.0]), Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([1.0]), np.array([1]))
    np.testing.assert_array_equal(e1.data, [[3.0, 4.0]])


def test_single_neighbor_aggregate_is_that_tail():
    tails = Tensor([[1.0, 2.0], [3.0, -4.0]])
    a, s = gcr.aggregate(Tensor([0.5, 0.5]), Tensor([[9.0, 9.0]]), tails, np.array([1]))
    np.testing.assert_array_equal(s.data, [1.0])
    np.testing.assert_allclose(a.data, [3.0, -4.0])


def test_identical_tails_aggregate_to_that_tail():
    t = np.tile([[0.3, -0.7, 1.1]], (5, 1))
    h = np.array([0.2, 0.1, -0.4])
    r, nb = gcr.select_neighbors(Tensor(h), Tensor(t), 3)
    e = gcr.edge_embeddings(Tensor(h), Tensor(t), r, nb)
    a, _ = gcr.aggregate(Tensor(h), e, Tensor(t), nb)
    np.testing.assert_allclose(a.data, t[0], atol=1e-15)


def test_fuse_special_weights():
    D = 3
    params = gcr.init_params(D, 0)
    for k in params:
        params[k].data = np.zeros_like(params[k].data)
    h, a = Tensor([[1.0, 2.0, 3.0]]), Tensor([[0.5, 0.5, 0.5]])
    np.testing.assert_array_equal(gcr.fuse(h, a, params).data, 0.0)
    params["gcr.fuse1.w"].data = np.eye(D)
    np.testing.assert_allclose(gcr.fuse(h, a, params).data, h.data + a.data)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 12), st.sampled_from([2, 4]), st.integers(0, 2**31 - 1))
def test_forward_matches_naive_loops(C, L, D, seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, L + 1))
    params = gcr.init_params(D, rng)
    ct, pt = rng.normal(size=(C, D)), rng.normal(size=(L, D))
    q, state = gcr.gcr_forward(ct, pt, params, k)
    ref = naive_gcr(ct, pt, {n: t.data for n, t in params.items()}, k)
    np.testing.assert_allclose(q.data, ref, atol=1e-12, rtol=0)
    np.testing.assert_allclose(state.relations.data.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(state.weights.data.sum(-1), 1.0, atol=1e-12)
    assert state.neighbors.shape == (1, C, k)


def test_edges_lie_between_head_and_tail():
    rng = np.random.default_rng(4)
    params = gcr.init_params(4, rng)
    ct, pt = rng.normal(size=(2, 4)), rng.normal(size=(9, 4))
    _, st_ = gcr.gcr_forward(ct, pt, params, 3)
    h, t, r, nb, e = (st_.heads.data[0], st_.tails.data[0], st_.relations.data[0],
                      st_.neighbors[0], st_.edges.data[0])
    for i in range(2):
        for j in range(3):
            np.testing.assert_allclose(e[i, j], r[i, j] * t[nb[i, j]] + (1 - r[i, j]) * h[i], atol=1e-14)


def test_batched_equals_per_image():
    rng = np.random.default_rng(2)
    params = gcr.init_params(4, rng)
    ct, pt = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 9, 4))
    q, _ = gcr.gcr_forward(ct, pt, params, 4)
    for b in range(3):
        np.testing.assert_allclose(q.data[b], gcr.gcr_forward(ct[b], pt[b], params, 4)[0].data, atol=1e-14)


def test_dense_graph_gradient():
    rng = np.random.default_rng(5)
    params = gcr.init_params(4, rng)
    pt = rng.normal(size=(9, 4))
    w = rng.normal(size=(2, 4))
    err = ad.finite_diff_check(lambda t: (gcr.gcr_forward(t, pt, params, 9)[0] * w).sum(), rng.normal(size=(2, 4)))
    assert err <= 1e-4


def test_default_k_is_half():
    assert gcr.default_k(784) == 392
    assert gcr.default_k(64) == 32
    assert gcr.default_k(1) == 1
