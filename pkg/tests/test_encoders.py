import numpy as np
import pytest

from scpc import autodiff as ad
from scpc.autodiff import ParameterStore, Tensor
from scpc.encoders import (Aggregator, Discriminator, Encoder, EncoderConfig, aggregate, discriminate,
                           dynamic_knn_graph, edgeconv, encode, normalized_adjacency)

TINY = EncoderConfig(2, (6, 5), 3, True, 4, concat_layers=True)


def brute_rows(feats, k):
    out = []
    for i in range(len(feats)):
        d = [(float(np.sum((feats[j] - feats[i]) ** 2)), j) for j in range(len(feats)) if j != i]
        out.append([j for _, j in sorted(d)[:k]])
    return np.array(out)


def make_encoder(config=TINY, seed=0):
    store = ParameterStore()
    return Encoder(config, store, "e", np.random.default_rng(seed))


# ---------------------------------------------------------------- kNN graph

def test_knn_two_rows():
    assert dynamic_knn_graph(np.array([[0.0, 1.0], [5.0, 5.0]]), 1).tolist() == [[1], [0]]


def test_knn_identical_rows_take_lowest_indices():
    g = dynamic_knn_graph(np.ones((6, 4)), 3)
    assert g.tolist() == [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2], [0, 1, 2], [0, 1, 2]]


def test_knn_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        feats = rng.normal(size=(32, 8))
        assert np.array_equal(dynamic_knn_graph(feats, 5), brute_rows(feats, 5))
    # integer features keep the Gram-matrix distances exact, so ties are real ties
    for _ in range(20):
        feats = rng.integers(-2, 3, size=(32, 8)).astype(float)
        assert np.array_equal(dynamic_knn_graph(feats, 5), brute_rows(feats, 5))


def test_knn_rejects_k_too_large():
    with pytest.raises(ValueError):
        dynamic_knn_graph(np.zeros((3, 2)), 3)


# ---------------------------------------------------------------- EdgeConv

def test_edgeconv_zero_weights_give_zero():
    x = Tensor(np.random.default_rng(1).normal(size=(10, 3)))
    nbr = dynamic_knn_graph(x.data, 4)
    out = edgeconv(x, nbr, Tensor(np.zeros((3, 5))), Tensor(np.zeros((3, 5))))
    assert out.shape == (10, 5) and not out.data.any()


def test_edgeconv_self_neighbour_reduces_to_phi():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 3))
    theta, phi = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    nbr = np.arange(4)[:, None]
    out = edgeconv(Tensor(x), nbr, Tensor(theta), Tensor(phi)).data
    h = x @ phi
    assert np.allclose(out, np.where(h > 0, h, 0.2 * h), atol=1e-12)


def test_edgeconv_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(12, 3))
    theta, phi = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    nbr = dynamic_knn_graph(x, 5)
    out = edgeconv(Tensor(x), nbr, Tensor(theta), Tensor(phi)).data
    for i in range(12):
        for c in range(4):
            vals = []
            for j in nbr[i]:
                e = sum(theta[d, c] * (x[j, d] - x[i, d]) + phi[d, c] * x[i, d] for d in range(3))
                vals.append(e if e > 0 else 0.2 * e)
            assert abs(out[i, c] - max(vals)) < 1e-12


# ---------------------------------------------------------------- encoder

def test_encoder_output_shape_and_permutation_equivariance():
    enc = make_encoder()
    pts = np.random.default_rng(4).normal(size=(20, 3))
    perm = np.random.default_rng(5).permutation(20)
    a = enc(pts).data
    b = enc(pts[perm]).data
    assert a.shape == (20, 4)
    assert np.allclose(a[perm], b, atol=1e-10)


def test_encoder_zero_input_is_finite():
    enc = make_encoder()
    out = enc(np.zeros((8, 3)), training=True).data
    assert np.all(np.isfinite(out))


def test_segments_are_encoded_independently():
    cfg = EncoderConfig(2, (6, 5), 3, True, 4, batch_norm=False)
    enc = make_encoder(cfg)
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(10, 3)), rng.normal(size=(7, 3)) + 0.1
    joint = encode([a, b], enc).data
    assert np.allclose(joint[:10], encode(a, enc).data, atol=1e-12)
    assert np.allclose(joint[10:], encode(b, enc).data, atol=1e-12)


def test_encoder_parameter_names():
    enc = make_encoder(EncoderConfig(1, (3,), 2, False, 2, batch_norm=False))
    assert sorted(enc.store.params) == ["e.fc.bias", "e.fc.weight", "e.layer0.phi", "e.layer0.theta"]
    with pytest.raises(ValueError):
        EncoderConfig(2, (3,), 2)


# ---------------------------------------------------------------- aggregation

def test_aggregate_single_row():
    w = np.array([[1.0, -1.0], [2.0, 0.5]])
    row = np.array([[1.0, 1.0]])
    out = aggregate(Tensor(row), Tensor(w), np.eye(1)).data
    h = row @ w
    assert np.allclose(out, np.where(h > 0, h, 0.2 * h))


def test_aggregate_identical_rows_equal_single_row():
    rng = np.random.default_rng(7)
    w, row = rng.normal(size=(3, 3)), rng.normal(size=(1, 3))
    coords = rng.normal(size=(5, 3))
    a_hat = normalized_adjacency(coords)
    many = aggregate(Tensor(np.repeat(row, 5, 0)), Tensor(w), a_hat).data
    one = aggregate(Tensor(row), Tensor(w), np.eye(1)).data
    # each row of A_hat sums to something other than 1 in general, so compare through A_hat
    h = a_hat.sum(1, keepdims=True) * (row @ w)
    assert np.allclose(many, np.where(h > 0, h, 0.2 * h).mean(0, keepdims=True))
    if np.allclose(a_hat.sum(1), 1.0):
        assert np.allclose(many, one)


def test_normalized_adjacency_oracle_and_patch_aggregate():
    rng = np.random.default_rng(8)
    coords = rng.normal(size=(5, 3))
    feats = rng.normal(size=(5, 8))
    w = rng.normal(size=(8, 8))
    a = np.eye(5)
    for i, nb in enumerate(brute_rows(coords, 4 if 4 < 5 else 3)):
        for j in nb:
            a[i, j] = a[j, i] = 1.0
    deg = a.sum(1)
    a_hat = a / np.sqrt(np.outer(deg, deg))
    assert np.allclose(normalized_adjacency(coords), a_hat, atol=1e-15)
    h = a_hat @ feats @ w
    expect = np.where(h > 0, h, 0.2 * h).mean(0)
    store = ParameterStore()
    agg = Aggregator(8, store, "g", rng)
    store["g.gcn.weight"].data[...] = w
    assert np.allclose(agg(Tensor(feats), a_hat).data[0], expect, atol=1e-12)
    both = agg.patches(Tensor(np.vstack([feats, feats])), np.array([[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]]),
                       np.stack([a_hat, a_hat])).data
    assert np.allclose(both, [expect, expect], atol=1e-12)


# ---------------------------------------------------------------- discriminator

def test_discriminator_half_at_zero():
    store = ParameterStore()
    disc = Discriminator(3, store, np.random.default_rng(0))
    z = Tensor(np.zeros((4, 3)))
    assert np.allclose(disc(z, z).data, 0.5)


def test_discriminator_formula_and_clamp():
    rng = np.random.default_rng(9)
    left, right = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    w, b = rng.normal(size=(4, 1)), np.array([0.3])
    out = discriminate(Tensor(left), Tensor(right), Tensor(w), Tensor(b)).data
    logit = np.hstack([left, right]) @ w[:, 0] + b[0]
    assert np.allclose(out, 1 / (1 + np.exp(-logit)), atol=1e-14)
    huge = discriminate(Tensor(np.full((2, 2), 1e6)), Tensor(np.full((2, 2), -1e6)),
                        Tensor(np.array([[1.0], [1.0], [-1.0], [-1.0]])), Tensor(b))
    assert np.all(np.isfinite(huge.data)) and np.all(huge.data > 0.99)
    w_t = Tensor(w, requires_grad=True)
    ad.total(discriminate(Tensor(left), Tensor(right), w_t, Tensor(b))).backward()
    assert np.all(np.isfinite(w_t.grad))
