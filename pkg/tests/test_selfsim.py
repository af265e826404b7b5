import math

import numpy as np
import pytest

from scpc.autodiff import Adam, StepDecay
from scpc.encoders import EncoderConfig
from scpc.geometry import ShapeSpec, generate_shape
from scpc.selfsim import (FULL_SCALE_SCHEDULE, ThresholdSchedule, batch_loss, cosine_similarity,
                          make_patches, mine_hard_negatives, mining_rows, patch_similarity, sample_pairs,
                          similarity_loss, similarity_table, SimilarityConfig, SimilarityModel,
                          thresholds_at, train_similarity)

TINY = EncoderConfig(2, (8, 8), 4, True, 6)


def cloud(seed=0, kind="torus", n=96):
    return generate_shape(ShapeSpec(kind, n, 0.01, seed))


def samples(n=3):
    out = []
    for s in range(n):
        c = cloud(s)
        out.append((c, make_patches(c, 6, 8)))
    return out


# ---------------------------------------------------------------- pairs and loss

def test_sample_pairs_forced_partner_and_determinism():
    c = cloud()
    patches = make_patches(c, 2, 5)
    pairs = sample_pairs(c, patches, 1, 1, seed=3)
    i, j = pairs.dissimilar[0]
    assert {i, j} == {0, 1}
    patches = make_patches(c, 6, 8)
    a, b = sample_pairs(c, patches, 4, 4, 11), sample_pairs(c, patches, 4, 4, 11)
    assert a.dissimilar == b.dissimilar
    assert all(x[0] == y[0] and np.array_equal(x[1], y[1]) for x, y in zip(a.similar, b.similar))
    with pytest.raises(ValueError):
        sample_pairs(c, patches[:1], 1, 1, 0)


def test_sample_pairs_rotation_is_rigid():
    c = cloud(1)
    patches = make_patches(c, 6, 8)
    for i, rotated in sample_pairs(c, patches, 6, 6, 5).similar:
        orig = c.points[list(patches[i].members)]
        d0 = np.linalg.norm(orig[:, None] - orig[None], axis=2)
        d1 = np.linalg.norm(rotated[:, None] - rotated[None], axis=2)
        assert np.max(np.abs(d0 - d1)) < 1e-9


def test_similarity_loss_values():
    assert abs(similarity_loss([1.0, 1.0], [0.0]) - 0.0) < 1e-9
    assert abs(similarity_loss([0.5] * 3, [0.5] * 5) - math.log(2)) < 1e-9
    assert abs(similarity_loss([0.9], [0.2]) + (math.log(0.9) + math.log(0.8)) / 2) < 1e-12
    with pytest.raises(ValueError):
        similarity_loss([1.2], [0.1])
    with pytest.raises(ValueError):
        similarity_loss([], [0.1])


# ---------------------------------------------------------------- training

def test_zero_epochs_leaves_parameters():
    model = SimilarityModel(TINY, seed=0)
    before = model.store.checksum()
    state = train_similarity(samples(), model, SimilarityConfig(epochs=0))
    assert state.epoch == 0 and model.store.checksum() == before


def test_single_step_descent():
    model = SimilarityModel(TINY, seed=1)
    data = samples(2)
    items = [(c, p, sample_pairs(c, p, 6, 6, k)) for k, (c, p) in enumerate(data)]
    opt = Adam(model.store, 1e-4)
    model.store.zero_grad()
    loss = batch_loss(model, items)
    loss.backward()
    opt.step()
    assert batch_loss(model, items).item() <= loss.item()


def test_training_is_deterministic_and_resumable():
    cfg = SimilarityConfig(epochs=3, batch_size=2, lr=StepDecay(0.002, 0.8, 2), seed=4)
    runs = []
    for stop in (None, None, 1):
        model = SimilarityModel(TINY, seed=2)
        state = train_similarity(samples(), model, cfg, stop_after=stop)
        if stop is not None:
            assert state.epoch == 1
            state = train_similarity(samples(), model, cfg, state=state)
        runs.append((model.store.checksum(), [h["loss"] for h in state.history]))
    assert runs[0] == runs[1] == runs[2]
    assert len(runs[0][1]) == 3


# ---------------------------------------------------------------- similarity

def test_patch_similarity_identical_patch_is_one():
    c = cloud(2)
    patches = make_patches(c, 4, 8)
    model = SimilarityModel(TINY, seed=0)
    assert abs(patch_similarity(model, c, patches[1], patches[1]) - 1.0) < 1e-12


def test_cosine_hooks():
    g = np.array([1.0, 2.0, -0.5])
    assert cosine_similarity(g, np.array([2.0, -1.0, 0.0])) == 0.0
    assert abs(cosine_similarity(g, -g) - 1.0) < 1e-12
    assert cosine_similarity(g, np.zeros(3)) == 0.0


def test_similarity_table_properties():
    c = cloud(3)
    patches = make_patches(c, 8, 8)
    table = similarity_table(SimilarityModel(TINY, seed=5), c, patches)
    assert np.array_equal(table, table.T)
    assert np.all(np.diag(table) == 1.0)
    assert np.all((table >= 0) & (table <= 1))


# ---------------------------------------------------------------- thresholds

def test_thresholds_examples():
    s = ThresholdSchedule()
    assert thresholds_at(s, 0) == (0.0, 1.0)
    assert thresholds_at(s, s.warmup_epochs - 1) == (0.0, 1.0)
    b_l, b_u = thresholds_at(FULL_SCALE_SCHEDULE, 340)
    assert abs(b_l - 0.10) < 1e-12 and abs(b_u - 0.95) < 1e-12
    b_l, b_u = thresholds_at(s, 10**6)
    assert b_u - b_l >= s.min_gap - 1e-12
    with pytest.raises(ValueError):
        thresholds_at(s, -1)
    with pytest.raises(ValueError):
        ThresholdSchedule(min_gap=0.0)


def test_thresholds_monotone_with_gap():
    for s in (ThresholdSchedule(), FULL_SCALE_SCHEDULE, ThresholdSchedule(0.2, 0.9, 0.1, 0.01, 3, 2, 0.1)):
        prev = thresholds_at(s, 0)
        for epoch in range(1, 2000):
            cur = thresholds_at(s, epoch)
            assert cur[0] >= prev[0] and cur[1] <= prev[1]
            assert cur[1] - cur[0] >= s.min_gap - 1e-12
            prev = cur


# ---------------------------------------------------------------- mining

def test_mining_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    c = cloud(4)
    patches = make_patches(c, 8, 8)
    model = SimilarityModel(TINY, seed=6)
    table = similarity_table(model, c, patches)
    for anchor in range(8):
        assert mine_hard_negatives(table, anchor, 0.0, 1.0) == [j for j in range(8) if j != anchor]
        oracle = [j for j in range(8) if j != anchor
                  and 0.3 <= patch_similarity(model, c, patches[anchor], patches[j]) <= 0.8]
        # the pairwise evaluation and the batched table agree up to roundoff; compare away from the edges
        got = mine_hard_negatives(table, anchor, 0.3, 0.8)
        near = [j for j in range(8) if min(abs(table[anchor, j] - 0.3), abs(table[anchor, j] - 0.8)) < 1e-9]
        assert set(got) - set(near) == set(oracle) - set(near)
    for _ in range(20):
        lo = float(rng.uniform(0, 1))
        hi = float(rng.uniform(lo, 1))
        anchor = int(rng.integers(8))
        inner = mine_hard_negatives(table, anchor, lo, hi)
        assert set(inner) <= set(mine_hard_negatives(table, anchor, 0.0, 1.0))
        assert inner == sorted(inner)


def test_mining_rows():
    table = np.array([[1.0, 0.5, 0.9], [0.5, 1.0, 0.2], [0.9, 0.2, 1.0]])
    rows = mining_rows(table, 0.4, 0.95)
    assert rows[0] == "anchor,candidate,similarity,is_hard_negative"
    assert rows[1:] == ["0,1,0.5,1", "0,2,0.90000000000000002,1", "1,0,0.5,1", "2,0,0.90000000000000002,1"]
    assert len(mining_rows(table, 0.0, 1.0)) == 1 + 6
    assert len(mining_rows(table, 0.4, 0.95, all_pairs=True)) == 1 + 6
    with pytest.raises(ValueError):
        mine_hard_negatives(table, 0, 0.8, 0.2)
