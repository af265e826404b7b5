import numpy as np
import pytest

from scpc.contrastive import ContrastiveModel
from scpc.encoders import EncoderConfig
from scpc.evaluation import (MetricReport, ProbeConfig, SegmentationTask, classification_metric,
                             evaluate_segmentation, fine_tune_classifier, global_feature, global_features,
                             label_fraction_subset, metrics_rows, miou, perturb, point_features,
                             robustness_sweep, segmentation_metric, train_probe, train_seg_probe,
                             all_point_features)
from scpc.geometry import PointCloud, ShapeSpec, generate_shape

TINY = EncoderConfig(2, (8, 8), 4, True, 8, concat_layers=True)


@pytest.fixture(scope="module")
def model():
    return ContrastiveModel(TINY, seed=0)


def clouds(kinds, n_each, points=64, noise=0.01, offset=0):
    out, labels = [], []
    for i in range(n_each):
        for c, kind in enumerate(kinds):
            out.append(generate_shape(ShapeSpec(kind, points, noise, offset + 10 * i + c)))
            labels.append(c)
    return out, np.array(labels)


# ---------------------------------------------------------------- global features

def test_global_feature_is_mean_of_point_features(model):
    c = generate_shape(ShapeSpec("cube", 50, 0.0, 1))
    feats = point_features(model, c)
    oracle = np.array([sum(feats[i, j] for i in range(50)) / 50 for j in range(feats.shape[1])])
    assert np.max(np.abs(global_feature(model, c) - oracle)) < 1e-12


def test_single_point_cloud(model):
    c = PointCloud(np.array([[0.3, -0.2, 0.5]]))
    feats = point_features(model, c)
    assert feats.shape == (1, 8)
    assert np.array_equal(global_feature(model, c), feats[0])


def test_global_feature_reorder_invariant_and_pooling_duplication(model):
    c = generate_shape(ShapeSpec("torus", 60, 0.0, 2))
    perm = np.random.default_rng(0).permutation(60)
    shuffled = PointCloud(c.points[perm])
    assert np.allclose(global_feature(model, c), global_feature(model, shuffled), atol=1e-12)
    feats = point_features(model, c)
    assert np.allclose(np.vstack([feats, feats]).mean(0), feats.mean(0), atol=1e-15)


# ---------------------------------------------------------------- probes

def test_separable_probe_is_perfect():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(-3, 0.5, (40, 4)), rng.normal(3, 0.5, (40, 4))])
    y = np.repeat([0, 1], 40)
    idx = rng.permutation(80)
    tr, te = idx[:50], idx[50:]
    for loss in ("multinomial_logistic", "multiclass_hinge"):
        _, report = train_probe(x[tr], y[tr], x[te], y[te], ProbeConfig(loss=loss, epochs=100))
        assert report.accuracy == 1.0 and report.train_accuracy == 1.0


def test_shuffled_labels_are_at_chance():
    accs = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(600, 6))
        y = rng.permutation(np.repeat([0, 1, 2], 200))
        _, report = train_probe(x[:300], y[:300], x[300:], y[300:], ProbeConfig(epochs=100, seed=seed))
        accs.append(report.accuracy)
    assert abs(np.mean(accs) - 1 / 3) <= 0.1


def test_probe_label_errors():
    x = np.zeros((4, 2))
    with pytest.raises(ValueError):
        train_probe(x, [0, 0, 0, 0], x, [0, 1, 0, 1])
    with pytest.raises(ValueError, match="no training examples"):
        train_probe(x, [0, 2, 0, 2], x, [0, 1, 2, 1])
    with pytest.raises(ValueError):
        ProbeConfig(loss="svm")
    with pytest.raises(ValueError):
        MetricReport(1.5)


def test_probe_is_deterministic(model):
    cs, y = clouds(["sphere", "cube"], 4)
    x = global_features(model, cs)
    a = train_probe(x, y, x, y, ProbeConfig(epochs=50))[0]
    b = train_probe(x, y, x, y, ProbeConfig(epochs=50))[0]
    assert a.store.checksum() == b.store.checksum()


def test_fine_tune_leaves_model_untouched(model):
    cs, y = clouds(["sphere", "cube", "cylinder"], 3)
    before = model.store.checksum()
    tuned, head = fine_tune_classifier(model, cs, y, ProbeConfig(epochs=20), epochs=1, batch_size=4)
    assert model.store.checksum() == before
    assert tuned.store.checksum() != before
    assert head.predict(global_features(tuned, cs)).shape == (9,)


# ---------------------------------------------------------------- IoU

def test_miou_examples():
    gt = np.array([0, 0, 1, 1])
    assert miou(gt, gt, 2)[1] == 1.0
    assert miou(1 - gt, gt, 2)[1] == 0.0
    pred = np.array([0, 1, 1, 0])
    per, m = miou(pred, gt, 2)
    assert abs(per[0] - 1 / 3) < 1e-12 and abs(m - 1 / 3) < 1e-12
    # a part absent from both counts as IoU 1
    assert miou(np.array([0, 0]), np.array([0, 0]), 3)[1] == 1.0
    with pytest.raises(ValueError):
        miou([gt], [gt, gt], 2)
    with pytest.raises(ValueError):
        miou([gt], [gt[:3]], 2)


def test_miou_and_accuracy_permutation_invariant():
    rng = np.random.default_rng(1)
    pred, gt = rng.integers(0, 4, 100), rng.integers(0, 4, 100)
    perm = rng.permutation(100)
    assert miou(pred, gt, 4)[1] == miou(pred[perm], gt[perm], 4)[1]
    assert np.mean(pred == gt) == np.mean(pred[perm] == gt[perm])


def test_segmentation_probe_on_cross_and_cylinder(model):
    task = SegmentationTask(["cylinder", "cross"], {"cylinder": 3, "cross": 5})
    train, _ = clouds(["cylinder", "cross"], 3, points=96, noise=0.0)
    test, _ = clouds(["cylinder", "cross"], 1, points=96, noise=0.0, offset=500)
    cats = ["cylinder", "cross"] * 3
    head = train_seg_probe(all_point_features(model, train), [c.labels for c in train], cats, task,
                           ProbeConfig(head="pointwise_head", epochs=50))
    per, m = evaluate_segmentation(head, all_point_features(model, test), [c.labels for c in test],
                                   ["cylinder", "cross"], task)
    assert len(per) == 2 and 0.0 <= m <= 1.0
    metric = segmentation_metric(model, head, ["cylinder", "cross"], task)
    assert metric(test) == m


# ---------------------------------------------------------------- harnesses

def test_sweep_identity_levels_match_clean(model):
    cs, y = clouds(["sphere", "cube", "cylinder"], 3)
    head, _ = train_probe(global_features(model, cs), y, global_features(model, cs), y, ProbeConfig(epochs=30))
    metric = classification_metric(model, head, y)
    clean = metric(cs)
    noise = robustness_sweep(metric, cs, "noise", [0.0, 0.05], seed=3)
    dens = robustness_sweep(metric, cs, "density", [64, 32], seed=3)
    assert noise[0] == (0.0, clean) and dens[0] == (64, clean)
    assert all(0.0 <= v <= 1.0 for _, v in noise + dens)
    assert len(perturb(cs[0], "density", 32, 0).points) == 32
    with pytest.raises(ValueError):
        perturb(cs[0], "blur", 1, 0)


def test_label_fraction_subset():
    labels = np.repeat([0, 1, 2], 100)
    sub = label_fraction_subset(labels, 0.1, 0)
    assert len(sub) == 30 and np.bincount(labels[sub]).tolist() == [10, 10, 10]
    assert np.array_equal(sub, label_fraction_subset(labels, 0.1, 0))
    assert np.bincount(labels[label_fraction_subset(labels, 0.001, 0)]).tolist() == [1, 1, 1]
    assert len(label_fraction_subset(labels, 1.0, 5)) == 300


def test_metrics_rows_format():
    assert metrics_rows("abc", "cls", "test", {"accuracy": 0.5}) == ["abc,cls,test,accuracy,0.5"]
