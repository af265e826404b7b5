"""Frozen-feature probes, IoU metrics and robustness harnesses."""

from __future__ import annotations

import copy
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, ParameterStore, Tensor
from .contrastive import ContrastiveModel
from .geometry import PointCloud, jitter, subsample

HEADS = ("linear_classifier", "pointwise_head")
LOSSES = ("multinomial_logistic", "multiclass_hinge")


@dataclass
class ProbeConfig:
    head: str = "linear_classifier"
    loss: str = "multinomial_logistic"
    epochs: int = 300
    lr: float = 0.05
    fine_tune: bool = False
    hidden_layers: int = 0   # 0 = single linear layer; 4 gives the five-layer variant
    hidden_width: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class MetricReport:
    accuracy: float
    miou: float | None = None
    per_class_iou: list[float] = field(default_factory=list)
    train_accuracy: float | None = None
    seed: int = 0
    config_hash: str = ""

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy outside [0, 1]")
        if self.miou is not None and not 0.0 <= self.miou <= 1.0:
            raise ValueError("miou outside [0, 1]")


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SCPC_THREADS", os.cpu_count() or 1)))
    except ValueError:
        return 1


def _map_ordered(fn, items):
    n = _threads()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- features

def point_features(model: ContrastiveModel, cloud: PointCloud) -> np.ndarray:
    return model.point_features(cloud, training=False).data


def global_feature(model: ContrastiveModel, cloud: PointCloud) -> np.ndarray:
    """Column-wise mean of the frozen point-wise features."""
    return point_features(model, cloud).mean(axis=0)


def global_features(model: ContrastiveModel, clouds: list[PointCloud]) -> np.ndarray:
    return np.stack(_map_ordered(lambda c: global_feature(model, c), clouds))


def all_point_features(model: ContrastiveModel, clouds: list[PointCloud]) -> list[np.ndarray]:
    return _map_ordered(lambda c: point_features(model, c), clouds)


# ---------------------------------------------------------------- linear heads

@dataclass
class LinearHead:
    """Standardization followed by one linear layer, or a small MLP when hidden layers are set."""
    mean: np.ndarray
    std: np.ndarray
    store: ParameterStore
    n_layers: int
    class_ranges: list[tuple[int, int]] | None = None

    def logits(self, x: np.ndarray | Tensor) -> Tensor:
        if isinstance(x, Tensor):
            # differentiable standardization, used when the features themselves are trained
            h = ad.add_bias(ad.matmul(x, Tensor(np.diag(1.0 / self.std))), Tensor(-self.mean / self.std))
        else:
            h = Tensor((np.asarray(x) - self.mean) / self.std)
        for i in range(self.n_layers):
            h = ad.add_bias(ad.matmul(h, self.store[f"head.{i}.weight"]), self.store[f"head.{i}.bias"])
            if i < self.n_layers - 1:
                h = ad.leaky_relu(h, 0.2)
        return h

    def predict(self, x: np.ndarray, allowed: tuple[int, int] | None = None) -> np.ndarray:
        z = self.logits(x).data
        if allowed is None:
            return z.argmax(axis=1)
        lo, hi = allowed
        return z[:, lo:hi].argmax(axis=1) + lo


def _one_hot(y: np.ndarray, c: int) -> np.ndarray:
    out = np.zeros((len(y), c))
    out[np.arange(len(y)), y] = 1.0
    return out


def _probe_loss(logits: Tensor, y: np.ndarray, kind: str, mask: np.ndarray | None) -> Tensor:
    n, c = logits.shape
    onehot = Tensor(_one_hot(y, c))
    true_score = ad.row_dot(logits, onehot)
    if kind == "multinomial_logistic":
        lse = ad.logsumexp_rows(logits, mask)
        return ad.scale(ad.total(ad.sub(lse, true_score)), 1.0 / n)
    # Weston-Watkins multiclass hinge over the allowed classes
    margins = ad.add_scalar(ad.sub(logits, ad.matmul(ad.reshape(true_score, (n, 1)), Tensor(np.ones((1, c))))), 1.0)
    hinge = ad.leaky_relu(margins, 0.0)
    keep = (1.0 - onehot.data) if mask is None else (1.0 - onehot.data) * mask
    return ad.scale(ad.total(ad.mul(hinge, Tensor(keep))), 1.0 / n)


def fit_linear_head(x: np.ndarray, y: np.ndarray, n_classes: int, config: ProbeConfig,
                    class_mask: np.ndarray | None = None) -> LinearHead:
    """Full-batch Adam on a linear (or small MLP) head over fixed features."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    rng = np.random.default_rng([config.seed, 4])
    store = ParameterStore()
    dims = [x.shape[1]] + [config.hidden_width] * config.hidden_layers + [n_classes]
    for i in range(len(dims) - 1):
        scale = 0.0 if len(dims) == 2 else np.sqrt(2.0 / dims[i])
        store.add(f"head.{i}.weight", rng.normal(0.0, 1.0, (dims[i], dims[i + 1])) * scale)
        store.add(f"head.{i}.bias", np.zeros(dims[i + 1]))
    head = LinearHead(mean, std, store, len(dims) - 1)
    opt = Adam(store, config.lr)
    for _ in range(config.epochs):
        store.zero_grad()
        loss = _probe_loss(head.logits(x), y, config.loss, class_mask)
        loss.backward()
        opt.step()
    return head


def _check_labels(y_train: np.ndarray, n_classes: int) -> None:
    present = np.unique(y_train)
    if len(present) < 2:
        raise ValueError("need at least two classes in the training split")
    missing = sorted(set(range(n_classes)) - set(int(c) for c in present))
    if missing:
        raise ValueError(f"classes {missing} have no training examples")


def train_probe(x_train, y_train, x_test, y_test, config: ProbeConfig | None = None,
                config_hash: str = "") -> tuple[LinearHead, MetricReport]:
    """Linear classifier on frozen global features; reports held-out accuracy."""
    config = config or ProbeConfig()
    y_train = np.asarray(y_train, dtype=np.int64)
    y_test = np.asarray(y_test, dtype=np.int64)
    n_classes = int(max(y_train.max(), y_test.max() if len(y_test) else 0)) + 1
    _check_labels(y_train, n_classes)
    head = fit_linear_head(x_train, y_train, n_classes, config)
    train_acc = float(np.mean(head.predict(x_train) == y_train))
    test_acc = float(np.mean(head.predict(x_test) == y_test)) if len(y_test) else 0.0
    return head, MetricReport(test_acc, train_accuracy=train_acc, seed=config.seed,
                              config_hash=config_hash)


def _pool_matrix(sizes: list[int]) -> np.ndarray:
    pool = np.zeros((len(sizes), sum(sizes)))
    start = 0
    for row, n in enumerate(sizes):
        pool[row, start:start + n] = 1.0 / n
        start += n
    return pool


def fine_tune_classifier(model: ContrastiveModel, clouds: list[PointCloud], labels,
                         config: ProbeConfig, epochs: int = 5, encoder_lr: float = 1e-3,
                         batch_size: int = 16) -> tuple[ContrastiveModel, LinearHead]:
    """Train a copy of E2 jointly with the classification head.

    The head is first fitted on the frozen features, then both are updated
    with Adam on mini-batches.  ``model`` itself is left untouched.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1
    _check_labels(labels, n_classes)
    tuned = copy.deepcopy(model)
    head = fit_linear_head(global_features(tuned, clouds), labels, n_classes, config)
    enc_opt = Adam(tuned.store, encoder_lr)
    head_opt = Adam(head.store, config.lr)
    for epoch in range(epochs):
        order = np.random.default_rng([config.seed, 5, epoch]).permutation(len(clouds))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue
            segments = [clouds[i].points for i in idx]
            feats = tuned.point_features(segments, training=True)
            pooled = ad.matmul(Tensor(_pool_matrix([len(s) for s in segments])), feats)
            tuned.store.zero_grad()
            head.store.zero_grad()
            loss = _probe_loss(head.logits(pooled), labels[idx], config.loss, None)
            loss.backward()
            enc_opt.step()
            head_opt.step()
    return tuned, head


# ---------------------------------------------------------------- segmentation

def shape_iou(pred: np.ndarray, gt: np.ndarray, n_parts: int) -> float:
    """Mean over parts of |pred & gt| / |pred | gt|; parts absent from both count as 1."""
    ious = []
    for part in range(n_parts):
        p = pred == part
        g = gt == part
        union = np.count_nonzero(p | g)
        ious.append(1.0 if union == 0 else np.count_nonzero(p & g) / union)
    return float(np.mean(ious))


def miou(predictions, labels, n_parts) -> tuple[list[float], float]:
    """Per-shape IoU and their mean.

    ``predictions``/``labels`` are sequences of per-shape arrays (a single
    pair of arrays is treated as one shape); ``n_parts`` is an int or a
    per-shape sequence.
    """
    if isinstance(predictions, np.ndarray) and predictions.ndim == 1:
        predictions, labels = [predictions], [labels]
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} shapes")
    parts = [n_parts] * len(labels) if np.isscalar(n_parts) else list(n_parts)
    per_shape = []
    for pred, gt, n in zip(predictions, labels, parts):
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction length {pred.shape} vs label length {gt.shape}")
        per_shape.append(shape_iou(pred, gt, int(n)))
    return per_shape, float(np.mean(per_shape)) if per_shape else 0.0


@dataclass
class SegmentationTask:
    """Shapes with local part labels grouped by category; each category owns a block of global part ids."""
    categories: list[str]
    part_counts: dict[str, int]

    def offset(self, cat: str) -> int:
        return sum(self.part_counts[c] for c in self.categories[: self.categories.index(cat)])

    @property
    def total_parts(self) -> int:
        return sum(self.part_counts[c] for c in self.categories)

    def mask_for(self, cats: list[str], sizes: list[int]) -> np.ndarray:
        mask = np.zeros((sum(sizes), self.total_parts), dtype=bool)
        row = 0
        for cat, n in zip(cats, sizes):
            lo = self.offset(cat)
            mask[row:row + n, lo:lo + self.part_counts[cat]] = True
            row += n
        return mask


def train_seg_probe(train_feats: list[np.ndarray], train_labels: list[np.ndarray],
                    train_cats: list[str], task: SegmentationTask,
                    config: ProbeConfig | None = None) -> LinearHead:
    """Point-wise head trained with NLL over each shape's own category parts."""
    config = config or ProbeConfig(head="pointwise_head")
    x = np.concatenate(train_feats)
    y = np.concatenate([lab + task.offset(c) for lab, c in zip(train_labels, train_cats)])
    mask = task.mask_for(train_cats, [len(f) for f in train_feats])
    if len(np.unique(y)) < 2:
        raise ValueError("need at least two part labels in the training split")
    head = fit_linear_head(x, y, task.total_parts, config, mask)
    head.class_ranges = [(task.offset(c), task.offset(c) + task.part_counts[c]) for c in task.categories]
    return head


def predict_parts(head: LinearHead, feats: np.ndarray, cat: str, task: SegmentationTask) -> np.ndarray:
    lo = task.offset(cat)
    return head.predict(feats, (lo, lo + task.part_counts[cat])) - lo


def evaluate_segmentation(head: LinearHead, feats: list[np.ndarray], labels: list[np.ndarray],
                          cats: list[str], task: SegmentationTask) -> tuple[list[float], float]:
    preds = [predict_parts(head, f, c, task) for f, c in zip(feats, cats)]
    return miou(preds, labels, [task.part_counts[c] for c in cats])


# ---------------------------------------------------------------- harnesses

def perturb(cloud: PointCloud, kind: str, level, seed: int) -> PointCloud:
    """Gaussian jitter of std ``level`` or random subsampling to ``level`` points.

    Level 0 noise and full density return the input unchanged.
    """
    if kind == "noise":
        return jitter(cloud, float(level), seed)
    if kind == "density":
        return subsample(cloud, int(level), seed)
    raise ValueError(f"unknown perturbation {kind!r}")


def robustness_sweep(metric_fn, clouds: list[PointCloud], kind: str, levels, seed: int = 0):
    """Re-run ``metric_fn(perturbed_clouds)`` at each level; returns [(level, metric)]."""
    rows = []
    for level in levels:
        perturbed = [perturb(c, kind, level, seed * 1_000_003 + i) for i, c in enumerate(clouds)]
        rows.append((level, float(metric_fn(perturbed))))
    return rows


def classification_metric(model: ContrastiveModel, head: LinearHead, labels):
    labels = np.asarray(labels)

    def metric(clouds):
        return float(np.mean(head.predict(global_features(model, clouds)) == labels))
    return metric


def segmentation_metric(model: ContrastiveModel, head: LinearHead, cats: list[str],
                        task: SegmentationTask):
    def metric(clouds):
        feats = all_point_features(model, clouds)
        return evaluate_segmentation(head, feats, [c.labels for c in clouds], cats, task)[1]
    return metric


def label_fraction_subset(labels, fraction: float, seed: int) -> np.ndarray:
    """Indices of a class-stratified subset (at least one example per class)."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n = max(1, int(round(fraction * len(idx))))
        keep.extend(rng.choice(idx, size=n, replace=False).tolist())
    return np.array(sorted(keep))


def metrics_rows(run_id: str, task: str, split: str, metrics: dict[str, float]) -> list[str]:
    return [f"{run_id},{task},{split},{name},{format(float(v), '.17g')}" for name, v in metrics.items()]
