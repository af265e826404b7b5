"""InfoNCE self-contrastive training of the representation encoder E2."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, ParameterStore, StepDecay, Tensor
from .encoders import (E2_CONFIG, Aggregator, Encoder, EncoderConfig, aggregate_patches,
                       encode, normalized_adjacency)
from .geometry import Patch, PointCloud, build_patches, random_rotation
from .selfsim import ThresholdSchedule, TrainState, TrainingDiverged, mine_hard_negatives, thresholds_at

log = logging.getLogger(__name__)

MINING_MODES = ("interval", "all")
POSITIVE_MODES = ("dilated", "rotated")


def info_nce_loss(z: Tensor, z_pos: Tensor, z_neg: Tensor | None, tau: float) -> Tensor:
    """-log(f(z, z+) / (f(z, z+) + sum_j f(z, z_j))) with f(a, b) = exp(a.b / tau).

    ``z`` and ``z_pos`` are (1, H) or (H,); ``z_neg`` is (n, H) or None.
    Computed as a log-sum-exp so large logits cannot overflow.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z = ad.reshape(z, (1, z.data.size))
    z_pos = ad.reshape(z_pos, (1, z_pos.data.size))
    pos = ad.reshape(ad.row_dot(z, z_pos), (1, 1))
    if z_neg is None or z_neg.data.size == 0:
        parts = [pos]
    else:
        parts = [pos, ad.matmul(z, ad.transpose(z_neg))]
    logits = ad.scale(ad.concat(parts, axis=1), 1.0 / tau)
    lse = ad.logsumexp_rows(logits)
    return ad.reshape(ad.sub(lse, ad.scale(ad.reshape(pos, (1,)), 1.0 / tau)), ())


def batch_info_nce(z: Tensor, z_pos: Tensor, neg_mask: np.ndarray, tau: float,
                   active: np.ndarray | None = None, normalize: bool = False) -> Tensor:
    """Mean InfoNCE over the active anchors of a batch.

    ``neg_mask[i, j]`` marks patch j as a negative for anchor i; rows of
    ``z``/``z_pos`` are anchors and their positives.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    s = z.shape[0]
    neg_mask = np.asarray(neg_mask, dtype=bool)
    if active is None:
        active = np.ones(s, dtype=bool)
    if not active.any():
        raise ValueError("no active anchors in batch")
    if normalize:
        z = ad.l2_normalize_rows(z)
        z_pos = ad.l2_normalize_rows(z_pos)
    pos = ad.reshape(ad.row_dot(z, z_pos), (s, 1))
    gram = ad.matmul(z, ad.transpose(z))
    logits = ad.scale(ad.concat([pos, gram], axis=1), 1.0 / tau)
    mask = np.concatenate([np.ones((s, 1), dtype=bool), neg_mask], axis=1)
    per_anchor = ad.sub(ad.logsumexp_rows(logits, mask), ad.scale(ad.reshape(pos, (s,)), 1.0 / tau))
    weights = active.astype(np.float64) / active.sum()
    return ad.total(ad.mul(per_anchor, Tensor(weights)))


@dataclass(frozen=True)
class ContrastExample:
    anchor: Patch
    positive: Patch
    negatives: tuple[int, ...]

    def __post_init__(self):
        if self.anchor.center != self.positive.center:
            raise ValueError("positive must share the anchor's center")


@dataclass
class ContrastiveConfig:
    tau: float = 0.1
    epochs: int = 50
    batch_size: int = 8
    lr: StepDecay = field(default_factory=lambda: StepDecay(0.002, 0.5, 5))
    schedule: ThresholdSchedule = field(default_factory=ThresholdSchedule)
    dilation: int = 2
    mining: str = "interval"
    positive: str = "dilated"
    normalize: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.mining not in MINING_MODES:
            raise ValueError(f"mining must be one of {MINING_MODES}")
        if self.positive not in POSITIVE_MODES:
            raise ValueError(f"positive must be one of {POSITIVE_MODES}")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")


class ContrastiveModel:
    def __init__(self, encoder_config: EncoderConfig = E2_CONFIG, seed: int = 0):
        rng = np.random.default_rng([seed, 2])
        self.store = ParameterStore()
        self.encoder = Encoder(encoder_config, self.store, "e2", rng)
        self.aggregator = Aggregator(encoder_config.output_dim, self.store, "g2", rng)

    def point_features(self, cloud, training: bool = False) -> Tensor:
        """E2 features of one cloud, or of a list of point arrays stacked row-wise."""
        pts = cloud.points if isinstance(cloud, PointCloud) else cloud
        return encode(pts, self.encoder, training)


def build_examples(cloud: PointCloud, patches: list[Patch], table: np.ndarray,
                   schedule: ThresholdSchedule, epoch: int, d: int = 2,
                   mining: str = "interval") -> tuple[list[ContrastExample], int]:
    """One example per anchor patch; anchors with no mined negatives are skipped.

    Returns the examples and the number of skipped anchors.
    """
    b_l, b_u = thresholds_at(schedule, epoch) if mining == "interval" else (0.0, 1.0)
    positives = build_patches(cloud, [p.center for p in patches], patches[0].k, d)
    examples, skipped = [], 0
    for i, (anchor, pos) in enumerate(zip(patches, positives)):
        negs = mine_hard_negatives(table, i, b_l, b_u)
        if not negs:
            skipped += 1
            continue
        examples.append(ContrastExample(anchor, pos, tuple(negs)))
    return examples, skipped


@dataclass
class _Prepared:
    cloud: PointCloud
    patches: list[Patch]
    positives: list[Patch]
    table: np.ndarray
    anchor_members: np.ndarray
    pos_members: np.ndarray
    anchor_adj: np.ndarray
    pos_adj: np.ndarray


def _prepare(cloud: PointCloud, patches: list[Patch], table: np.ndarray, d: int) -> _Prepared:
    positives = build_patches(cloud, [p.center for p in patches], patches[0].k, d)
    am = np.array([p.members for p in patches])
    pm = np.array([p.members for p in positives])
    return _Prepared(cloud, patches, positives, np.asarray(table), am, pm,
                     np.stack([normalized_adjacency(cloud.points[m]) for m in am]),
                     np.stack([normalized_adjacency(cloud.points[m]) for m in pm]))


def batch_loss(model: ContrastiveModel, batch: list[_Prepared], b_l: float, b_u: float,
               config: ContrastiveConfig, rng: np.random.Generator | None = None,
               training: bool = True) -> tuple[Tensor | None, dict]:
    """InfoNCE over a batch of clouds; returns (loss or None if every anchor skipped, stats)."""
    segments = [p.cloud.points for p in batch]
    if config.positive == "rotated":
        rotated = []
        for p in batch:
            rot = random_rotation(int(rng.integers(2**63)), p.cloud.points.mean(axis=0))
            rotated.append(rot.apply(p.cloud.points))
        segments = segments + rotated
    feats = encode(segments, model.encoder, training)
    offsets = np.cumsum([0] + [len(s) for s in segments])
    n_clouds = len(batch)
    am = np.concatenate([p.anchor_members + offsets[c] for c, p in enumerate(batch)])
    if config.positive == "rotated":
        pm = np.concatenate([p.anchor_members + offsets[n_clouds + c] for c, p in enumerate(batch)])
        padj = np.concatenate([p.anchor_adj for p in batch])
    else:
        pm = np.concatenate([p.pos_members + offsets[c] for c, p in enumerate(batch)])
        padj = np.concatenate([p.pos_adj for p in batch])
    aadj = np.concatenate([p.anchor_adj for p in batch])
    w = model.aggregator.weight
    z = aggregate_patches(feats, am, aadj, w)
    z_pos = aggregate_patches(feats, pm, padj, w)

    total = len(am)
    mask = np.zeros((total, total), dtype=bool)
    start = 0
    neg_counts = []
    for p in batch:
        m = len(p.patches)
        for i in range(m):
            negs = mine_hard_negatives(p.table, i, b_l, b_u)
            mask[start + i, [start + j for j in negs]] = True
            neg_counts.append(len(negs))
        start += m
    active = mask.any(axis=1)
    stats = {"negatives": neg_counts, "skipped": int((~active).sum())}
    if not active.any():
        return None, stats
    return batch_info_nce(z, z_pos, mask, config.tau, active, config.normalize), stats


def prepare_samples(samples: list[tuple[PointCloud, list[Patch]]], tables: list[np.ndarray],
                    dilation: int) -> list[_Prepared]:
    return [_prepare(c, p, t, dilation) for (c, p), t in zip(samples, tables)]


def train_contrastive(samples: list[tuple[PointCloud, list[Patch]]], tables: list[np.ndarray],
                      model: ContrastiveModel, config: ContrastiveConfig,
                      state: TrainState | None = None, stop_after: int | None = None,
                      on_epoch=None) -> TrainState:
    """Adam on mean InfoNCE with negatives mined from frozen similarity ``tables``.

    With ``config.mining == "all"`` every other patch of the cloud is a
    negative at every epoch.  Each history row records loss, the active
    interval, mean negative-set size and the number of skipped anchors.
    """
    prepared = prepare_samples(samples, tables, config.dilation)
    if state is None:
        state = TrainState(0, Adam(model.store, config.lr.initial_lr))
    done = 0
    while state.epoch < config.epochs:
        if stop_after is not None and done >= stop_after:
            break
        epoch = state.epoch
        rng = np.random.default_rng([config.seed, 3, epoch])
        if config.mining == "interval":
            b_l, b_u = thresholds_at(config.schedule, epoch)
        else:
            b_l, b_u = 0.0, 1.0
        lr = config.lr.lr_at(epoch)
        order = rng.permutation(len(prepared))
        losses, weights, negs, skipped = [], [], [], 0
        for start in range(0, len(order), config.batch_size):
            batch = [prepared[i] for i in order[start:start + config.batch_size]]
            model.store.zero_grad()
            loss, stats = batch_loss(model, batch, b_l, b_u, config, rng)
            negs.extend(stats["negatives"])
            skipped += stats["skipped"]
            if loss is None:
                continue
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"InfoNCE loss is {value} at epoch {epoch}")
            loss.backward()
            state.optimizer.step(lr)
            n_active = len(stats["negatives"]) - stats["skipped"]
            losses.append(value * n_active)
            weights.append(n_active)
        mean_loss = float(sum(losses) / sum(weights)) if weights else 0.0
        state.history.append({"epoch": epoch, "loss": mean_loss, "b_l": b_l, "b_u": b_u,
                              "mean_negatives": float(np.mean(negs)) if negs else 0.0,
                              "skipped_anchors": skipped})
        log.info("contrastive epoch %d loss %.6f [%g, %g] negatives %.2f skipped %d", epoch,
                 mean_loss, b_l, b_u, state.history[-1]["mean_negatives"], skipped)
        state.epoch += 1
        done += 1
        if on_epoch is not None:
            on_epoch(state)
    return state


def loss_log_rows(history: list[dict]) -> list[str]:
    lines = ["epoch,loss,b_l,b_u,mean_negatives,skipped_anchors"]
    for h in history:
        lines.append(",".join([str(h["epoch"]), format(h["loss"], ".17g"), format(h["b_l"], ".17g"),
                               format(h["b_u"], ".17g"), format(h["mean_negatives"], ".17g"),
                               str(h["skipped_anchors"])]))
    return lines
