"""Patch self-similarity network, cosine patch similarity and hard-negative mining."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, ParameterStore, StepDecay, Tensor
from .encoders import (E1_CONFIG, Aggregator, Discriminator, Encoder, EncoderConfig,
                       aggregate_patches, encode, normalized_adjacency)
from .geometry import Patch, PointCloud, build_patches, farthest_point_sample, random_rotation

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
NORM_FLOOR = 1e-12


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class PairBatch:
    """Similar pairs (anchor index, rotated anchor coordinates) and dissimilar (i, j) pairs."""
    similar: list[tuple[int, np.ndarray]]
    dissimilar: list[tuple[int, int]]

    def __post_init__(self):
        if not self.similar or not self.dissimilar:
            raise ValueError("a pair batch needs at least one similar and one dissimilar pair")
        if any(i == j for i, j in self.dissimilar):
            raise ValueError("dissimilar pair with i == j")


def sample_pairs(cloud: PointCloud, patches: list[Patch], a: int, b: int, seed) -> PairBatch:
    """Rotated-anchor similar pairs and random other-patch dissimilar pairs.

    Anchors cycle through a random permutation of the patches.  Each
    anchor's dissimilar partners are drawn without replacement from the
    other patches (the pool refills if an anchor needs more than M-1).
    """
    m = len(patches)
    if m < 2:
        raise ValueError("need at least 2 patches to form dissimilar pairs")
    if a < 1 or b < 1:
        raise ValueError("A and B must be >= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(m)
    similar = []
    for t in range(a):
        i = int(order[t % m])
        members = list(patches[i].members)
        pivot = cloud.points[members].mean(axis=0)
        rot = random_rotation(int(rng.integers(2**63)), pivot)
        similar.append((i, rot.apply(cloud.points[members])))
    order = rng.permutation(m)
    pools: dict[int, list[int]] = {}
    dissimilar = []
    for t in range(b):
        i = int(order[t % m])
        pool = pools.get(i)
        if not pool:
            pool = [int(j) for j in rng.permutation(m) if j != i]
            pools[i] = pool
        dissimilar.append((i, pool.pop()))
    return PairBatch(similar, dissimilar)


def similarity_loss(sim_scores, dis_scores):
    """Binary cross-entropy of the pair discriminator.

    Accepts Tensors (returns a Tensor) or plain arrays (returns a float).
    """
    as_float = not isinstance(sim_scores, Tensor)
    s = sim_scores if isinstance(sim_scores, Tensor) else Tensor(np.asarray(sim_scores, float).reshape(-1))
    d = dis_scores if isinstance(dis_scores, Tensor) else Tensor(np.asarray(dis_scores, float).reshape(-1))
    for arr in (s.data, d.data):
        if arr.size == 0:
            raise ValueError("need at least one score of each kind")
        if np.any(arr < 0) or np.any(arr > 1) or not np.all(np.isfinite(arr)):
            raise ValueError("scores must lie in [0, 1]")
    n = s.data.size + d.data.size
    pos = ad.total(ad.log(s, LOG_FLOOR))
    neg = ad.total(ad.log(ad.add_scalar(ad.scale(d, -1.0), 1.0), LOG_FLOOR))
    loss = ad.scale(ad.add(pos, neg), -1.0 / n)
    return loss.item() if as_float else loss


def cosine_similarity(g_i: np.ndarray, g_j: np.ndarray) -> float:
    """|g_i . g_j| / (|g_i| |g_j|), or 0 if either norm is below 1e-12."""
    ni, nj = np.linalg.norm(g_i), np.linalg.norm(g_j)
    if ni < NORM_FLOOR or nj < NORM_FLOOR:
        return 0.0
    return float(min(1.0, abs(float(np.dot(g_i, g_j))) / (ni * nj)))


def cosine_table(emb: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(emb, axis=1)
    ok = norms >= NORM_FLOOR
    unit = np.where(ok[:, None], emb / np.where(ok, norms, 1.0)[:, None], 0.0)
    table = np.minimum(np.abs(unit @ unit.T), 1.0)
    table = 0.5 * (table + table.T)
    idx = np.flatnonzero(ok)
    table[idx, idx] = 1.0
    return table


# ---------------------------------------------------------------- model

@dataclass
class SimilarityConfig:
    epochs: int = 16
    batch_size: int = 8
    lr: StepDecay = field(default_factory=lambda: StepDecay(0.002, 0.8, 2))
    pairs_a: int | None = None
    pairs_b: int | None = None
    seed: int = 0


class SimilarityModel:
    """E1 encoder, G1 aggregator and discriminator D over patch-local coordinates.

    Every patch (anchor, rotated copy, or partner) is encoded on its own
    member coordinates, translated to the patch centroid, so that rotated
    copies and other patches are all seen through the same path.
    """

    def __init__(self, encoder_config: EncoderConfig = E1_CONFIG, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.store = ParameterStore()
        self.encoder = Encoder(encoder_config, self.store, "e1", rng)
        self.aggregator = Aggregator(encoder_config.output_dim, self.store, "g1", rng)
        self.discriminator = Discriminator(encoder_config.output_dim, self.store, rng)

    def embed(self, coord_sets: list[np.ndarray], training: bool = False,
              graphs=None) -> Tensor:
        """G1(E1(patch)) for each coordinate set; all sets must have equal size."""
        sets = [np.asarray(c, dtype=np.float64) for c in coord_sets]
        m = len(sets[0])
        if any(len(c) != m for c in sets):
            raise ValueError("all patches in one call must have the same size")
        centered = [c - c.mean(axis=0) for c in sets]
        feats = encode(centered, self.encoder, training, graphs)
        members = np.arange(len(sets) * m).reshape(len(sets), m)
        adj = np.stack([normalized_adjacency(c) for c in centered])
        return aggregate_patches(feats, members, adj, self.aggregator.weight)

    def embeddings(self, cloud: PointCloud, patches: list[Patch]) -> np.ndarray:
        return self.embed([cloud.points[list(p.members)] for p in patches]).data

    def score(self, left: Tensor, right: Tensor) -> Tensor:
        return self.discriminator(left, right)


def patch_similarity(model: SimilarityModel, cloud: PointCloud, patch_i: Patch,
                     patch_j: Patch) -> float:
    emb = model.embeddings(cloud, [patch_i, patch_j])
    return cosine_similarity(emb[0], emb[1])


def similarity_table(model: SimilarityModel, cloud: PointCloud, patches: list[Patch]) -> np.ndarray:
    """Symmetric M x M table of patch similarities under the frozen model (eval mode)."""
    return cosine_table(model.embeddings(cloud, patches))


def make_patches(cloud: PointCloud, m: int, k: int, seed: int = 0) -> list[Patch]:
    return build_patches(cloud, farthest_point_sample(cloud, m, seed), k)


def batch_loss(model: SimilarityModel, items: list[tuple[PointCloud, list[Patch], PairBatch]],
               training: bool = True) -> Tensor:
    """Similarity loss over several clouds' pair batches, encoded in one pass."""
    coord_sets = []
    sim_idx, dis_idx = [], []
    for cloud, patches, pairs in items:
        base = len(coord_sets)
        coord_sets.extend(cloud.points[list(p.members)] for p in patches)
        for i, rotated in pairs.similar:
            sim_idx.append((base + i, len(coord_sets)))
            coord_sets.append(rotated)
        dis_idx.extend((base + i, base + j) for i, j in pairs.dissimilar)
    emb = model.embed(coord_sets, training)
    sim_l, sim_r = zip(*sim_idx)
    dis_l, dis_r = zip(*dis_idx)
    sim = model.score(ad.gather_rows(emb, sim_l), ad.gather_rows(emb, sim_r))
    dis = model.score(ad.gather_rows(emb, dis_l), ad.gather_rows(emb, dis_r))
    return similarity_loss(sim, dis)


@dataclass
class TrainState:
    """Resumable training progress: next epoch, optimizer, and the loss history so far."""
    epoch: int
    optimizer: Adam
    history: list[dict] = field(default_factory=list)


def _epoch_seed(seed: int, epoch: int, stage: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, epoch])


def train_similarity(samples: list[tuple[PointCloud, list[Patch]]], model: SimilarityModel,
                     config: SimilarityConfig, state: TrainState | None = None,
                     stop_after: int | None = None, on_epoch=None) -> TrainState:
    """Adam on the similarity loss; every epoch visits each cloud once.

    Randomness is derived from ``(seed, epoch)`` so a run resumed from a
    saved :class:`TrainState` replays exactly.  ``stop_after`` ends the call
    after that many epochs (to emulate interruption); ``on_epoch(state)``
    runs after each completed epoch.
    """
    if state is None:
        state = TrainState(0, Adam(model.store, config.lr.initial_lr))
    done = 0
    while state.epoch < config.epochs:
        if stop_after is not None and done >= stop_after:
            break
        epoch = state.epoch
        rng = _epoch_seed(config.seed, epoch, 1)
        order = rng.permutation(len(samples))
        lr = config.lr.lr_at(epoch)
        losses = []
        for start in range(0, len(order), config.batch_size):
            items = []
            for idx in order[start:start + config.batch_size]:
                cloud, patches = samples[idx]
                m = len(patches)
                pairs = sample_pairs(cloud, patches, config.pairs_a or m, config.pairs_b or m,
                                     int(rng.integers(2**63)))
                items.append((cloud, patches, pairs))
            model.store.zero_grad()
            loss = batch_loss(model, items, training=True)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"similarity loss is {loss.item()} at epoch {epoch}, "
                                       f"batch starting {start}")
            loss.backward()
            state.optimizer.step(lr)
            losses.append(loss.item())
        state.history.append({"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr})
        log.info("similarity epoch %d loss %.6f", epoch, state.history[-1]["loss"])
        state.epoch += 1
        done += 1
        if on_epoch is not None:
            on_epoch(state)
    return state


# ---------------------------------------------------------------- thresholds and mining

@dataclass(frozen=True)
class ThresholdSchedule:
    """Linearly annealed hard-negative interval [b_l, b_u].

    After ``warmup_epochs`` the interval narrows every ``interval_epochs``:
    b_u drops by ``step_u`` and b_l rises by ``step_l``.  Narrowing stops
    where the gap would fall below ``min_gap``; from then on the interval
    stays fixed, which keeps both ends monotone.
    """
    b_l0: float = 0.0
    b_u0: float = 1.0
    step_l: float = 0.05
    step_u: float = 0.025
    warmup_epochs: int = 30
    interval_epochs: int = 5
    min_gap: float = 0.05

    def __post_init__(self):
        if not 0 <= self.b_l0 <= self.b_u0 <= 1:
            raise ValueError("need 0 <= b_l0 <= b_u0 <= 1")
        if self.warmup_epochs < 1 or self.interval_epochs < 1:
            raise ValueError("warmup and interval must be >= 1")
        if self.min_gap <= 0 or self.b_u0 - self.b_l0 < self.min_gap:
            raise ValueError("min_gap must be positive and fit in the initial interval")
        if self.step_l < 0 or self.step_u < 0:
            raise ValueError("steps must be non-negative")


FULL_SCALE_SCHEDULE = ThresholdSchedule(0.0, 1.0, 0.05, 0.025, 300, 20, 0.05)


def thresholds_at(schedule: ThresholdSchedule, epoch: int) -> tuple[float, float]:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    s = schedule
    steps = max(0, (epoch - s.warmup_epochs) // s.interval_epochs)
    rate = s.step_l + s.step_u
    if rate > 0:
        steps = min(float(steps), (s.b_u0 - s.b_l0 - s.min_gap) / rate)
    b_l = min(max(s.b_l0 + steps * s.step_l, 0.0), 1.0)
    b_u = min(max(s.b_u0 - steps * s.step_u, 0.0), 1.0)
    return b_l, b_u


def mine_hard_negatives(table: np.ndarray, anchor: int, b_l: float, b_u: float) -> list[int]:
    """Indices j != anchor whose similarity to the anchor lies in [b_l, b_u]."""
    if not 0 <= b_l <= b_u <= 1:
        raise ValueError(f"invalid interval [{b_l}, {b_u}]")
    row = np.asarray(table)[anchor]
    hit = (row >= b_l) & (row <= b_u)
    hit[anchor] = False
    return [int(j) for j in np.flatnonzero(hit)]


def mining_rows(table: np.ndarray, b_l: float, b_u: float, all_pairs: bool = False) -> list[str]:
    """CSV lines ``anchor,candidate,similarity,is_hard_negative`` (header included).

    Only mined pairs are listed unless ``all_pairs``.
    """
    lines = ["anchor,candidate,similarity,is_hard_negative"]
    m = len(table)
    for i in range(m):
        mined = set(mine_hard_negatives(table, i, b_l, b_u))
        for j in range(m):
            if j == i or (not all_pairs and j not in mined):
                continue
            lines.append(f"{i},{j},{format(float(table[i, j]), '.17g')},{int(j in mined)}")
    return lines
