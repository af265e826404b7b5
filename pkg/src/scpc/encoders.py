"""EdgeConv encoders, GCN + average-pool aggregators and the pair discriminator.

Parameter names follow ``<prefix>.layer<i>.theta``, ``<prefix>.layer<i>.phi``,
``<prefix>.layer<i>.bn.{gamma,beta,running_mean,running_var}``,
``<prefix>.fc.weight``, ``<prefix>.fc.bn.*`` (or
``<prefix>.fc.bias`` when batch norm is off), ``<g>.gcn.weight``,
``disc.weight`` and ``disc.bias``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor

LEAKY_SLOPE = 0.2
PATCH_GRAPH_K = 4
LOGIT_CLAMP = 30.0


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 2
    channel_widths: tuple[int, ...] = (32, 32)
    knn_k: int = 8
    dynamic_graph: bool = True
    output_dim: int = 16
    concat_layers: bool = False
    batch_norm: bool = True
    input_dim: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channel_widths", tuple(int(w) for w in self.channel_widths))
        if self.n_layers != len(self.channel_widths):
            raise ValueError(f"n_layers={self.n_layers} but {len(self.channel_widths)} widths")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")
        if self.output_dim < 1 or any(w < 1 for w in self.channel_widths):
            raise ValueError("widths must be positive")


# desk-scale defaults
E1_CONFIG = EncoderConfig(2, (32, 32), 8, True, 16, concat_layers=False)
E2_CONFIG = EncoderConfig(4, (32, 32, 32, 32), 8, True, 64, concat_layers=True)
# widths as described for the full-size networks
E1_FULL_CONFIG = EncoderConfig(4, (32, 32, 64, 128), 20, True, 32, concat_layers=False)
E2_FULL_CONFIG = EncoderConfig(8, (64,) * 8, 20, True, 256, concat_layers=True)


# ---------------------------------------------------------------- graphs

def _pairwise_sq(feats: np.ndarray) -> np.ndarray:
    # (..., P, C) -> (..., P, P) squared distances via the Gram matrix
    gram = feats @ np.swapaxes(feats, -1, -2)
    sq = np.diagonal(gram, axis1=-2, axis2=-1)
    d = sq[..., :, None] + sq[..., None, :] - 2.0 * gram
    return np.maximum(d, 0.0)


def _smallest_k(d: np.ndarray, k: int) -> np.ndarray:
    """Row-wise indices of the k smallest entries, ordered by (value, index)."""
    rows, cols = d.shape
    if k < cols:
        part = np.argpartition(d, k - 1, axis=1)[:, :k]
    else:
        part = np.broadcast_to(np.arange(cols), (rows, cols)).copy()
    vals = np.take_along_axis(d, part, axis=1)
    kth = vals.max(axis=1)
    # rows where the k-th value is shared with an unselected entry need the exact tie-break
    tied = np.count_nonzero(d <= kth[:, None], axis=1) > k
    order = np.lexsort((part, vals), axis=1)
    out = np.take_along_axis(part, order, axis=1)
    if tied.any():
        out[tied] = np.argsort(d[tied], axis=1, kind="stable")[:, :k]
    return out


def dynamic_knn_graph(features: np.ndarray, k: int) -> np.ndarray:
    """(P, k) neighbour indices by Euclidean distance, self excluded, ties to lowest index."""
    features = np.asarray(features, dtype=np.float64)
    p = len(features)
    if not 1 <= k < p:
        raise ValueError(f"k={k} invalid for {p} rows (need 1 <= k < P)")
    d = _pairwise_sq(features)
    np.fill_diagonal(d, np.inf)
    return _smallest_k(d, k)


def _batched_knn(feats: np.ndarray, k: int) -> np.ndarray:
    # feats: (S, m, C) -> (S, m, k) local indices
    s, m, _ = feats.shape
    d = _pairwise_sq(feats)
    idx = np.arange(m)
    d[:, idx, idx] = np.inf
    return _smallest_k(d.reshape(s * m, m), k).reshape(s, m, k)


def segment_knn_graph(features: np.ndarray, sizes: list[int], k: int) -> np.ndarray:
    """kNN within each consecutive segment of rows; returns global (P, k) indices."""
    sizes = list(sizes)
    if len(set(sizes)) == 1 and len(sizes) > 1:
        m = sizes[0]
        local = _batched_knn(features.reshape(len(sizes), m, -1), k)
        offsets = (np.arange(len(sizes)) * m)[:, None, None]
        return (local + offsets).reshape(-1, k)
    out = []
    start = 0
    for n in sizes:
        out.append(dynamic_knn_graph(features[start:start + n], k) + start)
        start += n
    return np.concatenate(out, axis=0)


def normalized_adjacency(coords: np.ndarray, k: int | None = None) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 of the symmetrized kNN graph over ``coords``."""
    coords = np.asarray(coords, dtype=np.float64)
    m = len(coords)
    k = min(PATCH_GRAPH_K, m - 1) if k is None else k
    a = np.eye(m)
    if k >= 1:
        nbr = dynamic_knn_graph(coords, k)
        rows = np.repeat(np.arange(m), k)
        a[rows, nbr.ravel()] = 1.0
        a[nbr.ravel(), rows] = 1.0
    dinv = 1.0 / np.sqrt(a.sum(axis=1))
    return a * dinv[:, None] * dinv[None, :]


# ---------------------------------------------------------------- layers

def _init_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


def _add_bn(store: ParameterStore, prefix: str, width: int) -> None:
    store.add(f"{prefix}.gamma", np.ones(width))
    store.add(f"{prefix}.beta", np.zeros(width))
    store.add_buffer(f"{prefix}.running_mean", np.zeros(width))
    store.add_buffer(f"{prefix}.running_var", np.ones(width))


def _apply_bn(x: Tensor, store: ParameterStore, prefix: str, training: bool) -> Tensor:
    return ad.batch_norm(x, store[f"{prefix}.gamma"], store[f"{prefix}.beta"],
                         store.buffers[f"{prefix}.running_mean"],
                         store.buffers[f"{prefix}.running_var"], training)


def edgeconv(x: Tensor, neighbors: np.ndarray, theta: Tensor, phi: Tensor,
             bn=None, training: bool = False) -> Tensor:
    """max_j LeakyReLU(BN(theta^T (x_j - x_i) + phi^T x_i)) over the neighbours j of i.

    ``bn`` is ``None`` (no normalization) or a ``(store, prefix)`` pair.
    """
    p, c = x.shape
    if theta.shape[0] != c or phi.shape != theta.shape:
        raise ad.ShapeError(f"edgeconv: input {x.shape} vs theta {theta.shape} / phi {phi.shape}")
    if neighbors.shape[0] != p:
        raise ad.ShapeError(f"edgeconv: graph has {neighbors.shape[0]} rows, features {p}")
    k = neighbors.shape[1]
    a = ad.matmul(x, theta)
    center = ad.sub(ad.matmul(x, phi), a)
    rep = np.repeat(np.arange(p), k)
    edges = ad.add(ad.gather_rows(a, neighbors.ravel()), ad.gather_rows(center, rep))
    if bn is not None:
        edges = _apply_bn(edges, bn[0], bn[1], training)
    return ad.group_max(ad.leaky_relu(edges, LEAKY_SLOPE), k)


class Encoder:
    """Stack of EdgeConv layers followed by one fully-connected projection."""

    def __init__(self, config: EncoderConfig, store: ParameterStore, prefix: str,
                 rng: np.random.Generator):
        self.config = config
        self.store = store
        self.prefix = prefix
        c_in = config.input_dim
        for i, w in enumerate(config.channel_widths):
            store.add(f"{prefix}.layer{i}.theta", _init_weight(rng, c_in, w))
            store.add(f"{prefix}.layer{i}.phi", _init_weight(rng, c_in, w))
            if config.batch_norm:
                _add_bn(store, f"{prefix}.layer{i}.bn", w)
            c_in = w
        fc_in = sum(config.channel_widths) if config.concat_layers else config.channel_widths[-1]
        store.add(f"{prefix}.fc.weight", _init_weight(rng, fc_in, config.output_dim))
        # a bias in front of batch norm is cancelled exactly, so only one of the two
        if config.batch_norm:
            _add_bn(store, f"{prefix}.fc.bn", config.output_dim)
        else:
            store.add(f"{prefix}.fc.bias", np.zeros(config.output_dim))

    def __call__(self, segments, training: bool = False) -> Tensor:
        return encode(segments, self, training)


def encode(segments, encoder: Encoder, training: bool = False,
           graphs: list[np.ndarray] | None = None) -> Tensor:
    """Point-wise features for one or more point sets stacked row-wise.

    ``segments`` is an (n, 3) array or a list of them; kNN graphs never
    cross segment boundaries.  ``graphs`` optionally fixes the neighbour
    lists per layer (used by gradient checks so the discrete graph does not
    move under finite-difference perturbations).
    """
    cfg = encoder.config
    store, prefix = encoder.store, encoder.prefix
    if isinstance(segments, np.ndarray) and segments.ndim == 2:
        segments = [segments]
    sizes = [len(s) for s in segments]
    coords = np.concatenate([np.asarray(s, dtype=np.float64) for s in segments], axis=0)
    k = min(cfg.knn_k, min(sizes) - 1)
    if sizes == [1]:
        # a lone point is its own (only) neighbour
        graphs = graphs or [np.zeros((1, 1), dtype=np.int64)] * cfg.n_layers
    elif k < 1:
        raise ValueError("every point set in a batch needs at least 2 points")
    x = Tensor(coords)
    static = None if cfg.dynamic_graph or graphs is not None else segment_knn_graph(coords, sizes, k)
    outs = []
    for i in range(cfg.n_layers):
        if graphs is not None:
            nbr = graphs[i]
        elif static is not None:
            nbr = static
        else:
            nbr = segment_knn_graph(x.data, sizes, k)
        bn = (store, f"{prefix}.layer{i}.bn") if cfg.batch_norm else None
        x = edgeconv(x, nbr, store[f"{prefix}.layer{i}.theta"], store[f"{prefix}.layer{i}.phi"],
                     bn, training)
        outs.append(x)
    h = ad.concat(outs, axis=1) if cfg.concat_layers and len(outs) > 1 else outs[-1]
    h = ad.matmul(h, store[f"{prefix}.fc.weight"])
    if cfg.batch_norm:
        h = _apply_bn(h, store, f"{prefix}.fc.bn", training)
    else:
        h = ad.add_bias(h, store[f"{prefix}.fc.bias"])
    return ad.leaky_relu(h, LEAKY_SLOPE)


def encoder_graphs(segments, encoder: Encoder) -> list[np.ndarray]:
    """Neighbour lists each layer would use on ``segments`` in eval mode."""
    cfg = encoder.config
    if isinstance(segments, np.ndarray) and segments.ndim == 2:
        segments = [segments]
    sizes = [len(s) for s in segments]
    coords = np.concatenate(segments, axis=0)
    k = min(cfg.knn_k, min(sizes) - 1)
    if sizes == [1]:
        return [np.zeros((1, 1), dtype=np.int64)] * cfg.n_layers
    if not cfg.dynamic_graph:
        return [segment_knn_graph(coords, sizes, k)] * cfg.n_layers
    graphs = []
    x = Tensor(coords)
    store, prefix = encoder.store, encoder.prefix
    for i in range(cfg.n_layers):
        nbr = segment_knn_graph(x.data, sizes, k)
        graphs.append(nbr)
        bn = (store, f"{prefix}.layer{i}.bn") if cfg.batch_norm else None
        x = edgeconv(x, nbr, Tensor(store[f"{prefix}.layer{i}.theta"].data),
                     Tensor(store[f"{prefix}.layer{i}.phi"].data), bn, training=False)
    return graphs


# ---------------------------------------------------------------- aggregation

class Aggregator:
    """One GCN layer with LeakyReLU followed by a mean over patch rows."""

    def __init__(self, dim: int, store: ParameterStore, prefix: str, rng: np.random.Generator):
        self.dim = dim
        self.store = store
        self.prefix = prefix
        store.add(f"{prefix}.gcn.weight", _init_weight(rng, dim, dim))

    @property
    def weight(self) -> Tensor:
        return self.store[f"{self.prefix}.gcn.weight"]

    def __call__(self, rows: Tensor, adjacency: np.ndarray) -> Tensor:
        return aggregate(rows, self.weight, adjacency)

    def patches(self, features: Tensor, members: np.ndarray, adjacency: np.ndarray) -> Tensor:
        return aggregate_patches(features, members, adjacency, self.weight)


def aggregate(rows: Tensor, weight: Tensor, adjacency: np.ndarray) -> Tensor:
    """LeakyReLU(A_hat @ rows @ W) averaged over rows; returns shape (1, C)."""
    h = ad.matmul(Tensor(adjacency), ad.matmul(rows, weight))
    return ad.avg_pool_rows(ad.leaky_relu(h, LEAKY_SLOPE))


def aggregate_patches(features: Tensor, members: np.ndarray, adjacency: np.ndarray,
                      weight: Tensor) -> Tensor:
    """Aggregate S equal-size patches at once.

    ``members`` is (S, m) row indices into ``features``; ``adjacency`` is
    (S, m, m).  Returns (S, C).
    """
    members = np.asarray(members)
    s, m = members.shape
    rows = ad.gather_rows(features, members.ravel())
    h = ad.block_matmul(adjacency, ad.matmul(rows, weight))
    return ad.group_mean(ad.leaky_relu(h, LEAKY_SLOPE), m)


def patch_adjacency(coord_sets) -> np.ndarray:
    return np.stack([normalized_adjacency(c) for c in coord_sets])


# ---------------------------------------------------------------- discriminator

class Discriminator:
    def __init__(self, dim: int, store: ParameterStore, rng: np.random.Generator,
                 prefix: str = "disc"):
        self.dim = dim
        self.store = store
        self.prefix = prefix
        store.add(f"{prefix}.weight", rng.normal(0.0, np.sqrt(1.0 / (2 * dim)), size=(2 * dim, 1)))
        store.add(f"{prefix}.bias", np.zeros(1))

    def __call__(self, left: Tensor, right: Tensor) -> Tensor:
        return discriminate(left, right, self.store[f"{self.prefix}.weight"],
                            self.store[f"{self.prefix}.bias"])


def discriminate(left: Tensor, right: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """sigmoid(clamp(weight . [left, right] + bias)) for each row pair; shape (R,)."""
    if left.shape != right.shape:
        raise ad.ShapeError(f"discriminate: {left.shape} vs {right.shape}")
    if weight.shape != (2 * left.shape[1], 1):
        raise ad.ShapeError(f"discriminate: weight {weight.shape} vs pair width {2 * left.shape[1]}")
    logits = ad.add_bias(ad.matmul(ad.concat([left, right], axis=1), weight), bias)
    logits = ad.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    return ad.reshape(ad.sigmoid(logits), (left.shape[0],))

