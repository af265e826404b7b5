"""Finite-difference gradient suite over every differentiable op and the composed models.

Each check is a builder ``rng -> (loss_fn, tensors)``; the suite evaluates it
at several random points and reports the worst relative error between
backpropagation and central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor, gradient_check
from .contrastive import batch_info_nce, info_nce_loss
from .encoders import (Encoder, EncoderConfig, aggregate, aggregate_patches, discriminate, edgeconv,
                       encode, encoder_graphs, normalized_adjacency)
from .selfsim import similarity_loss

TOLERANCE = 1e-4
POINTS = 5


@dataclass
class CheckResult:
    name: str
    errors: list[float] = field(default_factory=list)
    tolerance: float = TOLERANCE

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else float("nan")

    @property
    def passed(self) -> bool:
        return bool(self.errors) and all(e < self.tolerance for e in self.errors)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<22} points={len(self.errors)} max_rel_err={self.max_error:.1e} {status}"


def _leaf(arr) -> Tensor:
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


def _project(out: Tensor, rng: np.random.Generator) -> "callable":
    """A fixed random linear functional, so every output entry feeds the loss."""
    weights = Tensor(rng.normal(size=out.shape))
    return lambda t: ad.total(ad.mul(t, weights))


def _away_from(rng, shape, points, margin=0.05, low=-2.0, high=2.0) -> np.ndarray:
    """Uniform samples that keep ``margin`` clear of every kink location in ``points``."""
    x = rng.uniform(low, high, shape)
    for p in points:
        near = np.abs(x - p) < margin
        x = np.where(near, p + np.sign(x - p + 1e-300) * margin * 2, x)
    return x


def _unary(op):
    def build(rng):
        x = _leaf(rng.normal(size=(4, 3)))
        proj = _project(op(x), rng)
        return lambda: proj(op(x)), [x]
    return build


def _binary(op, shape_a=(4, 3), shape_b=(4, 3)):
    def build(rng):
        a, b = _leaf(rng.normal(size=shape_a)), _leaf(rng.normal(size=shape_b))
        proj = _project(op(a, b), rng)
        return lambda: proj(op(a, b)), [a, b]
    return build


def _with_input(make_input, op):
    def build(rng):
        x = _leaf(make_input(rng))
        proj = _project(op(x), rng)
        return lambda: proj(op(x)), [x]
    return build


def _block_matmul(rng):
    blocks = rng.normal(size=(2, 3, 3))
    x = _leaf(rng.normal(size=(6, 2)))
    proj = _project(ad.block_matmul(blocks, x), rng)
    return lambda: proj(ad.block_matmul(blocks, x)), [x]


def _gather(rng):
    x = _leaf(rng.normal(size=(5, 3)))
    idx = np.array([0, 3, 3, 1, 4, 0, 2])
    proj = _project(ad.gather_rows(x, idx), rng)
    return lambda: proj(ad.gather_rows(x, idx)), [x]


def _logsumexp(rng):
    x = _leaf(rng.normal(size=(4, 5)) * 3)
    mask = rng.random((4, 5)) < 0.6
    mask[:, 0] = True
    proj = _project(ad.logsumexp_rows(x, mask), rng)
    return lambda: proj(ad.logsumexp_rows(x, mask)), [x]


def _batch_norm(training):
    def build(rng):
        x = _leaf(rng.normal(size=(6, 3)) * 2 + 1)
        gamma, beta = _leaf(rng.normal(size=3)), _leaf(rng.normal(size=3))
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, 3)

        def fwd():
            return ad.batch_norm(x, gamma, beta, rm.copy(), rv.copy(), training)
        proj = _project(fwd(), rng)
        return lambda: proj(fwd()), [x, gamma, beta]
    return build


def _concat(axis):
    def build(rng):
        shape_b = (4, 2) if axis == 1 else (2, 3)
        a, b = _leaf(rng.normal(size=(4, 3))), _leaf(rng.normal(size=shape_b))
        proj = _project(ad.concat([a, b], axis), rng)
        return lambda: proj(ad.concat([a, b], axis)), [a, b]
    return build


# ---------------------------------------------------------------- composed

def _randomize(store: ParameterStore, rng: np.random.Generator) -> None:
    """Fresh random values for every parameter and running statistic."""
    for name, p in store.params.items():
        p.data = rng.normal(0.0, 1.0 if ".bn." in name else 0.5, p.shape)
    for name, b in store.buffers.items():
        b[...] = rng.uniform(0.5, 2.0, b.shape) if name.endswith("running_var") else rng.normal(size=b.shape)


def _encoder_check(config: EncoderConfig, training: bool, n_sets: int = 2, n_points: int = 10):
    """Whole-encoder check with the kNN graphs frozen at the base point.

    In training mode the shift of a hidden-layer BN reaches the output only
    through the next training-mode BN, which removes any per-column constant.
    Whenever every neighbourhood maximum of a column falls on the same side
    of the LeakyReLU kink that gradient is exactly zero and an element-wise
    ratio would only compare roundoff, so those shifts are checked in the
    eval-mode variant (and by the batch_norm op check) instead.
    """
    def build(rng):
        store = ParameterStore()
        enc = Encoder(config, store, "enc", rng)
        _randomize(store, rng)
        segments = [rng.normal(size=(n_points, 3)) for _ in range(n_sets)]
        graphs = encoder_graphs(segments, enc)
        params = [p for name, p in store.params.items()
                  if not (training and ".layer" in name and name.endswith(".bn.beta"))]
        proj = _project(encode(segments, enc, training, graphs), rng)
        return lambda: proj(encode(segments, enc, training, graphs)), params
    return build


TINY_E1 = EncoderConfig(2, (8, 8), 4, True, 4, False)
TINY_E2 = EncoderConfig(4, (8, 8, 8, 8), 4, True, 8, True)


def _edgeconv(rng):
    x = _leaf(rng.normal(size=(8, 3)))
    theta, phi = _leaf(rng.normal(size=(3, 5))), _leaf(rng.normal(size=(3, 5)))
    nbr = np.stack([rng.choice([j for j in range(8) if j != i], 3, replace=False) for i in range(8)])
    proj = _project(edgeconv(x, nbr, theta, phi, None, False), rng)
    return lambda: proj(edgeconv(x, nbr, theta, phi, None, False)), [x, theta, phi]


def _gcn(rng):
    coords = rng.normal(size=(6, 3))
    adj = normalized_adjacency(coords)
    rows, w = _leaf(rng.normal(size=(6, 4))), _leaf(rng.normal(size=(4, 4)))
    proj = _project(aggregate(rows, w, adj), rng)
    return lambda: proj(aggregate(rows, w, adj)), [rows, w]


def _gcn_batched(rng):
    feats = _leaf(rng.normal(size=(10, 4)))
    w = _leaf(rng.normal(size=(4, 4)))
    members = np.array([[0, 2, 4, 6], [1, 3, 5, 7], [9, 8, 2, 0]])
    adj = np.stack([normalized_adjacency(rng.normal(size=(4, 3))) for _ in members])
    proj = _project(aggregate_patches(feats, members, adj, w), rng)
    return lambda: proj(aggregate_patches(feats, members, adj, w)), [feats, w]


def _discriminator(rng):
    left, right = _leaf(rng.normal(size=(5, 3))), _leaf(rng.normal(size=(5, 3)))
    w, b = _leaf(rng.normal(size=(6, 1))), _leaf(rng.normal(size=1))
    proj = _project(discriminate(left, right, w, b), rng)
    return lambda: proj(discriminate(left, right, w, b)), [left, right, w, b]


def _similarity_loss(rng):
    s = _leaf(rng.uniform(0.05, 0.95, 6))
    d = _leaf(rng.uniform(0.05, 0.95, 6))
    return lambda: similarity_loss(s, d), [s, d]


def _info_nce(rng):
    z, zp, zn = _leaf(rng.normal(size=(1, 4))), _leaf(rng.normal(size=(1, 4))), _leaf(rng.normal(size=(3, 4)))
    return lambda: info_nce_loss(z, zp, zn, 0.5), [z, zp, zn]


def _batch_info_nce(normalize):
    def build(rng):
        z, zp = _leaf(rng.normal(0.0, 0.5, (5, 4))), _leaf(rng.normal(0.0, 0.5, (5, 4)))
        mask = rng.random((5, 5)) < 0.5
        np.fill_diagonal(mask, False)
        mask[0] = False
        active = mask.any(axis=1)
        return lambda: batch_info_nce(z, zp, mask, 0.7, active, normalize), [z, zp]
    return build


CHECKS = {"edgeconv", "gcn_aggregate", "gcn_patches", "discriminator", "similarity_loss",
               "info_nce", "info_nce_batch", "info_nce_unit", "e1_tiny_train", "e1_tiny_eval",
               "e2_tiny_train", "e2_tiny_eval"}

CHECKS = {
    # elementwise and structural ops; names match the op labels used for fault injection
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "scale": _unary(lambda x: ad.scale(x, -1.7)),
    "add_scalar": _unary(lambda x: ad.add_scalar(x, 0.3)),
    "add_bias": _binary(ad.add_bias, (4, 3), (3,)),
    "leaky_relu": _with_input(lambda r: _away_from(r, (4, 3), [0.0]), ad.leaky_relu),
    "sigmoid": _unary(ad.sigmoid),
    "exp": _unary(ad.exp),
    "log": _with_input(lambda r: r.uniform(0.3, 2.0, (4, 3)), lambda x: ad.log(x, 1e-12)),
    "clip": _with_input(lambda r: _away_from(r, (4, 3), [-1.0, 1.0]), lambda x: ad.clip(x, -1.0, 1.0)),
    "matmul": _binary(ad.matmul, (3, 4), (4, 2)),
    "block_matmul": _block_matmul,
    "transpose": _unary(ad.transpose),
    "concat": _concat(1),
    "concat_rows": _concat(0),
    "reshape": _unary(lambda x: ad.reshape(x, (2, 6))),
    "gather_rows": _gather,
    "row_dot": _binary(ad.row_dot),
    "sum": _unary(ad.total),
    "mean": _unary(ad.mean),
    "max_pool_rows": _unary(lambda x: ad.group_max(x, 2)),
    "avg_pool_rows": _unary(lambda x: ad.group_mean(x, 2)),
    "logsumexp": _logsumexp,
    "l2_norm": _unary(ad.l2_normalize_rows),
    "batch_norm": _batch_norm(True),
    "batch_norm_eval": _batch_norm(False),
    # composed blocks and losses
    "edgeconv": _edgeconv,
    "gcn_aggregate": _gcn,
    "gcn_patches": _gcn_batched,
    "discriminator": _discriminator,
    "similarity_loss": _similarity_loss,
    "info_nce": _info_nce,
    "info_nce_batch": _batch_info_nce(False),
    "info_nce_unit": _batch_info_nce(True),
    "e1_tiny_train": _encoder_check(TINY_E1, True),
    "e1_tiny_eval": _encoder_check(TINY_E1, False),
    "e2_tiny_train": _encoder_check(TINY_E2, True),
    "e2_tiny_eval": _encoder_check(TINY_E2, False),
}


def run_check(name: str, points: int = POINTS, seed: int = 0, h: float = 1e-5,
              tolerance: float = TOLERANCE) -> CheckResult:
    build = CHECKS[name]
    result = CheckResult(name, tolerance=tolerance)
    for p in range(points):
        rng = np.random.default_rng([seed, list(CHECKS).index(name), p])
        loss_fn, tensors = build(rng)
        err = gradient_check(loss_fn, tensors, h)
        result.errors.append(err if np.isfinite(err) else float("inf"))
    return result


def run_suite(names: list[str] | None = None, points: int = POINTS, seed: int = 0,
              tolerance: float = TOLERANCE) -> list[CheckResult]:
    return [run_check(n, points, seed, tolerance=tolerance) for n in (names or list(CHECKS))]


def report(results: list[CheckResult], elapsed: float | None = None) -> list[str]:
    lines = [r.line() for r in results]
    failed = [r.name for r in results if not r.passed]
    summary = f"{len(results) - len(failed)}/{len(results)} checks passed"
    if elapsed is not None:
        summary += f" in {elapsed:.1f}s"
    if failed:
        summary += "; failing: " + ", ".join(failed)
    return lines + [summary]


def main_report(points: int = POINTS, seed: int = 0) -> tuple[bool, list[str]]:
    t0 = time.perf_counter()
    results = run_suite(points=points, seed=seed)
    return all(r.passed for r in results), report(results, time.perf_counter() - t0)
