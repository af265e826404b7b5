"""Small reverse-mode autodiff over float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the upstream gradient back into them.  Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order.  Only 2-D row-major tensors are used by the networks in
this package, but elementwise ops work for any shape.
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix

# Names of ops whose backward pass is deliberately corrupted (sign flip).
# Only touched through ``inject_fault``; used to prove the gradient checker
# actually catches broken ops.
_FAULTS: set[str] = set()


@contextlib.contextmanager
def inject_fault(op_name: str):
    _FAULTS.add(op_name)
    try:
        yield
    finally:
        _FAULTS.discard(op_name)


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            parent_grads = node._backward(g)
            if node.op in _FAULTS:
                parent_grads = tuple(None if pg is None else -pg for pg in parent_grads)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def _topo_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; parents always precede children in the result
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data, op, parents, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")


# ---------------------------------------------------------------- elementwise

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + c, "add_scalar", (a,), lambda g: (g,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-C vector to every row of an R x C matrix."""
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    return _make(x.data + b.data, "add_bias", (x, b), lambda g: (g, g.sum(axis=0)))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    return _make(out, "leaky_relu", (x,), lambda g: (np.where(pos, g, slope * g),))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    _check_finite(out, "exp")
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; inputs below ``floor`` are clamped and pass no gradient."""
    clipped = x.data < floor
    safe = np.where(clipped, floor, x.data)
    if np.any(safe <= 0):
        raise FloatingPointError("log of a non-positive value")
    out = np.log(safe)
    return _make(out, "log", (x,), lambda g: (np.where(clipped, 0.0, g / safe),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi)
    return _make(out, "clip", (x,), lambda g: (np.where(inside, g, 0.0),))


# ------------------------------------------------------------------ linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(out, "matmul", (a, b), backward)


def block_matmul(blocks: np.ndarray, x: Tensor) -> Tensor:
    """Left-multiply consecutive row blocks of ``x`` by constant matrices.

    ``blocks`` has shape (S, m, m) and ``x`` has S*m rows; block s of the
    output is ``blocks[s] @ x[s*m:(s+1)*m]``.
    """
    s, m, m2 = blocks.shape
    if m != m2 or x.data.ndim != 2 or x.shape[0] != s * m:
        raise ShapeError(f"block_matmul: blocks {blocks.shape} vs input {x.shape}")
    cols = x.shape[1]
    out = np.einsum("sij,sjc->sic", blocks, x.data.reshape(s, m, cols)).reshape(s * m, cols)

    def backward(g):
        return (np.einsum("sji,sjc->sic", blocks, g.reshape(s, m, cols)).reshape(s * m, cols),)

    return _make(out, "block_matmul", (x,), backward)


def transpose(x: Tensor) -> Tensor:
    return _make(x.data.T.copy(), "transpose", (x,), lambda g: (g.T,))


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from exc
    bounds = np.cumsum([0] + [d.shape[axis] for d in datas])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _make(out, "concat", tuple(tensors), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def gather_rows(x: Tensor, index) -> Tensor:
    """Rows ``x[index]``; repeated indices accumulate in the backward pass."""
    index = np.asarray(index, dtype=np.intp)
    out = x.data[index]

    def backward(g):
        n = len(index)
        scatter = csr_matrix((np.ones(n), (index, np.arange(n))), shape=(x.shape[0], n))
        return (np.asarray(scatter @ g.reshape(n, -1)).reshape(x.shape),)

    return _make(out, "gather_rows", (x,), backward)


def row_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner products of two R x C matrices, shape (R,)."""
    _same_shape(a, b, "row_dot")
    out = np.einsum("ij,ij->i", a.data, b.data)
    return _make(out, "row_dot", (a, b),
                 lambda g: (g[:, None] * b.data, g[:, None] * a.data))


# ------------------------------------------------------------------ reductions

def total(x: Tensor) -> Tensor:
    return _make(np.array(x.data.sum()), "sum", (x,),
                 lambda g: (np.full_like(x.data, float(g)),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(np.array(x.data.sum() / n), "mean", (x,),
                 lambda g: (np.full_like(x.data, float(g) / n),))


def group_max(x: Tensor, group: int) -> Tensor:
    """Column-wise max over consecutive blocks of ``group`` rows.

    Gradient goes to the first maximal row of each block.
    """
    rows, cols = x.shape
    if group < 1 or rows % group:
        raise ShapeError(f"group_max: {rows} rows not divisible into groups of {group}")
    blocks = x.data.reshape(rows // group, group, cols)
    arg = blocks.argmax(axis=1)
    out = np.take_along_axis(blocks, arg[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[:, None, :], g[:, None, :], axis=1)
        return (gb.reshape(rows, cols),)

    return _make(out, "max_pool_rows", (x,), backward)


def group_mean(x: Tensor, group: int) -> Tensor:
    rows, cols = x.shape
    if group < 1 or rows % group:
        raise ShapeError(f"group_mean: {rows} rows not divisible into groups of {group}")
    out = x.data.reshape(rows // group, group, cols).mean(axis=1)

    def backward(g):
        return (np.repeat(g / group, group, axis=0),)

    return _make(out, "avg_pool_rows", (x,), backward)


def max_pool_rows(x: Tensor) -> Tensor:
    """Column-wise max over all rows, shape (1, C)."""
    return group_max(x, x.shape[0])


def avg_pool_rows(x: Tensor) -> Tensor:
    return group_mean(x, x.shape[0])


def logsumexp_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise log-sum-exp restricted to entries where ``mask`` is true.

    Every row must have at least one active entry.
    """
    active = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if active.shape != x.shape:
        raise ShapeError(f"logsumexp_rows: mask {active.shape} vs input {x.shape}")
    if not np.all(active.any(axis=1)):
        raise ValueError("logsumexp_rows: a row has no active entries")
    vals = np.where(active, x.data, -np.inf)
    m = vals.max(axis=1, keepdims=True)
    w = np.where(active, np.exp(vals - m), 0.0)
    s = w.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    soft = w / s
    return _make(out, "logsumexp", (x,), lambda g: (g[:, None] * soft,))


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    norms = np.sqrt(np.einsum("ij,ij->i", x.data, x.data))
    n = np.maximum(norms, eps)[:, None]
    out = x.data / n

    def backward(g):
        proj = np.einsum("ij,ij->i", g, out)[:, None]
        small = (norms < eps)[:, None]
        return (np.where(small, g / n, (g - out * proj) / n),)

    return _make(out, "l2_norm", (x,), backward)


# ------------------------------------------------------------------ batch norm

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Per-column normalization of an R x C matrix.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch`` (unbiased
    variance for the running estimate).
    """
    rows, cols = x.shape
    if gamma.shape != (cols,) or beta.shape != (cols,):
        raise ShapeError(f"batch_norm: params {gamma.shape} vs input {x.shape}")
    if training:
        if rows < 2:
            raise ValueError("batch_norm in training mode needs a batch of at least 2 rows; "
                             "increase the batch size")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * rows / (rows - 1)
    else:
        mu = running_mean.copy()
        var = running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gg = (g * xhat).sum(axis=0)
        gb = g.sum(axis=0)
        gxhat = g * gamma.data
        if training:
            gx = inv / rows * (rows * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
        else:
            gx = gxhat * inv
        return gx, gg, gb

    return _make(out, "batch_norm", (x, gamma, beta), backward)


# ------------------------------------------------------------------ parameters

class ParameterStore:
    """Ordered named parameters plus non-trainable buffers (BN statistics)."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, op=name)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, value) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.buffers[name] = arr
        return arr

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> "OrderedDict[str, np.ndarray]":
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, p in self.params.items():
            out[name] = p.data.copy()
        for name, b in self.buffers.items():
            out[name] = b.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.params) | set(self.buffers)
        missing = expected - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {sorted(missing)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = arr.copy()
        for name, b in self.buffers.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != b.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {b.shape}")
            b[...] = arr

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name, arr in self.state().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


# ------------------------------------------------------------------ optimization

@dataclass
class Adam:
    params: ParameterStore
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> "OrderedDict[str, np.ndarray]":
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name in self.params.params:
            out[f"adam.m.{name}"] = self.m[name].copy()
            out[f"adam.v.{name}"] = self.v[name].copy()
        out["adam.t"] = np.array([float(self.t)])
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name in self.params.params:
            self.m[name] = np.array(state[f"adam.m.{name}"], dtype=np.float64)
            self.v[name] = np.array(state[f"adam.v.{name}"], dtype=np.float64)
        self.t = int(state["adam.t"][0])


def adam_step(params: ParameterStore, state: Adam, lr: float | None = None) -> None:
    """Apply one Adam update using the gradients currently stored on ``params``."""
    if state.params is not params:
        raise ValueError("Adam state belongs to a different parameter store")
    state.step(lr)


@dataclass(frozen=True)
class StepDecay:
    initial_lr: float = 0.002
    decay_factor: float = 0.8
    decay_interval_epochs: int = 20

    def __post_init__(self):
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must be in (0, 1]")
        if self.decay_interval_epochs < 1:
            raise ValueError("decay_interval_epochs must be >= 1")

    def lr_at(self, epoch: int) -> float:
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        return self.initial_lr * self.decay_factor ** (epoch // self.decay_interval_epochs)


def lr_at(schedule: StepDecay, epoch: int) -> float:
    return schedule.lr_at(epoch)


# ------------------------------------------------------------------ finite differences

def numeric_gradient(fn, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to ``arr`` (edited in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradient_check(loss_fn, tensors: list[Tensor], h: float = 1e-5) -> float:
    """Max element-wise relative error between backprop and central differences.

    ``loss_fn`` builds a fresh scalar Tensor from the current values of
    ``tensors`` each time it is called.
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_gradient(lambda: loss_fn().item(), t.data, h)
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst
