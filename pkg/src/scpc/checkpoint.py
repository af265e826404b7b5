"""Text checkpoints.

Layout::

    SCPC-CKPT v1
    # key=value            (zero or more metadata lines)
    name ndim d1 d2 ...
    v v v ...              (row-major, 17 significant digits)

Re-saving a loaded checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .geometry import atomic_write_text, format_float

HEADER = "SCPC-CKPT v1"


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> str:
    lines = [HEADER]
    for key, value in (meta or {}).items():
        if "\n" in f"{key}{value}" or "=" in key:
            raise CheckpointError(f"bad metadata entry {key!r}")
        lines.append(f"# {key}={value}")
    for name, arr in tensors.items():
        if not name or any(c.isspace() for c in name):
            raise CheckpointError(f"bad tensor name {name!r}")
        arr = np.asarray(arr, dtype=np.float64)
        lines.append(" ".join([name, str(arr.ndim), *map(str, arr.shape)]))
        lines.append(" ".join(format_float(v) for v in arr.reshape(-1)))
    return "\n".join(lines) + "\n"


def loads(text: str) -> tuple["OrderedDict[str, np.ndarray]", dict[str, str]]:
    lines = text.split("\n")
    if not lines or lines[0] != HEADER:
        raise CheckpointError(f"missing {HEADER!r} header")
    meta: dict[str, str] = {}
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    i = 1
    while i < len(lines) and lines[i].startswith("#"):
        key, _, value = lines[i][1:].strip().partition("=")
        meta[key] = value
        i += 1
    while i < len(lines) and lines[i]:
        parts = lines[i].split()
        try:
            name, ndim = parts[0], int(parts[1])
            shape = tuple(int(d) for d in parts[2:2 + ndim])
        except (IndexError, ValueError):
            raise CheckpointError(f"line {i + 1}: bad tensor header {lines[i]!r}") from None
        if len(parts) != 2 + ndim:
            raise CheckpointError(f"line {i + 1}: expected {ndim} dimensions")
        if i + 1 >= len(lines):
            raise CheckpointError(f"line {i + 2}: missing values for {name}")
        vals = np.array([float(v) for v in lines[i + 1].split()], dtype=np.float64)
        if vals.size != int(np.prod(shape)):
            raise CheckpointError(f"line {i + 2}: {name} has {vals.size} values, shape {shape}")
        tensors[name] = vals.reshape(shape)
        i += 2
    return tensors, meta


def save(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    atomic_write_text(path, dumps(tensors, meta))


def load(path) -> tuple["OrderedDict[str, np.ndarray]", dict[str, str]]:
    with open(path) as fh:
        return loads(fh.read())


# ---------------------------------------------------------------- training state

_INT_COLUMNS = ("epoch", "skipped_anchors")


def state_tensors(store, state=None) -> "OrderedDict[str, np.ndarray]":
    """Model parameters and buffers, plus optimizer moments and history if ``state`` is given."""
    out = OrderedDict(store.state())
    if state is not None:
        out.update(state.optimizer.state())
        keys = list(state.history[0]) if state.history else []
        for key in keys:
            out[f"history.{key}"] = np.array([float(h[key]) for h in state.history])
    return out


def history_keys(state) -> str:
    return ",".join(state.history[0]) if state.history else ""


def save_training(path, store, state, meta: dict[str, str]) -> None:
    meta = dict(meta)
    meta["epoch"] = str(state.epoch)
    meta["history"] = history_keys(state)
    save(path, state_tensors(store, state), meta)


def load_training(path, store, optimizer):
    """Restore parameters and optimizer in place; returns (epoch, history, meta)."""
    tensors, meta = load(path)
    store.load_state(tensors)
    optimizer.load_state(tensors)
    keys = [k for k in meta.get("history", "").split(",") if k]
    epoch = int(meta["epoch"])
    columns = {k: tensors[f"history.{k}"] for k in keys}
    history = []
    for row in range(epoch if keys else 0):
        history.append({k: int(columns[k][row]) if k in _INT_COLUMNS else float(columns[k][row])
                        for k in keys})
    return epoch, history, meta
