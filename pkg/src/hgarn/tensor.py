"""Dense fp64 matrices with a reverse-mode tape.

Every value is a 2-D ``float64`` array. Operations executed while a
:class:`Tape` is active, and that touch at least one tensor with
``requires_grad``, are recorded in order; :func:`backward` replays the
recording in reverse. Outside a tape nothing is recorded, which is how
evaluation runs.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> backward(tape, loss)
    >>> w.grad
    array([[2., 2.],
           [2., 2.]])
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

LEAKY_SLOPE = 0.2
ELU_ALPHA = 1.0

_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; tapes nest, the innermost one records.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def _as_matrix(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"tensors are 2-D, got shape {arr.shape}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_matrix(data)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return reduce(self, "sum")

    def mean(self) -> "Tensor":
        return reduce(self, "mean")


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _result(data: np.ndarray, parents: tuple[Tensor, ...], rule) -> Tensor:
    """Wrap ``data``; record it on the active tape when a parent needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _ACTIVE and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
        _ACTIVE[-1].nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# --------------------------------------------------------------------------
# linear algebra and structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def rule(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a 1-row, 1-column or 1x1 operand is broadcast."""
    _check_broadcast(a, b, "add")

    def rule(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), rule)


broadcast_add = add


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "hadamard")

    def rule(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), rule)


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "hadamard":
        return hadamard(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: _accumulate(a, g * c))


def transpose(a: Tensor) -> Tensor:
    return _result(a.data.T.copy(), (a,), lambda g: _accumulate(a, g.T))


def concat(parts: Sequence[Tensor], axis: str = "cols") -> Tensor:
    """Stack tensors along ``rows`` (axis 0) or ``cols`` (axis 1).

    Zero-size operands are allowed and contribute nothing.
    """
    if axis not in ("rows", "cols"):
        raise ValueError(f"axis must be 'rows' or 'cols', got {axis!r}")
    ax = 0 if axis == "rows" else 1
    parts = [p for p in parts if p.shape[ax] > 0]
    if not parts:
        raise ValueError("concat of nothing")
    off = 1 - ax
    width = parts[0].shape[off]
    for p in parts[1:]:
        if p.shape[off] != width:
            shapes = [q.shape for q in parts]
            raise ValueError(f"concat along {axis}: mismatched shapes {shapes}")
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def rule(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                _accumulate(p, g[lo:hi] if ax == 0 else g[:, lo:hi])

    return _result(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), rule)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= a.shape[0]:
        raise IndexError(f"slice_rows [{start}, {stop}) out of range for {a.shape}")

    def rule(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _accumulate(a, full)

    return _result(a.data[start:stop].copy(), (a,), rule)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= a.shape[1]:
        raise IndexError(f"slice_cols [{start}, {stop}) out of range for {a.shape}")

    def rule(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        _accumulate(a, full)

    return _result(a.data[:, start:stop].copy(), (a,), rule)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup. Backward scatter-adds, so repeated ids accumulate."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: id out of range for table with {table.shape[0]} rows")

    def rule(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accumulate(table, full)

    return _result(table.data[ids], (table,), rule)


def reduce(a: Tensor, kind: str = "sum") -> Tensor:
    if kind == "sum":
        return _result(np.array([[a.data.sum()]]), (a,),
                       lambda g: _accumulate(a, np.full_like(a.data, g[0, 0])))
    if kind == "mean":
        n = a.data.size
        return _result(np.array([[a.data.mean()]]), (a,),
                       lambda g: _accumulate(a, np.full_like(a.data, g[0, 0] / n)))
    raise ValueError(f"unknown reduction {kind!r}")


def sum_rows(a: Tensor) -> Tensor:
    """Per-row sum, m x n -> m x 1."""
    return _result(a.data.sum(axis=1, keepdims=True), (a,),
                   lambda g: _accumulate(a, np.broadcast_to(g, a.shape)))


def take_per_row(a: Tensor, cols) -> Tensor:
    """Entry ``a[i, cols[i]]`` of every row, as an m x 1 column."""
    cols = np.asarray(cols, dtype=np.int64).reshape(-1)
    if cols.shape[0] != a.shape[0]:
        raise ValueError(f"need one column index per row, got {cols.shape[0]} for {a.shape}")
    if cols.size and (cols.min() < 0 or cols.max() >= a.shape[1]):
        raise IndexError("take_per_row: column index out of range")
    rows = np.arange(a.shape[0])

    def rule(g):
        full = np.zeros_like(a.data)
        full[rows, cols] = g[:, 0]
        _accumulate(a, full)

    return _result(a.data[rows, cols].reshape(-1, 1), (a,), rule)


# --------------------------------------------------------------------------
# nonlinearities


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(y, (a,), lambda g: _accumulate(a, g * y * (1.0 - y)))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: _accumulate(a, g * (1.0 - y * y)))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    pos = a.data > 0
    y = np.where(pos, a.data, slope * a.data)
    return _result(y, (a,), lambda g: _accumulate(a, np.where(pos, g, slope * g)))


def elu(a: Tensor, alpha: float = ELU_ALPHA) -> Tensor:
    pos = a.data > 0
    neg_part = alpha * np.expm1(np.minimum(a.data, 0.0))
    y = np.where(pos, a.data, neg_part)
    return _result(y, (a,), lambda g: _accumulate(a, np.where(pos, g, g * (neg_part + alpha))))


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "leaky_relu": leaky_relu, "elu": elu}


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return fn(a)


# --------------------------------------------------------------------------
# normalisations


def masked_softmax_rows(e: Tensor, mask) -> Tensor:
    """Row softmax restricted to ``mask > 0``; masked-out entries are exactly 0."""
    mask = np.asarray(mask) > 0
    if mask.shape != e.shape:
        raise ValueError(f"mask shape {mask.shape} does not match scores {e.shape}")
    if not mask.any(axis=1).all():
        bad = np.flatnonzero(~mask.any(axis=1))[:5].tolist()
        raise ValueError(f"masked_softmax_rows: rows {bad} have no unmasked entry")
    x = np.where(mask, e.data, -np.inf)
    x = x - x.max(axis=1, keepdims=True)
    ex = np.exp(x)  # exp(-inf) == 0 on masked entries
    y = ex / ex.sum(axis=1, keepdims=True)

    def rule(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        _accumulate(e, y * (g - inner))

    return _result(y, (e,), rule)


def log_softmax_rows(a: Tensor) -> Tensor:
    x = a.data - a.data.max(axis=1, keepdims=True)
    y = x - np.log(np.exp(x).sum(axis=1, keepdims=True))

    def rule(g):
        p = np.exp(y)
        _accumulate(a, g - p * g.sum(axis=1, keepdims=True))

    return _result(y, (a,), rule)


# --------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that requires it.

    Gradients accumulate across calls; zero them between steps.
    """
    if loss.shape != (1, 1):
        raise ValueError(f"backward needs a 1x1 loss, got {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones((1, 1))
    for node in reversed(tape.nodes):
        if node.grad is not None:
            node._backward(node.grad)


# --------------------------------------------------------------------------
# checkpoints: JSON manifest + little-endian fp64 blob


def save_tensors(path, tensors: dict[str, Tensor | np.ndarray], meta: dict | None = None) -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (raw fp64 data)."""
    path = Path(path)
    manifest = {"format": "hgarn-tensors", "version": 1, "blob": path.name + ".bin",
                "meta": meta or {}, "tensors": []}
    offset = 0
    with open(path.with_name(path.name + ".bin"), "wb") as blob:
        for name, t in tensors.items():
            arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
            blob.write(arr.tobytes())
            manifest["tensors"].append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    with open(path.with_name(path.name + ".json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest_path = path if path.suffix == ".json" else path.with_name(path.name + ".json")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "hgarn-tensors":
        raise ValueError(f"{manifest_path} is not a tensor archive")
    raw = (manifest_path.parent / manifest["blob"]).read_bytes()
    out = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=entry["offset"])
        out[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return out, manifest["meta"]
