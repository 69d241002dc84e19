"""Dense float64 tensors with reverse-mode automatic differentiation.

Values live in numpy arrays; gradients are computed by replaying a tape of
recorded primitive operations in reverse. Only the primitives needed by the
encoder, its two heads, and the training losses are provided. Broadcasting is
deliberately restricted to adding a row vector to a matrix; every other shape
mismatch is an error.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

# Finite stand-in for -inf in attention masks: exp(x - rowmax) underflows to
# exactly 0.0, and no NaN/Inf ever enters a tensor.
MASK_FILL = -1e30


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class ContractError(ValueError):
    """An operation precondition was violated."""


class Tensor:
    """A dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def assert_finite(self, where: str = "tensor") -> None:
        if not self.is_finite():
            raise ContractError(f"non-finite values in {where}")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar used throughout the model code.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class _Record:
    """One recorded primitive: inputs, output, and its local backward rule."""

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitives, replayed once in reverse by backward()."""

    __slots__ = ("records",)

    def __init__(self):
        self.records: list[_Record] = []

    def __len__(self) -> int:
        return len(self.records)


_active_tape: Tape | None = Tape()


def active_tape() -> Tape | None:
    return _active_tape


@contextmanager
def fresh_tape() -> Iterator[Tape]:
    """Run a block against its own tape (one training step, typically)."""
    global _active_tape
    saved = _active_tape
    _active_tape = Tape()
    try:
        yield _active_tape
    finally:
        _active_tape = saved


@contextmanager
def no_tape() -> Iterator[None]:
    """Disable recording entirely; used for frozen-model inference."""
    global _active_tape
    saved = _active_tape
    _active_tape = None
    try:
        yield
    finally:
        _active_tape = saved


def _emit(inputs: tuple[Tensor, ...], out_data: np.ndarray,
          backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap an op result; record it when a tape is active and grads are needed."""
    tape = _active_tape
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.records.append(_Record(inputs, out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    Replays the tape in reverse order of recording; records whose output
    received no adjoint are skipped. Adjoints for the replay live in per-call
    scratch space, so repeated calls accumulate cleanly into .grad.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else _active_tape
    if tape is None:
        raise ContractError("backward() called with no active tape")
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        out_grad = adjoint.get(id(rec.output))
        if out_grad is None:
            continue
        grads = rec.backward_fn(out_grad)
        for tensor, g in zip(rec.inputs, grads):
            if g is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in adjoint:
                adjoint[key] = adjoint[key] + g
            else:
                adjoint[key] = g
                touched[key] = tensor
    for key, tensor in touched.items():
        if tensor.grad is None:
            tensor.grad = adjoint[key].copy()
        else:
            tensor.grad = tensor.grad + adjoint[key]


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return _emit((a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    return _emit((a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit((a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit((a,), a.data * c, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit((a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: needs a matrix, got {a.shape}")
    return _emit((a,), a.data.T.copy(), lambda g: (g.T,))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate matrices along the last (feature) axis."""
    if not parts:
        raise ShapeError("concat_cols: empty input")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise ShapeError(f"concat_cols: row counts differ ({[p.shape for p in parts]})")
    widths = [p.shape[1] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def bwd(g):
        return tuple(np.hsplit(g, splits))

    return _emit(tuple(parts), np.concatenate([p.data for p in parts], axis=1), bwd)


def row_slice(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"row_slice: needs a matrix, got {a.shape}")
    if not (0 <= start < stop <= a.shape[0]):
        raise ShapeError(f"row_slice: [{start}:{stop}] out of range for {a.shape}")
    ad = a.data

    def bwd(g):
        full = np.zeros_like(ad)
        full[start:stop] = g
        return (full,)

    return _emit((a,), ad[start:stop].copy(), bwd)


def add_row(a: Tensor, v: Tensor) -> Tensor:
    """Broadcast-add a row vector to every row of a matrix."""
    if a.data.ndim != 2 or v.data.ndim != 1:
        raise ShapeError(f"add_row: needs matrix + vector, got {a.shape} and {v.shape}")
    if a.shape[1] != v.shape[0]:
        raise ShapeError(f"add_row: widths differ, {a.shape} vs {v.shape}")
    return _emit((a, v), a.data + v.data[None, :], lambda g: (g, g.sum(axis=0)))


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ex = np.exp(ad[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit((a,), out, lambda g: (g * out * (1.0 - out),))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit((a,), np.log(ad), lambda g: (g / ad,))


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return _emit((a,), np.abs(ad), lambda g: (g * np.sign(ad),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return _emit((a,), np.maximum(ad, 0.0), lambda g: (g * (ad > 0),))


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape = a.data.shape
    return _emit((a,), np.asarray(a.data.sum()), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    """Mean of all elements, as a scalar tensor."""
    shape = a.data.shape
    n = a.data.size
    return _emit((a,), np.asarray(a.data.mean()), lambda g: (np.full(shape, float(g) / n),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: {old} -> {shape} changes element count")
    return _emit((a,), a.data.reshape(shape).copy(), lambda g: (g.reshape(old),))


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction for stability."""
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows: needs a matrix, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((g - dot) * out,)

    return _emit((a,), out, bwd)


def log_softmax_rows(a: Tensor) -> Tensor:
    """Row-wise log-softmax; stable even when plain softmax would underflow."""
    if a.data.ndim != 2:
        raise ShapeError(f"log_softmax_rows: needs a matrix, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bwd(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _emit((a,), out, bwd)


def layer_norm_rows(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    if x.data.ndim != 2 or gain.data.ndim != 1 or shift.data.ndim != 1:
        raise ShapeError(
            f"layer_norm_rows: needs matrix + two vectors, got "
            f"{x.shape}, {gain.shape}, {shift.shape}")
    if x.shape[1] != gain.shape[0] or x.shape[1] != shift.shape[0]:
        raise ShapeError(f"layer_norm_rows: widths differ, {x.shape} vs {gain.shape}")
    xd = x.data
    n = xd.shape[1]
    mu = xd.mean(axis=1, keepdims=True)
    var = xd.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gain.data[None, :] + shift.data[None, :]

    def bwd(g):
        d_gain = (g * xhat).sum(axis=0)
        d_shift = g.sum(axis=0)
        d_xhat = g * gain.data[None, :]
        row_mean = d_xhat.mean(axis=1, keepdims=True)
        row_proj = (d_xhat * xhat).mean(axis=1, keepdims=True)
        d_x = inv * (d_xhat - row_mean - xhat * row_proj)
        return (d_x, d_gain, d_shift)

    return _emit((x, gain, shift), out, bwd)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of `table` at integer indices; gradient scatter-adds back."""
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be a matrix, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("embedding_lookup: ids must be a flat sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding_lookup: id out of range for table with {table.shape[0]} rows")
    td = table.data

    def bwd(g):
        full = np.zeros_like(td)
        np.add.at(full, idx, g)
        return (full,)

    return _emit((table,), td[idx].copy(), bwd)
