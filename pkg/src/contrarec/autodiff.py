"""Taped reverse-mode autodiff over dense float64 arrays.

Define-by-run: ops execute eagerly with numpy and, while a Tape is
active, append a backward closure to it. ``Tape.backward`` replays the
closures in reverse creation order, accumulating gradients into every
tensor that participated. A tape is a throwaway object, one per
optimization step; eval-mode code simply runs the same ops with no tape
active and pays no recording cost.

All math is float64. Dropout is inverted (scaled at train time), so eval
mode needs no rescaling.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError

NORM_EPS = 1e-12


class Tensor:
    """A dense float64 array plus a gradient slot.

    Tensors are immutable values once created within a tape; parameter
    tensors are mutated in place only between tapes (by the optimizer).
    """

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item(): tensor has shape {self.shape}, not scalar")
        return float(self.data.reshape(()))

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def grad_or_zeros(self):
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={tuple(self.shape)})"


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed ops with their backward closures."""

    def __init__(self):
        self._nodes = []  # (out, inputs, backward_fn) in forward order

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, out, inputs, backward_fn):
        self._nodes.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor, trainables=()):
        """Accumulate d(loss)/d(t) into t.grad for every tensor on the tape.

        Trainables that the loss never touched end up with zero
        gradients, so the optimizer can treat all parameters uniformly.
        """
        if loss.size != 1:
            raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
        seen = set()
        for out, inputs, _ in self._nodes:
            for t in (out, *inputs):
                if id(t) not in seen:
                    seen.add(id(t))
                    t.grad = None
        for t in trainables:
            t.grad = None
        loss.grad = np.ones_like(loss.data)
        for out, inputs, backward_fn in reversed(self._nodes):
            if out.grad is None:
                continue
            backward_fn(out.grad)
        for t in trainables:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


def _tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _record(out, inputs, backward_fn):
    tape = _tape()
    if tape is not None:
        tape.record(out, inputs, backward_fn)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x, name: str | None = None) -> Tensor:
    """Wrap an array as a non-trainable tensor (gradients are discarded)."""
    return Tensor(x, name=name)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = Tensor(a.data + b.data)

    def backward(g):
        a.accumulate_grad(_unbroadcast(g, a.data.shape))
        b.accumulate_grad(_unbroadcast(g, b.data.shape))

    _record(out, (a, b), backward)
    return out


def mul(a, b) -> Tensor:
    """Hadamard product, with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out = Tensor(a.data * b.data)

    def backward(g):
        a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    _record(out, (a, b), backward)
    return out


def neg(a) -> Tensor:
    return scalar_mul(a, -1.0)


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)

    def backward(g):
        a.accumulate_grad(g * c)

    _record(out, (a,), backward)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(-np.abs(a.data))
    y = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Tensor(y)

    def backward(g):
        a.accumulate_grad(g * y * (1.0 - y))

    _record(out, (a,), backward)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)

    def backward(g):
        a.accumulate_grad(g * (1.0 - y * y))

    _record(out, (a,), backward)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))

    def backward(g):
        a.accumulate_grad(g / a.data)

    _record(out, (a,), backward)
    return out


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient passes only where a > floor."""
    a = as_tensor(a)
    keep = a.data > floor
    out = Tensor(np.where(keep, a.data, floor))

    def backward(g):
        a.accumulate_grad(g * keep)

    _record(out, (a,), backward)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} x {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a.accumulate_grad(_unbroadcast(ga, a.data.shape))
        b.accumulate_grad(_unbroadcast(gb, b.data.shape))

    _record(out, (a, b), backward)
    return out


def transpose_last(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim < 2:
        raise ShapeError(f"transpose_last: need at least 2-d, got {a.shape}")
    out = Tensor(np.swapaxes(a.data, -1, -2))

    def backward(g):
        a.accumulate_grad(np.swapaxes(g, -1, -2))

    _record(out, (a,), backward)
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def backward(g):
        a.accumulate_grad(g.reshape(a.data.shape))

    _record(out, (a,), backward)
    return out


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())

    _record(out, (a,), backward)
    return out


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    if n == 0:
        raise ContractError("mean: cannot reduce an empty axis")
    return scalar_mul(tensor_sum(a, axis=axis), 1.0 / n)


# ---------------------------------------------------------------------------
# softmax family


def _masked_rows_ok(x, mask):
    if mask is None:
        return
    if mask.shape != x.shape:
        raise ShapeError(f"softmax mask shape {mask.shape} != input shape {x.shape}")
    if not mask.any(axis=-1).all():
        raise ContractError("softmax: a row has every position masked")


def softmax(a, mask=None) -> Tensor:
    """Softmax along the last axis.

    ``mask`` is a constant boolean array; masked positions get probability
    exactly 0 and contribute no gradient. A fully masked row is a
    contract violation.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
    _masked_rows_ok(x, mask)
    shifted = x if mask is None else np.where(mask, x, -np.inf)
    shift = shifted.max(axis=-1, keepdims=True)
    e = np.exp(x - shift)
    if mask is not None:
        e = e * mask
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        a.accumulate_grad(y * (g - dot))

    _record(out, (a,), backward)
    return out


def logsumexp(a, mask=None) -> Tensor:
    """log(sum(exp(a))) along the last axis, with optional position mask."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
    _masked_rows_ok(x, mask)
    shifted = x if mask is None else np.where(mask, x, -np.inf)
    shift = shifted.max(axis=-1, keepdims=True)
    e = np.exp(x - shift)
    if mask is not None:
        e = e * mask
    total = e.sum(axis=-1, keepdims=True)
    out = Tensor((shift + np.log(total)).squeeze(-1))
    weights = e / total

    def backward(g):
        a.accumulate_grad(np.expand_dims(g, -1) * weights)

    _record(out, (a,), backward)
    return out


# ---------------------------------------------------------------------------
# normalization and dropout


def l2_normalize(a) -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm.

    Rows with norm <= NORM_EPS (the zero vector, padding) map to the zero
    vector and contribute zero gradient, so untrained or padded entries
    never produce NaNs.
    """
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    safe = norm > NORM_EPS
    denom = np.where(safe, norm, 1.0)
    y = np.where(safe, a.data / denom, 0.0)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        a.accumulate_grad(np.where(safe, (g - y * dot) / denom, 0.0))

    _record(out, (a,), backward)
    return out


def dropout(a, p: float, rng=None, training: bool = False) -> Tensor:
    """Inverted dropout: zero each entry with probability p, scale by 1/(1-p).

    Identity in eval mode (and for p == 0), in which case no randomness is
    consumed. In training mode a fresh mask is drawn from ``rng`` on every
    call.
    """
    a = as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ContractError("dropout: training mode requires an rng")
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)
    out = Tensor(a.data * mask)

    def backward(g):
        a.accumulate_grad(g * mask)

    _record(out, (a,), backward)
    return out


# ---------------------------------------------------------------------------
# indexing and assembly


def concat(parts, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat: need at least one tensor")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[p.shape for p in parts]} on axis {axis}"
        ) from None
    out = Tensor(data)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            p.accumulate_grad(g[tuple(idx)])

    _record(out, tuple(parts), backward)
    return out


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(a.data[idx])

    def backward(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[idx] += g

    _record(out, (a,), backward)
    return out


def gather_rows(table, indices) -> Tensor:
    """Select rows of a 2-d table by integer index (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-d, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ContractError(
            f"gather_rows: index out of range [0, {table.data.shape[0]}) "
            f"(min {idx.min()}, max {idx.max()})"
        )
    out = Tensor(table.data[idx])

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx.reshape(-1), g.reshape(-1, table.data.shape[1]))

    _record(out, (table,), backward)
    return out


def gather_nodes(states, indices) -> Tensor:
    """out[b, t] = states[b, indices[b, t]] for states (B, N, d)."""
    states = as_tensor(states)
    idx = np.asarray(indices)
    if states.data.ndim != 3 or idx.ndim != 2 or idx.shape[0] != states.data.shape[0]:
        raise ShapeError(f"gather_nodes: states {states.shape} vs indices {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= states.data.shape[1]):
        raise ContractError("gather_nodes: node index out of range")
    batch_idx = np.broadcast_to(np.arange(idx.shape[0])[:, None], idx.shape)
    out = Tensor(states.data[batch_idx, idx])

    def backward(g):
        if states.grad is None:
            states.grad = np.zeros_like(states.data)
        np.add.at(states.grad, (batch_idx, idx), g)

    _record(out, (states,), backward)
    return out


def gather_cols(a, cols) -> Tensor:
    """out[b] = a[b, cols[b]] for a (B, M)."""
    a = as_tensor(a)
    cols = np.asarray(cols)
    if a.data.ndim != 2 or cols.ndim != 1 or cols.shape[0] != a.data.shape[0]:
        raise ShapeError(f"gather_cols: matrix {a.shape} vs columns {cols.shape}")
    if cols.size and (cols.min() < 0 or cols.max() >= a.data.shape[1]):
        raise ContractError("gather_cols: column index out of range")
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, cols])

    def backward(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, (rows, cols), g)

    _record(out, (a,), backward)
    return out
