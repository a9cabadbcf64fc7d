"""Dense tensors with a define-by-run reverse-mode tape.

Operations are plain functions. When a :class:`Tape` is active and at least
one input requires a gradient, the operation is recorded together with a
closure that maps the output gradient to input gradients. Outside a tape the
same functions simply compute values, which is what evaluation uses.

Only exact-shape and scalar broadcasting are supported. The few places the
model needs a row or slot broadcast get a dedicated op (``add_bias``,
``scale_rows``, ``repeat_axis``) so every backward rule stays short.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

PRECISIONS = {"standard": np.float32, "high": np.float64}

LOG_FLOOR = 1e-12
MASKED = -1


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}")
    return np.dtype(precision)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape_id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.tape_id: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_active: list = []


class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager; ops executed inside it are appended in call
    order, and :meth:`backward` replays them in exact reverse.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs, output, backward) -> None:
        output.tape_id = len(self.records)
        self.records.append(_Record(inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=inp.data.dtype, copy=True)
                else:
                    inp.grad += gi


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def current_tape() -> Optional[Tape]:
    return _active[-1] if _active else None


def _result(data, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        tape.record(tuple(inputs), out, backward)
    return out


def const(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _lift(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_elementwise(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_elementwise(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_elementwise(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(d: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    return np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def pointwise(op: str, *args) -> Tensor:
    table = {"tanh": tanh, "sigmoid": sigmoid, "mul": mul, "add": add}
    if op not in table:
        raise ValueError(f"unknown pointwise op {op!r}")
    return table[op](*args)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, n]``; leading axes of ``a`` are treated as rows."""
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _result(out, (a, b), back)


def matvec(x: Tensor, v: Tensor) -> Tensor:
    """Contract the last axis of ``x`` with vector ``v``."""
    if v.data.ndim != 1 or x.shape[-1] != v.shape[0]:
        raise ShapeError(f"matvec: cannot contract {x.shape} with {v.shape}")
    out = x.data @ v.data

    def back(g):
        gx = g[..., None] * v.data
        gv = np.tensordot(g, x.data, axes=(tuple(range(g.ndim)), tuple(range(g.ndim))))
        return gx, gv

    return _result(out, (x, v), back)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match {x.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply ``x[..., n]`` row-wise by ``s[..., 1]``."""
    if x.data.ndim < 1 or s.shape != x.shape[:-1] + (1,):
        raise ShapeError(f"scale_rows: scale {s.shape} does not match {x.shape}")
    return _result(x.data * s.data, (x, s),
                   lambda g: (g * s.data, (g * x.data).sum(axis=-1, keepdims=True)))


def repeat_axis(x: Tensor, n: int, axis: int) -> Tensor:
    """Insert a new axis of length ``n`` by copying ``x``."""
    out = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _result(out, (x,), lambda g: (g.sum(axis=axis),))


def tile_rows(v: Tensor, n: int) -> Tensor:
    return repeat_axis(v, n, 0)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, x.shape),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: no parts")
    nd = parts[0].data.ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.data.ndim != nd or any(p.shape[i] != parts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: extents {[q.shape for q in parts]} disagree off axis {axis}")
    if len(parts) == 1:
        return parts[0]
    out = np.concatenate([p.data for p in parts], axis=ax)
    cuts = np.cumsum([p.shape[ax] for p in parts])[:-1]
    return _result(out, tuple(parts), lambda g: tuple(np.split(g, cuts, axis=ax)))


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    shape = parts[0].shape
    for p in parts:
        if p.shape != shape:
            raise ShapeError(f"stack: shapes {[q.shape for q in parts]} differ")
    out = np.stack([p.data for p in parts], axis=axis)
    n = len(parts)
    return _result(out, tuple(parts),
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    def back(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return _result(x.data[..., start:stop], (x,), back)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[start:stop]`` along axis 0."""
    def back(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _result(x.data[start:stop], (x,), back)


def take_slot(x: Tensor, idx) -> Tensor:
    """Row ``b`` of the result is ``x[b, idx[b]]`` for ``x[B, S, k]``."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])
    if idx.shape != (x.shape[0],) or np.any(idx < 0) or np.any(idx >= x.shape[1]):
        raise IndexError(f"take_slot: indices {idx.tolist()} invalid for {x.shape}")

    def back(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return _result(x.data[rows, idx], (x,), back)


def weighted_sum(alpha: Tensor, mem: Tensor) -> Tensor:
    """``out[..., :] = sum_j alpha[..., j] * mem[..., j, :]``."""
    if mem.data.ndim < 2 or alpha.shape != mem.shape[:-1]:
        raise ShapeError(f"weighted_sum: weights {alpha.shape} do not match memory {mem.shape}")
    out = np.einsum("...s,...sk->...k", alpha.data, mem.data)

    def back(g):
        ga = np.einsum("...k,...sk->...s", g, mem.data)
        gm = alpha.data[..., :, None] * g[..., None, :]
        return ga, gm

    return _result(out, (alpha, mem), back)


def windows(x: Tensor, width: int, count: int) -> Tensor:
    """Sliding windows along axis 0: ``out[t, b, j] = x[t + j, b]`` for ``x[N, B, ...]``.

    Result shape is ``[count, B, width, ...]``; needs ``N >= count + width - 1``.
    """
    n = x.shape[0]
    if x.data.ndim < 2 or width < 1 or count < 1 or n < count + width - 1:
        raise ShapeError(f"windows: {count} windows of width {width} do not fit {x.shape}")
    idx = np.arange(count)[:, None] + np.arange(width)[None, :]
    out = np.swapaxes(x.data[idx], 1, 2)

    def back(g):
        gx = np.zeros_like(x.data)
        for j in range(width):
            gx[j:j + count] += g[:, :, j]
        return (gx,)

    return _result(np.ascontiguousarray(out), (x,), back)


def gather_rows(x: Tensor, idx) -> Tensor:
    """``out[t, b] = x[idx[t, b], b]`` for ``x[N, B, ...]`` and integer ``idx[T, B]``."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 2 or idx.shape[1] != x.shape[1] or np.any(idx < 0) or np.any(idx >= x.shape[0]):
        raise IndexError(f"gather_rows: indices of shape {idx.shape} invalid for {x.shape}")
    cols = np.broadcast_to(np.arange(x.shape[1]), idx.shape)

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (idx, cols), g)
        return (gx,)

    return _result(x.data[idx, cols], (x,), back)


def lstm_sequence(x: Tensor, h0: Tensor, c0: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    """Unrolled LSTM over ``x[T, B, d]`` as a single tape record.

    Gates are packed ``[i, f, o, g]`` along the ``4k`` axis, exactly as a chain
    of per-step cells would compute them. Returns ``[T, B, 2k]`` holding
    ``[h_t; c_t]`` for every step; the backward pass is ordinary BPTT.
    """
    if x.data.ndim != 3 or wh.data.ndim != 2 or wh.shape[1] != 4 * wh.shape[0]:
        raise ShapeError(f"lstm_sequence: bad shapes x {x.shape}, wh {wh.shape}")
    n, B, d = x.shape
    k = wh.shape[0]
    if wx.shape != (d, 4 * k) or b.shape != (4 * k,) or h0.shape != (B, k) or c0.shape != (B, k):
        raise ShapeError(f"lstm_sequence: x {x.shape}, h0 {h0.shape}, c0 {c0.shape}, wx {wx.shape}, "
                         f"b {b.shape} disagree with k={k}")
    dt = x.data.dtype
    xz = x.data @ wx.data + b.data
    acts = np.empty((n, B, 4 * k), dtype=dt)
    out = np.empty((n, B, 2 * k), dtype=dt)
    h, c = h0.data, c0.data
    for t in range(n):
        z = xz[t] + h @ wh.data
        a = acts[t]
        a[:, :3 * k] = _sigmoid(z[:, :3 * k])
        a[:, 3 * k:] = np.tanh(z[:, 3 * k:])
        c = a[:, k:2 * k] * c + a[:, :k] * a[:, 3 * k:]
        h = a[:, 2 * k:3 * k] * np.tanh(c)
        out[t, :, :k] = h
        out[t, :, k:] = c

    def back(g):
        dz = np.empty_like(acts)
        dh_next = np.zeros((B, k), dtype=dt)
        dc_next = np.zeros((B, k), dtype=dt)
        for t in range(n - 1, -1, -1):
            i, f, o, gg = (acts[t, :, j * k:(j + 1) * k] for j in range(4))
            tc = np.tanh(out[t, :, k:])
            c_prev = out[t - 1, :, k:] if t else c0.data
            dh = g[t, :, :k] + dh_next
            dc = g[t, :, k:] + dc_next + dh * o * (1.0 - tc * tc)
            dz[t, :, :k] = dc * gg * i * (1.0 - i)
            dz[t, :, k:2 * k] = dc * c_prev * f * (1.0 - f)
            dz[t, :, 2 * k:3 * k] = dh * tc * o * (1.0 - o)
            dz[t, :, 3 * k:] = dc * i * (1.0 - gg * gg)
            dc_next = dc * f
            dh_next = dz[t] @ wh.data.T
        h_prev = np.concatenate([h0.data[None], out[:-1, :, :k]], axis=0)
        flat = dz.reshape(-1, 4 * k)
        return (dz @ wx.data.T, dh_next, dc_next, x.data.reshape(-1, d).T @ flat,
                h_prev.reshape(-1, k).T @ flat, flat.sum(axis=0))

    return _result(out, (x, h0, c0, wx, wh, b), back)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    bad = ids[(ids < 0) | (ids >= n)]
    if bad.size:
        raise IndexError(f"embedding id {int(bad[0])} out of range [0, {n})")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _result(table.data[ids], (table,), back)


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis with row-max subtraction.

    ``mask`` (bool, same shape) marks admissible entries; the rest get exactly
    zero probability. A row with no admissible entry comes out all zero.
    """
    if x.data.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_rows: empty last axis in {x.shape}")
    d = x.data
    if mask is None:
        z = d - d.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != d.shape:
            raise ShapeError(f"softmax_rows: mask {mask.shape} does not match {d.shape}")
        filled = np.where(mask, d, -np.inf)
        m = filled.max(axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(mask, np.exp(np.where(mask, d - m, 0.0)), 0.0)
        tot = e.sum(axis=-1, keepdims=True)
        y = e / np.where(tot > 0, tot, 1.0)
    y = y.astype(d.dtype, copy=False)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), back)


def cross_entropy_masked(dist: Tensor, targets) -> tuple[Tensor, int]:
    """Mean of ``-log dist[i, targets[i]]`` over rows whose target is not ``MASKED``.

    Returns the loss and the number of contributing rows. Probabilities are
    clamped at ``LOG_FLOOR`` before the log; clamped rows pass no gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if dist.data.ndim != 2 or targets.shape != (dist.shape[0],):
        raise ShapeError(f"cross_entropy_masked: targets {targets.shape} do not match {dist.shape}")
    live = targets != MASKED
    rows = np.nonzero(live)[0]
    cols = targets[live]
    if np.any(cols < 0) or np.any(cols >= dist.shape[1]):
        raise IndexError(f"cross_entropy_masked: target out of range for width {dist.shape[1]}")
    n = int(rows.size)
    p = dist.data[rows, cols]
    clamped = np.maximum(p, LOG_FLOOR)
    loss = -np.log(clamped).sum() / n if n else 0.0
    out_data = np.asarray(loss, dtype=dist.dtype)

    def back(g):
        gd = np.zeros_like(dist.data)
        if n:
            gd[rows, cols] = np.where(p > LOG_FLOOR, -g / (n * clamped), 0.0)
        return (gd,)

    return _result(out_data, (dist,), back), n
