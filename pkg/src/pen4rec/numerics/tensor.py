"""Float64 tensors with tape-based reverse-mode differentiation.

Every operation in this module computes its result eagerly with numpy. When a
:class:`Tape` is active on the current thread and at least one input requires a
gradient, the operation appends a record ``(output, inputs, vjp)`` to the tape.
``Tape.backward`` walks the records in reverse order, which is a valid
topological order because records are appended as values are produced.

Gradients live on the tape rather than on the tensors, so several tapes over
shared read-only parameters can run in different threads.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-12

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operands have incompatible shapes."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class Parameter(Tensor):
    """A named trainable tensor with its own gradient buffer."""

    __slots__ = ("grad",)

    def __init__(self, name: str, value):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


class Tape:
    """Records differentiable operations executed inside its ``with`` block."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._grads: dict[int, np.ndarray] = {}
        self._keep: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self.records.append((out, inputs, vjp))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if loss.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar loss")
            seed = np.ones_like(loss.data)
        grads = {id(loss): np.asarray(seed, dtype=np.float64)}
        keep = {id(loss): loss}
        for out, inputs, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            keep.pop(id(out), None)
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    keep[key] = inp
        self._grads = grads
        self._keep = keep

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last ``backward`` loss w.r.t. ``t`` (zeros if unreached)."""
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g


def _stack() -> list[Tape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording on the current thread."""

    def __enter__(self):
        self._saved = list(_stack())
        _stack().clear()

    def __exit__(self, *exc):
        _stack().extend(self._saved)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = active_tape()
        if tape is not None:
            tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(a.data * b.data, (a, b), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow either way
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _emit(y, (x,), lambda g: (g * y,))


def log(x, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log with the argument clamped to ``>= floor``."""
    x = as_tensor(x)
    live = x.data >= floor
    safe = np.where(live, x.data, floor)
    return _emit(np.log(safe), (x,), lambda g: (np.where(live, g / safe, 0.0),))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    live = (x.data >= lo) & (x.data <= hi)
    return _emit(np.clip(x.data, lo, hi), (x,), lambda g: (np.where(live, g, 0.0),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(a.data @ b.data, (a, b), vjp)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for weight of shape (out, in); x may have any leading axes."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        inputs = (x, weight, bias)

    def vjp(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        if bias is None:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _emit(out, inputs, vjp)


# ---------------------------------------------------------------------------
# reductions and normalisation
# ---------------------------------------------------------------------------


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(out, (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax. Entries where ``mask == 0`` get probability exactly 0."""
    x = as_tensor(x)
    if x.data.size == 0 or x.shape[axis] == 0:
        raise ValueError("softmax of an empty tensor")
    z = x.data
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask) != 0, z.shape)
        z = np.where(keep, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit(p, (x,), vjp)


# ---------------------------------------------------------------------------
# shape manipulation and indexing
# ---------------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ValueError("concat of nothing")
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(np.concatenate([t.data for t in ts], axis=axis), ts, vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _emit(np.stack([t.data for t in ts], axis=axis), ts, vjp)


def getitem(x, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    x = as_tensor(x)
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)

    def vjp(g):
        out = np.zeros_like(x.data)
        if basic:
            # basic indexing never repeats an element
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _emit(x.data[index], (x,), vjp)


def take_rows(table, idx) -> Tensor:
    """``table[idx]`` for an integer array ``idx`` of any shape."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return _emit(table.data[idx], (table,), vjp)


def gather_batch(x, idx) -> Tensor:
    """Per-batch row gather: ``out[b, t] = x[b, idx[b, t]]`` for x of shape (B, N, d)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])[:, None]

    def vjp(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (np.broadcast_to(rows, idx.shape), idx), g)
        return (out,)

    return _emit(x.data[rows, idx], (x,), vjp)


# ---------------------------------------------------------------------------
# fused recurrence
# ---------------------------------------------------------------------------


def gru_sequence(
    xproj,
    recurrent,
    gate,
    reverse: bool = False,
) -> Tensor:
    """Run a gate-blended GRU over a batch of sequences.

    ``xproj`` is the precomputed input projection ``x @ W.T + b`` with shape
    (B, L, 3d) laid out as [update | reset | candidate]. ``recurrent`` is the
    (3d, d) stacked matrix [U_z; U_r; U_o]. At each step the plain GRU output

        z = sigmoid(xz + U_z h)      r = sigmoid(xr + U_r h)
        c = tanh(xo + U_o (r * h))   g = (1 - z) * h + z * c

    is blended with the previous state as ``h' = gate * g + (1 - gate) * h``,
    where ``gate`` has shape (B, L). A 0/1 gate acts as a padding mask; a soft
    gate gives the attention-updated recurrence. The initial state is zero.
    Returns all states, shape (B, L, d), indexed by input position.
    """
    xproj, recurrent, gate = as_tensor(xproj), as_tensor(recurrent), as_tensor(gate)
    B, L, d3 = xproj.shape
    d = d3 // 3
    if recurrent.shape != (d3, d) or gate.shape != (B, L):
        raise ShapeError(
            f"gru_sequence: xproj {xproj.shape}, recurrent {recurrent.shape}, gate {gate.shape}"
        )
    U = recurrent.data
    Uzr, Uo = U[: 2 * d], U[2 * d :]
    X = xproj.data
    G = gate.data
    order = range(L - 1, -1, -1) if reverse else range(L)

    H = np.zeros((B, L, d))
    saved = []
    h = np.zeros((B, d))
    for t in order:
        zr = _sigmoid(X[:, t, : 2 * d] + h @ Uzr.T)
        z, r = zr[:, :d], zr[:, d:]
        rh = r * h
        c = np.tanh(X[:, t, 2 * d :] + rh @ Uo.T)
        g_out = (1.0 - z) * h + z * c
        gt = G[:, t : t + 1]
        h_new = gt * g_out + (1.0 - gt) * h
        saved.append((t, h, z, r, rh, c, g_out))
        H[:, t] = h_new
        h = h_new

    def vjp(gH):
        dX = np.zeros_like(X)
        dU = np.zeros_like(U)
        dG = np.zeros_like(G)
        dh = np.zeros((B, d))
        for t, h_prev, z, r, rh, c, g_out in reversed(saved):
            dh = dh + gH[:, t]
            gt = G[:, t : t + 1]
            dG[:, t] = (dh * (g_out - h_prev)).sum(axis=1)
            dg = dh * gt
            dh_prev = dh * (1.0 - gt)
            dz = dg * (c - h_prev)
            dc = dg * z
            dh_prev = dh_prev + dg * (1.0 - z)
            dpre_c = dc * (1.0 - c * c)
            drh = dpre_c @ Uo
            dU[2 * d :] += dpre_c.T @ rh
            dr = drh * h_prev
            dh_prev = dh_prev + drh * r
            dpre_zr = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)], axis=1)
            dU[: 2 * d] += dpre_zr.T @ h_prev
            dh_prev = dh_prev + dpre_zr @ Uzr
            dX[:, t, : 2 * d] = dpre_zr
            dX[:, t, 2 * d :] = dpre_c
            dh = dh_prev
        return dX, dU, dG

    return _emit(H, (xproj, recurrent, gate), vjp)


def gru_cell_reference(x: np.ndarray, h: np.ndarray, W: np.ndarray, U: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Single plain GRU step on raw arrays, without the tape."""
    d = h.shape[-1]
    xp = x @ W.T + b
    z = _sigmoid(xp[..., :d] + h @ U[:d].T)
    r = _sigmoid(xp[..., d : 2 * d] + h @ U[d : 2 * d].T)
    c = np.tanh(xp[..., 2 * d :] + (r * h) @ U[2 * d :].T)
    return (1.0 - z) * h + z * c


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or rate is 0."""
    x = as_tensor(x)
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


def parameters_finite(params: Iterable[Parameter]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
