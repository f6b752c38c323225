"""Dense tensor engine with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays (float64 by default, float32
selectable). Operations executed while a Tape is active are recorded in
execution order; backward() replays the tape in reverse, which is a valid
topological order because every tensor is produced exactly once. Gradient
accumulation is a fixed-order sequential reduction, so gradients are
bit-reproducible run to run.

Matrix products with a single left-hand row are padded to two rows before
hitting BLAS: OpenBLAS dispatches M=1 to a GEMV kernel whose accumulation
order differs from GEMM, which would make results depend on batch
composition. With the pad, any row subset of a matmul is bit-identical to
the same rows of the full-batch product (verified for the shapes this
model uses).
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """An operation was called outside its contract."""


class Node:
    """One recorded primitive: output, inputs, and the saved-value vjp closure."""

    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: "Tensor", inputs: tuple, vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_ACTIVE_TAPE: Optional["Tape"] = None


class Tape:
    """Records primitives for one training step; reverse replay yields gradients."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE


ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """Dense n-d array of reals plus an optional handle into the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, disconnected from the tape."""
        return Tensor(self.data, requires_grad=False)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out: Tensor, inputs: tuple, vjp: Callable) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.nodes.append(Node(out, inputs, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    out = Tensor(ad / bd)
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * ad / (bd * bd), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    out = Tensor(np.maximum(ad, 0.0))
    return _record(out, (a,), lambda g: (g * (ad > 0.0),))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    ad = a.data
    sig = 1.0 / (1.0 + np.exp(-ad))
    out = Tensor(ad * sig)
    return _record(out, (a,), lambda g: (g * (sig * (1.0 + ad * (1.0 - sig))),))


def detach(a: Tensor) -> Tensor:
    return a.detach()


# ---------------------------------------------------------------------------
# matrix products


def _mm2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Pad M=1 to keep BLAS on the GEMM kernel; see module docstring.
    if a.shape[0] == 1:
        return (np.repeat(a, 2, axis=0) @ b)[:1]
    return a @ b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a [.., m, k] @ b [k, n]; leading axes of a are flattened for the product."""
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(
            f"matmul: cannot multiply shapes {a.shape} and {b.shape}"
        )
    ad, bd = a.data, b.data
    m = int(np.prod(ad.shape[:-1], dtype=np.int64))
    a2 = np.ascontiguousarray(ad).reshape(m, ad.shape[-1])
    out = Tensor(_mm2(a2, bd).reshape(ad.shape[:-1] + (bd.shape[1],)))

    def vjp(g):
        g2 = np.ascontiguousarray(g).reshape(m, bd.shape[1])
        ga = _mm2(g2, bd.T).reshape(ad.shape)
        gb = _mm2(a2.T, g2)
        return ga, gb

    return _record(out, (a, b), vjp)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product [.., m, k] @ [.., k, n] with identical leading axes."""
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = Tensor(ad @ bd)

    def vjp(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _record(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    return _record(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous-range slice along one axis; the view shares storage."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(a.data[idx])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _record(out, (a,), vjp)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """table [V, d] indexed by integer ids [..] -> [.., d] (embedding lookup)."""
    ids = np.asarray(ids)
    out = Tensor(table.data[ids])

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(out, (table,), vjp)


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick entries along the last axis: a [.., n], idx [.., k] -> [.., k]."""
    idx = np.asarray(idx)
    out = Tensor(np.take_along_axis(a.data, idx, axis=-1))

    def vjp(g):
        ga = np.zeros_like(a.data)
        flat_idx = idx.reshape(-1, idx.shape[-1])
        flat_g = g.reshape(-1, idx.shape[-1])
        rows = np.arange(flat_idx.shape[0])[:, None]
        np.add.at(ga.reshape(-1, a.shape[-1]), (rows, flat_idx), flat_g)
        return (ga,)

    return _record(out, (a,), vjp)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather from a 2-d tensor (token dispatch)."""
    idx = np.asarray(idx)
    out = Tensor(a.data[idx])

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record(out, (a,), vjp)


def index_add_rows(base: Tensor, idx: np.ndarray, rows: Tensor) -> Tensor:
    """base with rows added at positions idx (functional scatter-add)."""
    idx = np.asarray(idx)
    out_data = base.data.copy()
    np.add.at(out_data, idx, rows.data)
    out = Tensor(out_data)
    return _record(out, (base, rows), lambda g: (g, g[idx]))


# ---------------------------------------------------------------------------
# reductions and normalizations


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape),)

    return _record(out, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; outputs sum to 1 along `axis`."""
    ad = a.data
    shifted = ad - ad.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    ad = a.data
    shifted = ad - ad.max(axis=axis, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(ls)

    def vjp(g):
        return (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), vjp)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """Each feature vector scaled to unit root-mean-square, then by gain."""
    if eps <= 0:
        raise ContractError("rms_norm requires eps > 0")
    xd = x.data
    d = xd.shape[-1]
    ms = np.mean(xd * xd, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    out = Tensor(xd * r * gain.data)

    def vjp(g):
        gg = g * gain.data
        inner = np.sum(gg * xd, axis=-1, keepdims=True)
        gx = r * gg - (r ** 3) * xd * (inner / d)
        ggain = (g * xd * r).reshape(-1, d).sum(axis=0)
        return gx, ggain

    return _record(out, (x, gain), vjp)


def ste_select(p: Tensor, states: list, hard_idx: np.ndarray) -> Tensor:
    """Straight-through selection over stacked states.

    Forward picks states[hard_idx] per position (a pure gather, so the
    value is the selected state bit for bit). Backward is the vjp of the
    soft mixture sum_l p_l * states_l: each state receives p_l-weighted
    gradient and p receives the per-state inner products.
    """
    hard_idx = np.asarray(hard_idx)
    if p.shape != hard_idx.shape + (len(states),):
        raise ShapeError(
            f"ste_select: probs {p.shape} do not match index shape "
            f"{hard_idx.shape} with {len(states)} states"
        )
    stacked = np.stack([s.data for s in states], axis=-1)
    out_data = np.take_along_axis(stacked, hard_idx[..., None, None], axis=-1)[..., 0]
    out = Tensor(out_data)

    def vjp(g):
        gp = np.stack([(g * s.data).sum(axis=-1) for s in states], axis=-1)
        gs = tuple(g * p.data[..., l, None] for l in range(len(states)))
        return (gp, *gs)

    return _record(out, (p, *states), vjp)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> dict:
    """Reverse-replay the tape from a scalar loss.

    Returns a map from each reached requires-grad tensor to its gradient
    array and mirrors the values onto `.grad` (accumulating if already set).
    Accumulation order is the fixed reverse execution order of the tape.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise ContractError("loss is not connected to an active tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        holders.pop(id(node.out), None)
        if g is None:
            continue
        for t, gt in zip(node.inputs, node.vjp(g)):
            if gt is None or not t.requires_grad:
                continue
            gt = np.asarray(gt, dtype=t.data.dtype).reshape(t.shape)
            acc = grads.get(id(t))
            grads[id(t)] = gt if acc is None else acc + gt
            holders[id(t)] = t

    result = {}
    for key, g in grads.items():
        t = holders[key]
        result[t] = g
        t.grad = g if t.grad is None else t.grad + g
    return result
