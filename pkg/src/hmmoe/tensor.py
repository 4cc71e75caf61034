"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations needed by the adapter math are provided. Operations are
recorded on the innermost active :class:`Tape`; with no tape active they run
as plain numpy computations and nothing is differentiable::

    with Tape() as tape:
        loss = sum_(matmul(x, w))
    tape.backward(loss)
    w.grad  # filled

Broadcasting follows numpy rules restricted to what numpy itself calls
"stretching" of size-1 axes (after left-padding with size-1 axes).
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError, DimensionError, EmptySequenceError

DTYPE = np.float64

_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional float64 array plus an optional link to a tape node.

    Leaf tensors with ``requires_grad=True`` are parameters: ``backward``
    accumulates into their ``grad`` slot.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "node_id", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return NotImplemented

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class _Node:
    __slots__ = ("inputs", "vjp")

    def __init__(self, inputs: tuple[Tensor, ...], vjp: Callable):
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Nodes are appended as operations execute, so the list is already in
    topological order. A tape is owned by the thread that entered it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        out.requires_grad = True
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append(_Node(inputs, vjp))

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

        When ``params`` is given, their gradient slots are reset to zero first,
        so parameters the loss does not depend on end up with a zero gradient.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if params is not None:
            for p in params:
                p.grad = np.zeros_like(p.data)
        if loss.node_id is None or loss._tape is not self:
            if loss.requires_grad and loss.node_id is None:
                _accumulate_leaf(loss, np.ones_like(loss.data))
            return
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node_id in range(loss.node_id, -1, -1):
            g = grads.pop(node_id, None)
            if g is None:
                continue
            node = self.nodes[node_id]
            needs = tuple(t.requires_grad for t in node.inputs)
            in_grads = node.vjp(g, needs)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.node_id is None:
                    _accumulate_leaf(t, gi)
                elif t._tape is self:
                    prev = grads.get(t.node_id)
                    grads[t.node_id] = gi if prev is None else prev + gi


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        g = np.broadcast_to(g, t.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Differentiate ``loss`` on the tape that recorded it."""
    if loss._tape is None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if params is not None:
            for p in params:
                p.grad = np.zeros_like(p.data)
        return
    loss._tape.backward(loss, params)


# -- helpers -----------------------------------------------------------------


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                tape._record(out, inputs, vjp)
                break
    return out


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if a == b:
        return a
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"shapes {a} and {b} are not broadcast-compatible") from None


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing size-1 stretching."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (unbroadcast(g, sa) if needs[0] else None,
                unbroadcast(g, sb) if needs[1] else None)

    return _make(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (unbroadcast(g, sa) if needs[0] else None,
                unbroadcast(-g, sb) if needs[1] else None)

    return _make(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g, needs):
        return (unbroadcast(g * bd, ad.shape) if needs[0] else None,
                unbroadcast(g * ad, bd.shape) if needs[1] else None)

    return _make(ad * bd, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g, needs: (g * c,))


def add_scalar(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data + float(c), (a,), lambda g, needs: (g,))


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def vjp(g, needs):
        ga = gb = None
        if needs[0]:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if needs[1]:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), vjp)


# -- elementwise nonlinearities ----------------------------------------------


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g, needs: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g, needs: (g * y * (1.0 - y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g, needs: (g * y,))


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def softmax_array(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    y = softmax_array(x.data, axis)

    def vjp(g, needs):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), vjp)


# -- reductions and shape ops ------------------------------------------------


def sum_(x, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def vjp(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), vjp)


def mean(x, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    if n == 0:
        raise EmptySequenceError(f"mean over an empty axis of shape {x.shape}")
    return scale(sum_(x, axis, keepdims), 1.0 / n)


def mean_pool(x, axis: int = 1) -> Tensor:
    """Average over the sequence axis, keeping it as a size-1 axis."""
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    if x.shape[axis] == 0:
        raise EmptySequenceError(f"cannot pool an empty sequence (shape {x.shape})")
    n = x.shape[axis]
    shape = x.shape

    def vjp(g, needs):
        return (np.broadcast_to(g / n, shape),)

    return _make(x.data.mean(axis=axis, keepdims=True), (x,), vjp)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} into {tuple(shape)}") from None
    return _make(y, (x,), lambda g, needs: (g.reshape(old),))


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 axes, got shape {x.shape}")
    return _make(np.swapaxes(x.data, -1, -2), (x,),
                 lambda g, needs: (np.swapaxes(g, -1, -2),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ContractError("concat of no tensors")
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(
            f"cannot concatenate shapes {[t.shape for t in ts]} on axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g, needs):
        return tuple(np.split(g, splits, axis=axis))

    return _make(y, ts, vjp)


def index(x, key) -> Tensor:
    """Numpy-style indexing; the adjoint scatters with ``np.add.at``."""
    x = as_tensor(x)
    shape = x.shape

    def vjp(g, needs):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, key, g)
        return (out,)

    return _make(np.asarray(x.data[key]), (x,), vjp)


def scatter_rows(x, rows: np.ndarray, n: int) -> Tensor:
    """Place the rows of ``x`` at positions ``rows`` of a zero tensor with ``n`` rows.

    ``rows`` must not contain duplicates.
    """
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.intp)
    if rows.shape != (x.shape[0],):
        raise DimensionError(f"{rows.shape[0] if rows.ndim else 0} row indices for {x.shape[0]} rows")
    out = np.zeros((n,) + x.shape[1:], dtype=DTYPE)
    out[rows] = x.data
    return _make(out, (x,), lambda g, needs: (g[rows],))


# -- fused blocks -------------------------------------------------------------


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-channel gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm over {x.shape} needs gain/bias of shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def vjp(g, needs):
        gx = ggain = gbias = None
        if needs[0]:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if needs[1]:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if needs[2]:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _make(xhat * gd + bias.data, (x, gain, bias), vjp)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, C] logits, got {logits.shape}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError("labels must be integers")
    if b and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def vjp(g, needs):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / b),)

    return _make(np.asarray(loss), (logits,), vjp)
