"""Dense N-d tensors with define-by-run reverse-mode autodiff.

Storage is numpy; every differentiable op records a node on the active
:class:`Tape` and :func:`backward` replays the tape in reverse.  Ops are
deliberately strict about shapes: elementwise ops require identical shapes
and broadcasting is only done explicitly (:func:`expand`) or across the
leading batch dims of :func:`matmul`.
"""

from __future__ import annotations

import builtins
import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "DimensionError",
    "Tensor",
    "Tape",
    "tensor",
    "zeros",
    "get_dtype",
    "set_dtype",
    "precision",
    "no_grad",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "expand",
    "sum",
    "mean",
    "abs",
    "softmax_lastdim",
    "layer_norm",
    "gelu",
    "permute",
    "reshape",
    "concat",
    "slice_",
    "pad",
    "roll",
    "take_rows",
    "linear",
]


class DimensionError(ValueError):
    """Raised when operand shapes do not conform."""


_DTYPE = np.float32
_local = threading.local()


def get_dtype():
    return _DTYPE


def set_dtype(dtype) -> None:
    """Switch the global storage dtype (float32 default, float64 for grad checks)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype=np.float64):
    prev = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(prev)


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording on the current thread."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """Immutable array plus optional gradient buffer and tape handle."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _node=None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node = _node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self) -> int | None:
        return None if self._node is None else self._node.index

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


class _Node:
    __slots__ = ("tape", "index", "inputs", "out", "backward", "op")

    def __init__(self, tape, index, inputs, out, backward, op):
        self.tape = tape
        self.index = index
        self.inputs = inputs
        self.out = out
        self.backward = backward
        self.op = op


class Tape:
    """Ordered record of differentiable ops since the last backward pass.

    Nodes are appended as ops execute, so their order is already topological.
    Each thread owns a default tape; ``with Tape() as t:`` scopes a fresh one.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, inputs, out, bwd, op) -> _Node:
        node = _Node(self, len(self.nodes), inputs, out, bwd, op)
        self.nodes.append(node)
        return node

    def reset(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes = []

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1 or loss.ndim > 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._node is None or loss._node.index >= len(self.nodes) or self.nodes[loss._node.index] is not loss._node:
            raise ValueError("loss was not recorded on this tape")
        for node in self.nodes:
            for inp in node.inputs:
                if inp.requires_grad and inp._node is None and inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
        pending: dict[int, np.ndarray] = {loss._node.index: np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss._node.index + 1]):
            g = pending.pop(node.index, None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp.grad += gi
                elif inp._node.index in pending:
                    pending[inp._node.index] = pending[inp._node.index] + gi
                else:
                    pending[inp._node.index] = gi
        self.reset()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = [Tape()]
    return stack


def current_tape() -> Tape:
    return _tape_stack()[-1]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaves that were recorded on the tape but do not influence the loss get a
    zero gradient.  Gradients accumulate into existing ``.grad`` buffers.
    """
    if loss._node is None:
        raise ValueError("loss is not on a tape (no recorded op produced it)")
    loss._node.tape.backward(loss)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], bwd: Callable, op: str) -> Tensor:
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        out._node = current_tape().record(inputs, out, bwd, op)
        return out
    return Tensor(data)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, s: float) -> Tensor:
    s = _DTYPE(s)
    return _emit(a.data * s, (a,), lambda g: (g * s,), "scale")


def abs(a: Tensor) -> Tensor:  # noqa: A001
    # subgradient at 0 is 0
    sign = np.sign(a.data)
    return _emit(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU."""
    xd = x.data
    cdf = (0.5 * (1.0 + erf(xd * xd.dtype.type(0.7071067811865476)))).astype(xd.dtype, copy=False)

    def bwd(g):
        pdf = np.exp(xd * xd * xd.dtype.type(-0.5)) * xd.dtype.type(0.3989422804014327)
        return (g * (cdf + xd * pdf),)

    return _emit(xd * cdf, (x,), bwd, "gelu")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape, dtype = x.shape, x.data.dtype
    return _emit(np.asarray(x.data.sum(dtype=dtype)), (x,), lambda g: (np.full(shape, g, dtype=dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    shape, dtype = x.shape, x.data.dtype
    return _emit(
        np.asarray(x.data.sum(dtype=dtype) / dtype.type(n)),
        (x,),
        lambda g: (np.full(shape, g / dtype.type(n), dtype=dtype),),
        "mean",
    )


# ---------------------------------------------------------------- linear algebra


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    core = shape
    while core and core[0] == 1:
        core = core[1:]
    if g.shape[g.ndim - len(core):] == core:
        # only leading axes were broadcast: reduce them with one matmul
        rows = g.reshape(-1, max(1, int(np.prod(core))))
        ones = np.ones((1, rows.shape[0]), dtype=g.dtype)
        return np.matmul(ones, rows).reshape(shape)
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} are not broadcastable") from None
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit(np.matmul(ad, bd), (a, b), bwd, "matmul")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast to ``shape``; backward sums the copies."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"expand: cannot broadcast {x.shape} to {shape}") from None
    src = x.shape
    return _emit(out, (x,), lambda g: (_unbroadcast(g, src),), "expand")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is (in, out)."""
    if weight.ndim != 2:
        raise DimensionError(f"linear: weight must be 2-D, got {weight.shape}")
    lead = x.shape[:-1]
    flat = x if x.ndim == 2 else reshape(x, (-1, x.shape[-1]))
    y = matmul(flat, weight)
    if bias is not None:
        y = add(y, expand(bias, y.shape))
    return y if x.ndim == 2 else reshape(y, lead + (weight.shape[1],))


# ---------------------------------------------------------------- normalisation


def _rows(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a).reshape(-1, a.shape[-1]) if a.ndim else a.reshape(1, 1)


def _row_max(a: np.ndarray) -> np.ndarray:
    # pairwise halving; much faster than ndarray.max over a short trailing axis
    m = a
    while m.shape[-1] > 1:
        h = m.shape[-1] // 2
        top = np.maximum(m[..., :h], m[..., h : 2 * h])
        m = np.concatenate([top, m[..., 2 * h :]], axis=-1) if m.shape[-1] % 2 else top
    return m


def _row_sum(a: np.ndarray) -> np.ndarray:
    return np.matmul(a, np.ones((a.shape[-1], 1), dtype=a.dtype))


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    xd = x.data
    e = np.exp(xd - _row_max(xd))
    y = e / _row_sum(e)

    def bwd(g):
        return (y * (g - _row_sum(g * y)),)

    return _emit(y, (x,), bwd, "softmax")


def _row_mean(a: np.ndarray) -> np.ndarray:
    # last-axis mean as a matvec; numpy reductions over short trailing axes are slow
    c = a.shape[-1]
    return np.matmul(a, np.full((c, 1), 1.0 / c, dtype=a.dtype))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs last dim {c}")
    xd = x.data
    xc = xd - _row_mean(xd)
    rstd = 1.0 / np.sqrt(_row_mean(xc * xc) + xd.dtype.type(eps))
    xhat = xc * rstd
    gd = gamma.data

    def bwd(g):
        g2 = g.reshape(-1, c)
        ggamma = (g2 * xhat.reshape(-1, c)).sum(axis=0) if gamma.requires_grad else None
        gbeta = g2.sum(axis=0) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - _row_mean(gh) - xhat * _row_mean(gh * xhat))
        return gx, ggamma, gbeta

    return _emit(xhat * gd + beta.data, (x, gamma, beta), bwd, "layer_norm")


# ---------------------------------------------------------------- shape ops


def permute(x: Tensor, order: Sequence[int]) -> Tensor:
    order = tuple(order)
    if sorted(order) != list(range(x.ndim)):
        raise DimensionError(f"permute: {order} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(order))
    return _emit(np.ascontiguousarray(x.data.transpose(order)), (x,), lambda g: (g.transpose(inv),), "permute")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if known == 0 or x.size % known:
            raise DimensionError(f"reshape: cannot infer {shape} from {x.shape}")
        shape = tuple(x.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: {x.shape} ({x.size} elements) into {shape}")
    src = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    if not xs:
        raise DimensionError("concat: empty input list")
    nd = xs[0].ndim
    axis = axis % nd
    for t in xs[1:]:
        if t.ndim != nd or any(t.shape[i] != xs[0].shape[i] for i in range(nd) if i != axis):
            raise DimensionError(f"concat: {xs[0].shape} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _emit(
        np.concatenate([t.data for t in xs], axis=axis),
        tuple(xs),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
        "concat",
    )


def slice_(x: Tensor, index) -> Tensor:
    """Basic indexing (ints and slices); backward scatters into zeros."""
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not isinstance(ix, (int, slice, np.integer)) and ix is not Ellipsis:
            raise DimensionError(f"slice: unsupported index {ix!r}")
    try:
        out = x.data[index]
    except IndexError as exc:
        raise DimensionError(f"slice: {exc} for shape {x.shape}") from None
    src, dtype = x.shape, x.data.dtype

    def bwd(g):
        full = np.zeros(src, dtype=dtype)
        full[index] = g
        return (full,)

    return _emit(np.array(out), (x,), bwd, "slice")


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` holds one (before, after) pair per axis."""
    widths = tuple((int(a), int(b)) for a, b in widths)
    if len(widths) != x.ndim or any(a < 0 or b < 0 for a, b in widths):
        raise DimensionError(f"pad: widths {widths} invalid for shape {x.shape}")
    if all(a == 0 and b == 0 for a, b in widths):
        return x
    crop = tuple(slice(a, a + n) for (a, _), n in zip(widths, x.shape))
    return _emit(np.pad(x.data, widths), (x,), lambda g: (g[crop],), "pad")


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    back = tuple(-s for s in shifts)
    return _emit(np.roll(x.data, shifts, axes), (x,), lambda g: (np.roll(g, back, axes),), "roll")


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``table[index]`` along axis 0 (scatter-add on backward)."""
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise DimensionError(f"take_rows: index out of range for table {table.shape}")
    src, dtype = table.shape, table.data.dtype

    def bwd(g):
        full = np.zeros(src, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _emit(table.data[index], (table,), bwd, "take_rows")


# ---------------------------------------------------------------- gradient checking


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    h: float = 1e-5,
    coords: Iterable[tuple[int, ...]] | None = None,
) -> float:
    """Max relative error between backprop and central differences of ``f`` at ``x``.

    Error per coordinate is ``|analytic - cd| / max(|analytic|, |cd|, 1e-8)``.
    Run under ``precision(np.float64)`` for meaningful tolerances.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=_DTYPE)
    leaf = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
        tape.backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
    if coords is None:
        coords = np.ndindex(base.shape)
    worst = 0.0
    with no_grad():
        for ix in coords:
            plus, minus = base.copy(), base.copy()
            plus[ix] += h
            minus[ix] -= h
            cd = (f(Tensor(plus)).item() - f(Tensor(minus)).item()) / (2 * h)
            a = float(analytic[ix])
            err = builtins.abs(a - cd) / max(builtins.abs(a), builtins.abs(cd), 1e-8)
            worst = max(worst, err)
    return worst
