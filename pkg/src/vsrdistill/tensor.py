"""Numpy-backed tensors with a reverse-mode gradient tape.

Every differentiable operation computes its forward value eagerly and, when
any input requires a gradient, appends a node to the active :class:`Tape`.
Because nodes are appended in execution order, walking the tape backwards is
already a reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numba import njit

DEFAULT_DTYPE = np.float32

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn", "consumed")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.consumed = False


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.consumed = True
            node.output._node = None
        self.nodes = []

    def backward(self, loss: "Tensor") -> None:
        if loss.size != 1:
            raise ValueError(f"backward needs a single-element loss, got shape {loss.shape}")
        node = loss._node
        if node is None:
            if not self.nodes:
                raise RuntimeError("tape is empty: loss was not produced by recorded operations")
            raise RuntimeError("loss is not on the tape (backward already run? call tape.clear())")
        if node.consumed:
            raise RuntimeError("backward already ran for this graph; reset the tape first")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for n in reversed(self.nodes):
            g = grads.pop(id(n.output), None)
            if g is None:
                continue
            in_grads = n.backward_fn(g)
            for t, gi in zip(n.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise AssertionError(f"{n.op}: gradient shape {gi.shape} != input shape {t.data.shape}")
                if not np.isfinite(gi).all():
                    raise NonFiniteError(f"non-finite gradient flowing out of '{n.op}'")
                if t._node is None:
                    # leaf: accumulate into .grad
                    t.grad = gi.astype(t.data.dtype, copy=True) if t.grad is None else t.grad + gi
                else:
                    key = id(t)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
        self.clear()


_default_tape = Tape()
_tape_stack: list[Tape] = [_default_tape]
_grad_enabled = True


def get_tape() -> Tape:
    return _tape_stack[-1]


@contextlib.contextmanager
def use_tape(tape: Tape):
    _tape_stack.append(tape)
    try:
        yield tape
    finally:
        _tape_stack.pop()


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(arr: np.ndarray, op: str) -> None:
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise NonFiniteError(f"operation '{op}' produced non-finite values")


def _result(op: str, data: np.ndarray, inputs: Tuple["Tensor", ...], backward_fn: Callable) -> "Tensor":
    _check_finite(data, op)
    out = Tensor(data, _copy=False)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, inputs, out, backward_fn)
        out._node = node
        get_tape().record(node)
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, _copy: bool = True):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(data, np.generic):
            data = np.asarray(data)
        if _copy or not isinstance(data, np.ndarray):
            if dtype is None:
                dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
            data = np.array(data, dtype=dtype)
        elif dtype is not None and data.dtype != dtype:
            data = data.astype(dtype)
        self.data: np.ndarray = data
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, _copy=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    def backward(self) -> None:
        get_tape().backward(self)

    # -- operators -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


# ----------------------------------------------------------------------
# creation
# ----------------------------------------------------------------------

def create(shape: Sequence[int], init: str = "zeros", *, value: float = 0.0, low: float = 0.0,
           high: float = 1.0, mean: float = 0.0, std: float = 1.0, seed: Optional[int] = None,
           requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    """Allocate a tensor with one of the supported initialisations.

    ``init`` is one of ``"zeros"``, ``"constant"``, ``"uniform"`` or
    ``"gaussian"``. Random initialisations require ``seed``.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ValueError(f"negative extent in shape {shape}")
    if init == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif init == "constant":
        data = np.full(shape, value, dtype=dtype)
    elif init in ("uniform", "gaussian"):
        if seed is None:
            raise ValueError(f"{init} initialisation needs a seed")
        rng = np.random.default_rng(seed)
        if init == "uniform":
            data = rng.uniform(low, high, size=shape).astype(dtype)
        else:
            data = rng.normal(mean, std, size=shape).astype(dtype)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad, _copy=False)


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------

def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return _result("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return _result("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise ZeroDivisionError("division by zero in tensor div")
    out = ad / bd

    def bw(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    x = a.data
    return _result("log", np.log(x), (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _result("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _result("square", x * x, (a,), lambda g: (2.0 * g * x,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow and is much faster than scipy's expit here
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _result("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result("relu", a.data * mask, (a,), lambda g: (g * mask,))


def swish(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)

    def bw(g):
        return (g * (s + x * s * (1 - s)),)

    return _result("swish", x * s, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result("tanh", out, (a,), lambda g: (g * (1 - out * out),))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "swish": swish, "sigmoid": sigmoid, "relu": relu, "exp": exp, "log": log,
}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("add", "sub", "mul", "div"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return fn(a, b)
    return fn(as_tensor(a))


# ----------------------------------------------------------------------
# shape manipulation
# ----------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data
    src_shape = a.shape
    advanced = _is_advanced(idx)

    def bw(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _result("getitem", a.data[idx], (a,), bw)


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def pad(a: Tensor, widths) -> Tensor:
    """Zero-pad; ``widths`` is a per-axis list of (before, after)."""
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _result("pad", np.pad(a.data, widths), (a,), lambda g: (g[sl],))


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------

def _norm_axes(axis, ndim) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def _expand_back(g, src_shape, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, src_shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    src = a.shape

    def bw(g):
        return (np.array(_expand_back(g, src, axes, keepdims)),)

    return _result("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), bw)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    count = int(np.prod([src[i] for i in axes])) if axes else 1
    if count == 0:
        raise ValueError("mean over an empty axis")

    def bw(g):
        return (np.array(_expand_back(g, src, axes, keepdims)) / count,)

    return _result("mean", a.data.mean(axis=axes, keepdims=keepdims), (a,), bw)


def reduce_max(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction. The gradient goes to the first maximal element only."""
    axes = _norm_axes(axis, a.ndim)
    x = a.data
    kept = [i for i in range(x.ndim) if i not in axes]
    # move reduced axes last and flatten them so argmax gives the first index
    moved = np.transpose(x, kept + list(axes))
    flat = moved.reshape(moved.shape[: len(kept)] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out_keep = out.reshape([1 if i in axes else x.shape[i] for i in range(x.ndim)])

    def bw(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, arg[..., None], np.reshape(g, arg.shape)[..., None], axis=-1)
        gm = gf.reshape(moved.shape)
        return (np.transpose(gm, np.argsort(kept + list(axes))),)

    return _result("max", out_keep if keepdims else out, (a,), bw)


def reduce(op: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    fns = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}
    if op not in fns:
        raise ValueError(f"unknown reduction {op!r}")
    return fns[op](a, axes, keepdims)


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result("matmul", ad @ bd, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped [in, out]."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[0]:
        raise ValueError(f"linear: input width {xd.shape[-1]} != weight rows {wd.shape[0]}")
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result("linear", out, inputs, bw)


# ----------------------------------------------------------------------
# normalisation and activations over an axis
# ----------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result("softmax", y, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", y, (a,), bw)


def layernorm(a: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
              eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine."""
    x = a.data
    if x.shape[-1] < 1:
        raise ValueError("layernorm over an empty axis")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    inputs = tuple(t for t in (a, gamma, beta) if t is not None)

    def bw(g):
        gxhat = g * gamma.data if gamma is not None else g
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        lead = tuple(range(g.ndim - 1))
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _result("layernorm", out.astype(x.dtype, copy=False), inputs, bw)


def glu(a: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: first half times sigmoid of the second half."""
    x = a.data
    n = x.shape[axis]
    if n % 2:
        raise ValueError(f"glu needs an even extent along axis {axis}, got {n}")
    first, second = np.split(x, 2, axis=axis)
    s = _sigmoid(second)

    def bw(g):
        return (np.concatenate([g * s, g * first * s * (1 - s)], axis=axis),)

    return _result("glu", first * s, (a,), bw)


def dropout(a: Tensor, p: float, rng: Optional[np.random.Generator], training: bool = True) -> Tensor:
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs a generator")
    # 16-bit uniform draws: p is honoured to within 2**-16
    draws = np.frombuffer(rng.bytes(2 * a.size), dtype=np.uint16).reshape(a.shape)
    keep = (draws >= int(round(p * 65536))).astype(a.dtype) * a.dtype.type(1.0 / (1.0 - p))
    return _result("dropout", a.data * keep, (a,), lambda g: (g * keep,))


# ----------------------------------------------------------------------
# convolutions
# ----------------------------------------------------------------------

@njit(cache=True)
def _im2col3d(xp, kt, kh, kw, st, sh, sw, ot, oh, ow):
    # padded xp [N, C, T, H, W] -> cols [C*kt*kh*kw, N*ot*oh*ow]
    n_, c_ = xp.shape[0], xp.shape[1]
    m = ot * oh * ow
    cols = np.empty((c_ * kt * kh * kw, n_ * m), dtype=xp.dtype)
    col = 0
    for c in range(c_):
        for a in range(kt):
            for b in range(kh):
                for d in range(kw):
                    for n in range(n_):
                        for i in range(ot):
                            for j in range(oh):
                                src = xp[n, c, i * st + a, j * sh + b]
                                off = n * m + (i * oh + j) * ow
                                for k in range(ow):
                                    cols[col, off + k] = src[k * sw + d]
                    col += 1
    return cols


@njit(cache=True)
def _col2im3d(cols, n_, c_, tp, hp, wp, kt, kh, kw, st, sh, sw, ot, oh, ow):
    # adjoint of _im2col3d, into the padded shape
    gx = np.zeros((n_, c_, tp, hp, wp), dtype=cols.dtype)
    m = ot * oh * ow
    col = 0
    for c in range(c_):
        for a in range(kt):
            for b in range(kh):
                for d in range(kw):
                    for n in range(n_):
                        for i in range(ot):
                            for j in range(oh):
                                dst = gx[n, c, i * st + a, j * sh + b]
                                off = n * m + (i * oh + j) * ow
                                for k in range(ow):
                                    dst[k * sw + d] += cols[col, off + k]
                    col += 1
    return gx


def _conv_nd(x: Tensor, w: Tensor, bias: Optional[Tensor], stride, padding, nsp: int, name: str) -> Tensor:
    if x.ndim != nsp + 2:
        raise ValueError(f"{name}: expected {nsp + 2}-d input, got shape {x.shape}")
    if w.ndim != nsp + 2:
        raise ValueError(f"{name}: expected {nsp + 2}-d weight, got shape {w.shape}")
    stride = _tuplify(stride, nsp)
    padding = _tuplify(padding, nsp)
    if any(s < 1 for s in stride):
        raise ValueError(f"{name}: stride must be >= 1")
    if any(p < 0 for p in padding):
        raise ValueError(f"{name}: padding must be >= 0")
    n, c = x.shape[:2]
    f, cw = w.shape[:2]
    if cw != c:
        raise ValueError(f"{name}: weight expects {cw} input channels, input has {c}")
    ksz = w.shape[2:]
    sp = x.shape[2:]
    for k, s, p in zip(ksz, sp, padding):
        if k > s + 2 * p:
            raise ValueError(f"{name}: kernel {tuple(ksz)} larger than padded input {tuple(sp)}")
    out_sp = tuple((s + 2 * p - k) // st + 1 for s, p, k, st in zip(sp, padding, ksz, stride))

    if nsp == 2 and c * sp[0] * sp[1] <= _DENSE_LIMIT and f * out_sp[0] * out_sp[1] <= _DENSE_LIMIT:
        return _conv2d_dense(x, w, bias, stride, padding, out_sp, name)

    # lift everything to 3 spatial dims so one kernel serves conv2d and conv3d
    lift = 3 - nsp
    k3 = (1,) * lift + tuple(ksz)
    s3 = (1,) * lift + stride
    p3 = (0,) * lift + padding
    o3 = (1,) * lift + out_sp
    x5 = x.data.reshape((n, c) + (1,) * lift + sp)
    xp = np.ascontiguousarray(np.pad(x5, [(0, 0), (0, 0)] + [(p, p) for p in p3]))
    geom = k3 + s3 + o3
    cols = _im2col3d(xp, *geom)
    wmat = w.data.reshape(f, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(np.moveaxis(out.reshape((f, n) + out_sp), 0, 1))
    inputs = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        gt = np.moveaxis(g, 1, 0).reshape(f, -1)
        gw = (gt @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gp = _col2im3d(wmat.T @ gt, *xp.shape, *geom)
            inner = tuple(slice(p, p + s) for p, s in zip(p3, x5.shape[2:]))
            gx = np.ascontiguousarray(gp[(slice(None), slice(None)) + inner]).reshape(x.shape)
        if bias is None:
            return gx, gw
        return gx, gw, gt.sum(axis=1)

    return _result(name, out, inputs, bw)


_DENSE_LIMIT = 1024
_DENSE_CACHE: dict = {}


def _dense_index(c, h, w, f, kh, kw, stride, padding, out_sp):
    """Index triples (input pixel, output pixel, weight entry) of every tap that hits the image."""
    key = (c, h, w, f, kh, kw, stride, padding)
    hit = _DENSE_CACHE.get(key)
    if hit is None:
        oh, ow = out_sp
        fi, ci, a, b, i, j = np.meshgrid(np.arange(f), np.arange(c), np.arange(kh), np.arange(kw),
                                         np.arange(oh), np.arange(ow), indexing="ij")
        hi = i * stride[0] + a - padding[0]
        wi = j * stride[1] + b - padding[1]
        ok = (hi >= 0) & (hi < h) & (wi >= 0) & (wi < w)
        rows = ((ci * h + hi) * w + wi)[ok]
        cols = ((fi * oh + i) * ow + j)[ok]
        widx = (((fi * c + ci) * kh + a) * kw + b)[ok]
        hit = _DENSE_CACHE[key] = (rows, cols, widx)
    return hit


def _conv2d_dense(x, w, bias, stride, padding, out_sp, name):
    # small feature maps: the whole convolution is one [C*H*W, F*oh*ow] matrix
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    rows, cols, widx = _dense_index(c, h, wd, f, kh, kw, stride, padding, out_sp)
    m = np.zeros((c * h * wd, f * out_sp[0] * out_sp[1]), dtype=w.dtype)
    m[rows, cols] = w.data.reshape(-1)[widx]
    xf = x.data.reshape(n, -1)
    out = xf @ m
    if bias is not None:
        out = (out.reshape(n, f, -1) + bias.data[None, :, None]).reshape(n, -1)
    out = out.reshape((n, f) + out_sp)
    inputs = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        gf = g.reshape(n, -1)
        gw = None
        if w.requires_grad:
            gm = xf.T @ gf
            gw = np.bincount(widx, weights=gm[rows, cols], minlength=w.size).astype(w.dtype).reshape(w.shape)
        gx = (gf @ m.T).reshape(x.shape) if x.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(name, out, inputs, bw)


def _tuplify(v, n):
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(i) for i in v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """2-d convolution: x [N,C,H,W], w [F,C,kh,kw]."""
    return _conv_nd(x, w, bias, stride, padding, 2, "conv2d")


def conv3d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """3-d convolution: x [N,C,T,H,W], w [F,C,kt,kh,kw]."""
    return _conv_nd(x, w, bias, stride, padding, 3, "conv3d")


def depthwise_conv1d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-channel 1-d convolution with 'same' padding.

    x is [N, C, T]; w is [C, k] with k odd.
    """
    if x.ndim != 3:
        raise ValueError(f"depthwise_conv1d: expected [N,C,T], got {x.shape}")
    c, k = w.shape
    if x.shape[1] != c:
        raise ValueError(f"depthwise_conv1d: {x.shape[1]} channels vs weight {w.shape}")
    if k % 2 == 0:
        raise ValueError("depthwise_conv1d needs an odd kernel for same padding")
    half = k // 2
    t = x.shape[2]
    xp = np.pad(x.data, ((0, 0), (0, 0), (half, half)))
    win = sliding_window_view(xp, k, axis=2)  # [N, C, T, k]
    wd = w.data
    out = np.einsum("nctk,ck->nct", win, wd)
    if bias is not None:
        out = out + bias.data[None, :, None]
    inputs = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        gw = np.einsum("nct,nctk->ck", g, win) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for j in range(k):
                gxp[:, :, j:j + t] += g * wd[None, :, j, None]
            gx = gxp[:, :, half:half + t]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return _result("depthwise_conv1d", out, inputs, bw)


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------

def mse(a: Tensor, b: Tensor) -> Tensor:
    d = a - b
    return reduce_mean(d * d)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that requires it and is reachable from ``loss``."""
    get_tape().backward(loss)
