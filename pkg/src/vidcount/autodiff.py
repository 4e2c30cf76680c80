"""Small reverse-mode differentiation engine on top of numpy.

Every value is a float64 :class:`Tensor`. Operations on tensors that require
gradients append a node to the active :class:`Tape`; :func:`backpropagate`
walks that tape in reverse recording order, so gradients are reproducible
bit for bit.

Usage::

    from vidcount import autodiff as ad

    with ad.Tape():
        x = ad.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        loss = ad.sum(ad.square(x))
        grads = ad.backpropagate(loss)
    grads[x]  # array([2., 4., 6.])
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""

    def __init__(self, primitive: str, detail: str):
        super().__init__(f"{primitive}: {detail}")
        self.primitive = primitive


class DomainError(ValueError):
    """Raised when a primitive receives input outside its real domain."""


class Tensor:
    """N-dimensional float64 array that can take part in differentiation."""

    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.node_id: int | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Row-major flat copy of the data."""
        return self.data.ravel().copy()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        if other == 0:
            raise ZeroDivisionError("division of a tensor by zero")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    attrs: dict[str, Any]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: tuple = field(default=())


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is a topological order by
    construction. A tape is meant to live for one training step; call
    :meth:`reset` (or open a fresh one) between steps.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()

    def record(self, node: Node, out: Tensor) -> None:
        out.node_id = len(self.nodes)
        out.tape = self
        out.requires_grad = True
        self.nodes.append(node)

    def __enter__(self) -> Tape:
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def backpropagate(self, loss: Tensor) -> GradientMap:
        return backpropagate(loss)


_TAPE_STACK: list[Tape] = [Tape()]
_GRAD_ENABLED = [True]


def active_tape() -> Tape:
    return _TAPE_STACK[-1]


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops return plain constants."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class GradientMap(dict):
    """Mapping from leaf tensors to gradient arrays of the same shape."""

    def by_name(self) -> dict[str, np.ndarray]:
        return {t.name: g for t, g in self.items() if t.name is not None}


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward, attrs=None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.name = None
    out.node_id = None
    out.tape = None
    if _GRAD_ENABLED[-1] and any(t.requires_grad for t in inputs):
        active_tape().record(Node(kind, tuple(inputs), attrs or {}, backward), out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)
    sa, sb = a.shape, b.shape
    return _make("subtract", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)
    ad, bd = a.data, b.data
    return _make("multiply", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return _make("scale", a.data * factor, (a,), lambda g: (g * factor,), {"factor": factor})


def power(a, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a constant real exponent."""
    a = as_tensor(a)
    exponent = float(exponent)
    if exponent != int(exponent) and np.any(a.data < 0):
        raise DomainError("power: negative base with non-integer exponent")
    ad = a.data
    out = ad ** exponent
    if exponent == 0:
        return _make("power", out, (a,), lambda g: (np.zeros_like(g),), {"exponent": 0.0})
    return _make("power", out, (a,), lambda g: (g * exponent * ad ** (exponent - 1),),
                 {"exponent": exponent})


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive input")
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,),
                 {"lo": lo, "hi": hi})


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), backward, {"axis": axis})


LAYER_NORM_EPS = 1e-5


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis (no affine part)."""
    a = as_tensor(a)
    x = a.data
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make("layer_norm", xhat, (a,), backward, {"eps": eps, "n": n})


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", f"batch dimensions differ: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make("matmul", ad @ bd, (a, b), backward)


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N, C, H, W) with ``w`` (O, C, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError("conv2d", f"input channels {c} != kernel channels {cw}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (N, Ho, Wo, C*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).transpose(0, 3, 1, 2)
    wshape = w.shape

    def backward(g):
        gt = g.transpose(0, 2, 3, 1)  # (N, Ho, Wo, O)
        gw = (gt.reshape(-1, o).T @ cols.reshape(-1, c * kh * kw)).reshape(wshape)
        gcols = (gt @ wmat).reshape(n, ho, wo, c, kh, kw)
        gx = np.zeros((n, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        return gx, gw

    return _make("conv2d", np.ascontiguousarray(out), (x, w), backward,
                 {"stride": stride, "padding": padding})


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix (n_out, n_in) with half-pixel centers, edge clamped."""
    m = np.zeros((n_out, n_in))
    scale_ = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale_ - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def upsample_bilinear(x, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of the last two axes of ``x`` to ``size``."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("upsample", f"need at least 2-D input, got {x.shape}")
    ah = bilinear_matrix(x.shape[-2], size[0])
    aw = bilinear_matrix(x.shape[-1], size[1])
    out = ah @ x.data @ aw.T
    return _make("upsample", out, (x,), lambda g: (ah.T @ g @ aw,), {"size": tuple(size)})


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    kshape = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(np.reshape(g, kshape), shape).copy(),)

    return _make("reduce_sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), backward,
                 {"axis": axes})


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} into {shape}") from None
    src = a.shape
    return _make("reshape", out, (a,), lambda g: (g.reshape(src),), {"shape": shape})


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", f"axes {axes} do not permute a {a.ndim}-D tensor")
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),),
                 {"axes": axes})


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", "nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in ts)
        raise ShapeError("concat", f"incompatible shapes along axis {axis}: {shapes}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, ts, backward, {"axis": axis})


def slice_(a, key) -> Tensor:
    """Basic or integer-array indexing; gradients scatter back with accumulation."""
    a = as_tensor(a)
    try:
        out = a.data[key]
    except IndexError as exc:
        raise ShapeError("slice", f"{exc} for shape {a.shape}") from None
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _make("slice", np.array(out, dtype=np.float64), (a,), backward, {"key": key})


# public aliases
sum = reduce_sum  # noqa: A001
mean = reduce_mean
abs = abs_  # noqa: A001


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "scale": scale,
    "matmul": matmul,
    "conv2d": conv2d,
    "upsample": upsample_bilinear,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean,
    "reshape": reshape,
    "transpose": transpose,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": slice_,
    "abs": abs_,
    "square": square,
    "sqrt": sqrt,
    "log": log,
    "power": power,
    "clip": clip,
}


def forward_primitive(kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Dispatch a primitive by name, e.g. ``forward_primitive("conv2d", [x, w], {"stride": 2})``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    return fn(*inputs, **(attrs or {}))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backpropagate(loss: Tensor) -> GradientMap:
    """Gradients of a scalar ``loss`` with respect to every leaf that requires them."""
    if loss.data.size != 1:
        raise ShapeError("backpropagate", f"loss must be scalar, got shape {loss.shape}")
    if loss.node_id is None or loss.tape is None:
        raise ValueError("backpropagate: loss is not on a tape (no input requires grad?)")
    tape = loss.tape
    if loss.node_id >= len(tape.nodes):
        raise ValueError("backpropagate: tape was reset after the loss was computed")

    node_grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    leaves = GradientMap()
    for idx in range(loss.node_id, -1, -1):
        g = node_grads.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node_id is not None and inp.tape is tape:
                prev = node_grads.get(inp.node_id)
                node_grads[inp.node_id] = ig if prev is None else prev + ig
            else:
                prev = leaves.get(inp)
                leaves[inp] = np.array(ig, dtype=np.float64) if prev is None else prev + ig
    return leaves


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def finite_difference_check(f: Callable[[Tensor], Tensor], x, epsilon: float = 1e-5,
                            indices: Sequence[int] | None = None) -> float:
    """Max relative error between backprop and central-difference gradients of ``f`` at ``x``.

    ``indices`` restricts the check to a subset of flat coordinates.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    with Tape():
        xt = Tensor(base.copy(), requires_grad=True)
        y = f(xt)
        if y.data.size != 1:
            raise ShapeError("finite_difference_check", f"f returned shape {y.shape}")
        if y.node_id is None:
            analytic = np.zeros_like(base)
        else:
            analytic = backpropagate(y).get(xt, np.zeros_like(base))

    coords = range(base.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in coords:
            plus = base.copy()
            plus.flat[i] += epsilon
            minus = base.copy()
            minus.flat[i] -= epsilon
            fd = (f(Tensor(plus)).item() - f(Tensor(minus)).item()) / (2 * epsilon)
            worst = max(worst, float(relative_error(analytic.flat[i], fd)))
    return worst
