"""Minimal reverse-mode differentiation over numpy arrays.

Images use NHWC layout throughout.  Convolutions are "valid"; callers pad
explicitly with :func:`pad2d` so every shape in a network can be read off the
layer list.  Every op builds a node that remembers its parents and a closure
mapping the output gradient to one gradient per parent.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LEAKY_COEF = 0.2


class ShapeError(ValueError):
    pass


class GraphConsumedError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{tag})"

    # arithmetic sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_finite(op: str, arr: np.ndarray) -> None:
    if _FINITE_CHECK and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op}: produced non-finite values")


_FINITE_CHECK = False


@contextlib.contextmanager
def finite_checks(enabled: bool = True):
    """Raise as soon as any op produces NaN/inf (used by grad_check and debugging)."""
    global _FINITE_CHECK
    prev, _FINITE_CHECK = _FINITE_CHECK, enabled
    try:
        yield
    finally:
        _FINITE_CHECK = prev


# Kinked ops (relu, leaky relu, clip) push their branch masks here while a
# recorder is active; grad_check compares them across perturbations.
_KINK_LOG: list | None = None


@contextlib.contextmanager
def kink_recorder():
    global _KINK_LOG
    prev, _KINK_LOG = _KINK_LOG, []
    try:
        yield _KINK_LOG
    finally:
        _KINK_LOG = prev


def _log_kink(mask: np.ndarray) -> None:
    if _KINK_LOG is not None:
        _KINK_LOG.append(np.packbits(mask.ravel()).tobytes())


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _operands(a, b) -> tuple[Tensor, Tensor]:
    """Promote operands to tensors; bare Python scalars adopt the other side's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.isscalar(b):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor) and np.isscalar(a):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return as_tensor(a), as_tensor(b)


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    _binary_shapes("add", a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    _binary_shapes("sub", a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    _binary_shapes("mul", a, b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    _binary_shapes("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _node(out, (a, b), bw, "div")


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        return (2.0 * g * x.data,)

    return _node(x.data * x.data, (x,), bw, "square")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    _check_finite("exp", out)

    def bw(g):
        return (g * out,)

    return _node(out, (x,), bw, "exp")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.log(x.data)
    _check_finite("log", out)

    def bw(g):
        return (g / x.data,)

    return _node(out, (x,), bw, "log")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _node(out, (x,), bw, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _node(out, (x,), bw, "tanh")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    _log_kink(mask)

    def bw(g):
        return (g * mask,)

    return _node(x.data * mask, (x,), bw, "relu")


def leaky_relu(x: Tensor, coef: float = LEAKY_COEF) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    _log_kink(mask)
    scale = np.where(mask, 1.0, coef).astype(x.dtype, copy=False)

    def bw(g):
        return (g * scale,)

    return _node(x.data * scale, (x,), bw, "leaky_relu")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    _log_kink(inside)

    def bw(g):
        return (g * inside,)

    return _node(np.clip(x.data, lo, hi), (x,), bw, "clip")


# ---------------------------------------------------------------- structural

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None

    def bw(g):
        return (g.reshape(x.shape),)

    return _node(out, (x,), bw, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _node(np.transpose(x.data, axes), (x,), bw, "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    x = as_tensor(x)
    out = x.data[idx]

    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _node(np.array(out), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(out, ts, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


def pad2d(x: Tensor, top: int, bottom: int | None = None, left: int | None = None, right: int | None = None) -> Tensor:
    """Zero-pad the two spatial axes of an NHWC tensor."""
    x = as_tensor(x)
    bottom = top if bottom is None else bottom
    left = top if left is None else left
    right = left if right is None else right
    if min(top, bottom, left, right) < 0:
        raise ValueError("pad2d: negative padding")
    widths = [(0, 0), (top, bottom), (left, right), (0, 0)]
    out = np.pad(x.data, widths)
    h, w = x.shape[1], x.shape[2]

    def bw(g):
        return (g[:, top:top + h, left:left + w, :],)

    return _node(out, (x,), bw, "pad2d")


def crop2d(x: Tensor, top: int, bottom: int | None = None, left: int | None = None, right: int | None = None) -> Tensor:
    x = as_tensor(x)
    bottom = top if bottom is None else bottom
    left = top if left is None else left
    right = left if right is None else right
    h, w = x.shape[1], x.shape[2]
    return getitem(x, (slice(None), slice(top, h - bottom), slice(left, w - right), slice(None)))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def _conv_out(n: int, k: int, s: int) -> int:
    return (n - k) // s + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, h, w, c = x.shape
    ho, wo = _conv_out(h, kh, stride), _conv_out(w, kw, stride)
    sn, sh, sw, sc = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(n, ho, wo, kh, kw, c), strides=(sn, sh * stride, sw * stride, sh, sw, sc), writeable=False
    )
    return view.reshape(n * ho * wo, kh * kw * c)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int, stride: int) -> np.ndarray:
    n, h, w, c = shape
    ho, wo = _conv_out(h, kh, stride), _conv_out(w, kw, stride)
    if stride > 1 and kh % stride == 0 and kw % stride == 0:
        return _col2im_phased(cols, shape, kh, kw, stride)
    cols = cols.reshape(n, ho, wo, kh, kw, c)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += cols[:, :, :, i, j, :]
    return out


def _col2im_phased(cols: np.ndarray, shape, kh: int, kw: int, s: int) -> np.ndarray:
    # kernel offset i = s*a + p lands on output row s*(oy + a) + p, so each
    # (a, b) block is one dense add over all phases (p, q) at once
    n, h, w, c = shape
    ho, wo = _conv_out(h, kh, s), _conv_out(w, kw, s)
    na, nb = kh // s, kw // s
    cols = cols.reshape(n, ho, wo, na, s, nb, s, c)
    buf = np.zeros((n, ho + na - 1, s, wo + nb - 1, s, c), dtype=cols.dtype)
    for a in range(na):
        for b in range(nb):
            buf[:, a:a + ho, :, b:b + wo, :, :] += cols[:, :, :, a, :, b, :, :].transpose(0, 1, 3, 2, 4, 5)
    buf = buf.reshape(n, (ho + na - 1) * s, (wo + nb - 1) * s, c)
    out = np.zeros(shape, dtype=cols.dtype)
    hh, ww = min(h, buf.shape[1]), min(w, buf.shape[2])
    out[:, :hh, :ww] = buf[:, :hh, :ww]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid cross-correlation.  x: (N, H, W, Cin), w: (kh, kw, Cin, Cout)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    kh, kw, cin, cout = w.shape
    n, h, wd, _ = x.shape
    if h < kh or wd < kw:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    ho, wo = _conv_out(h, kh, stride), _conv_out(wd, kw, stride)
    cols = _im2col(np.ascontiguousarray(x.data), kh, kw, stride)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ w2).reshape(n, ho, wo, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = _col2im(g2 @ w2.T, x.shape, kh, kw, stride) if x.requires_grad else None
        return gx, gw

    y = _node(out, (x, w), bw, "conv2d")
    return y if b is None else add(y, b)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Adjoint of :func:`conv2d` w.r.t. its input.  x: (N, H, W, Cin), w: (kh, kw, Cin, Cout).

    Output extent is (H - 1) * stride + kh; crop afterwards for "same"-style shapes.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv_transpose2d: incompatible shapes {x.shape} and {w.shape}")
    kh, kw, cin, cout = w.shape
    n, h, wd, _ = x.shape
    oh, ow = (h - 1) * stride + kh, (wd - 1) * stride + kw
    # (Cin, kh*kw*Cout)
    wt = np.transpose(w.data, (2, 0, 1, 3)).reshape(cin, kh * kw * cout)
    x2 = x.data.reshape(-1, cin)
    out = _col2im(x2 @ wt, (n, oh, ow, cout), kh, kw, stride)

    def bw(g):
        gcols = _im2col(np.ascontiguousarray(g), kh, kw, stride)
        gx = (gcols @ wt.T).reshape(x.shape) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = np.transpose((x2.T @ gcols).reshape(cin, kh, kw, cout), (1, 2, 0, 3))
        return gx, gw

    y = _node(out, (x, w), bw, "conv_transpose2d")
    return y if b is None else add(y, b)


def _box_sum_valid(a: np.ndarray, k: int) -> np.ndarray:
    c = np.cumsum(a, axis=1)
    c = np.concatenate([np.zeros_like(c[:, :1]), c], axis=1)
    a = c[:, k:] - c[:, :-k]
    c = np.cumsum(a, axis=2)
    c = np.concatenate([np.zeros_like(c[:, :, :1]), c], axis=2)
    return c[:, :, k:] - c[:, :, :-k]


def box_filter(x: Tensor, size: int) -> Tensor:
    """Mean over every size x size window (valid positions only), NHWC."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] < size or x.shape[2] < size:
        raise ShapeError(f"box_filter: input {x.shape} smaller than window {size}")
    scale = 1.0 / (size * size)
    out = _box_sum_valid(x.data, size) * scale

    def bw(g):
        gp = np.pad(g, [(0, 0), (size - 1, size - 1), (size - 1, size - 1), (0, 0)])
        return (_box_sum_valid(gp, size) * scale,)

    return _node(out, (x,), bw, "box_filter")


def sparse_apply(x: Tensor, mats: Sequence, channels: np.ndarray | None = None) -> Tensor:
    """Apply one sparse (HW x HW) linear map per batch item to the selected channels.

    Used for image warps: resampling is linear in pixel values, so the backward
    pass is the transposed matrix.  Unselected channels pass through untouched.
    """
    x = as_tensor(x)
    n, h, w, c = x.shape
    if len(mats) != n:
        raise ShapeError(f"sparse_apply: {len(mats)} matrices for batch of {n}")
    sel = np.ones(c, dtype=bool) if channels is None else np.asarray(channels, dtype=bool)
    out = x.data.copy()
    idx = np.flatnonzero(sel)
    for i, m in enumerate(mats):
        if m is None:
            continue
        src = x.data[i].reshape(h * w, c)[:, idx]
        out[i].reshape(h * w, c)[:, idx] = np.asarray(m @ src, dtype=x.dtype)

    def bw(g):
        gx = g.copy()
        for i, m in enumerate(mats):
            if m is None:
                continue
            gi = g[i].reshape(h * w, c)[:, idx]
            gx[i].reshape(h * w, c)[:, idx] = np.asarray(m.T @ gi, dtype=g.dtype)
        return (gx,)

    return _node(out, (x,), bw, "sparse_apply")


# ---------------------------------------------------------------- dispatcher

_OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "square": square,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "clip": clip,
    "sum": sum_,
    "mean": mean,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "pad2d": pad2d,
    "crop2d": crop2d,
    "matmul": matmul,
    "dense": dense,
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
    "box_filter": box_filter,
    "sparse_apply": sparse_apply,
}


def forward_op(kind: str, inputs: Sequence, params: Sequence = (), **attrs) -> Tensor:
    """Run op ``kind`` on ``inputs`` followed by ``params`` (weights, biases)."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    if kind == "concat":
        return fn(list(inputs) + list(params), **attrs)
    return fn(*inputs, *params, **attrs)


# ---------------------------------------------------------------- backward

@dataclass
class Graph:
    """Nodes reachable from a root, in topological order (inputs first)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor, graph: Graph | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

    The graph is released afterwards; a second call on the same loss raises.
    Returns a mapping leaf -> gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("backward: graph already consumed; run forward again")
    graph = graph or Graph.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node._backward is None:
            if node._op == "leaf":
                node.grad = g.copy() if node.grad is None else node.grad + g
                leaves[node] = node.grad
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in graph.nodes:
        if node._op != "leaf":
            node._backward = None
            node._parents = ()
            node._consumed = True
    return leaves


# ---------------------------------------------------------------- grad check

@dataclass
class BlockReport:
    name: str
    checked: int
    skipped: int
    max_rel_err: float
    mean_rel_err: float


@dataclass
class GradCheckReport:
    blocks: list[BlockReport]
    tol: float
    failures: list[str] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((b.max_rel_err for b in self.blocks), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_rel_err < self.tol


def grad_check(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor] | dict[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-7,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must be deterministic and rebuild its graph on each call.  Relative
    error is |a - n| / max(|a|, |n|, floor).  A coordinate is skipped when a
    perturbation of 10*step flips any relu/leaky-relu/clip branch.
    ``max_coords`` samples that many coordinates per parameter block.
    """
    named = list(params.items()) if isinstance(params, dict) else [
        (p.name or f"param{i}", p) for i, p in enumerate(params)
    ]
    if not named:
        return GradCheckReport([], tol)
    rng = np.random.default_rng(seed)
    failures: list[str] = []

    for _, p in named:
        p.grad = None
    with finite_checks():
        try:
            loss = fn()
        except FloatingPointError as e:
            return GradCheckReport([], tol, [f"forward: {e}"])
    if not np.all(np.isfinite(loss.data)):
        return GradCheckReport([], tol, ["forward: non-finite loss"])
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in named}

    def evaluate() -> tuple[float, list]:
        with kink_recorder() as log:
            val = fn()
        return float(val.data), list(log)

    _, base_kinks = evaluate()
    blocks = []
    for name, p in named:
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        if not np.all(np.isfinite(a_flat)):
            failures.append(f"{name}: non-finite analytic gradient")
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        errs, skipped = [], 0
        for k in coords:
            orig = flat[k]
            flat[k] = orig + 10 * step
            _, hi_kinks = evaluate()
            flat[k] = orig - 10 * step
            _, lo_kinks = evaluate()
            if hi_kinks != base_kinks or lo_kinks != base_kinks:
                flat[k] = orig
                skipped += 1
                continue
            flat[k] = orig + step
            fp, _ = evaluate()
            flat[k] = orig - step
            fm, _ = evaluate()
            flat[k] = orig
            num = (fp - fm) / (2 * step)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                failures.append(f"{name}[{k}]: non-finite loss under perturbation")
                continue
            a = a_flat[k]
            errs.append(abs(a - num) / max(abs(a), abs(num), floor))
        errs_arr = np.asarray(errs) if errs else np.zeros(1)
        blocks.append(BlockReport(name, len(errs), skipped, float(errs_arr.max()), float(errs_arr.mean())))
    return GradCheckReport(blocks, tol, failures)
