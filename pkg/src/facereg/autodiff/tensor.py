"""Reverse-mode differentiable arrays with the small op set the models need.

Broadcasting is deliberately narrow: an operand may match the other's shape,
be a scalar, a row vector ``(C,)`` / ``(1, C)`` against ``(N, C)``, or a
column ``(N, 1)`` against ``(N, C)``. Anything else is a shape error.
"""
from __future__ import annotations

import numpy as np
from scipy import sparse

from .. import kernels


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, value, requires_grad: bool = False, parents=(), backward=None, op: str = "leaf"):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate gradients into every tensor this one depends on."""
        if grad is None:
            if self.value.size != 1:
                raise ShapeError(f"backward without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.value)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.value.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return gather(self, idx)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _coerce(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def _node(value, parents, backward, op) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(value, rg, parents if rg else (), backward if rg else None, op)


def _check_broadcast(op, sa, sb):
    if sa == sb or sa == () or sb == ():
        return
    big, small = (sa, sb) if (len(sa), np.prod(sa)) >= (len(sb), np.prod(sb)) else (sb, sa)
    if len(big) == 2:
        n, c = big
        if small in ((c,), (1, c), (n, 1)):
            return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    if len(shape) == 1:
        return g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


# --------------------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast("mul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def relu(x: Tensor) -> Tensor:
    pos = x.value > 0
    return _node(np.where(pos, x.value, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    xv = x.value
    neg = xv <= 0
    em = np.expm1(np.minimum(xv, 0))
    out = np.where(neg, alpha * em, xv).astype(x.dtype)
    return _node(out, (x,), lambda g: (np.where(neg, g * alpha * (em + 1), g).astype(g.dtype),), "elu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        e = np.exp(-np.abs(v))
        return np.where(v >= 0, 1 / (1 + e), e / (1 + e)).astype(v.dtype)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.value)
    return _node(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    xv = x.value
    out = (np.maximum(xv, 0) + np.log1p(np.exp(-np.abs(xv)))).astype(x.dtype)
    s = _sigmoid(xv)
    return _node(out, (x,), lambda g: (g * s,), "softplus")


def abs_(x: Tensor) -> Tensor:
    sgn = np.sign(x.value)
    return _node(np.abs(x.value), (x,), lambda g: (g * sgn,), "abs")


def square(x: Tensor) -> Tensor:
    xv = x.value
    return _node(xv * xv, (x,), lambda g: (2 * g * xv,), "square")


def sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.value)

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(r > 0, g / (2 * r), 0).astype(g.dtype),)

    return _node(r, (x,), back, "sqrt")


# --------------------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _node(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-row affine map ``x @ W + b``: a shared 1x1 convolution over points."""
    if x.value.ndim != 2 or weight.value.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def sparse_matmul(m: sparse.spmatrix, x: Tensor) -> Tensor:
    if m.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse_matmul: matrix {m.shape} and features {x.shape}")
    m = m.astype(x.dtype).tocsr()
    mt = m.T.tocsr()
    return _node(np.asarray(m @ x.value), (x,), lambda g: (np.asarray(mt @ g),), "sparse_matmul")


def cross(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape or a.shape[-1] != 3:
        raise ShapeError(f"cross: shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _node(np.cross(av, bv), (a, b),
                 lambda g: (np.cross(bv, g), np.cross(g, av)), "cross")


# --------------------------------------------------------------------------- structure


def concat(xs, axis: int = -1) -> Tensor:
    xs = list(xs)
    axis = axis % xs[0].value.ndim
    for x in xs[1:]:
        other = [s for i, s in enumerate(x.shape) if i != axis]
        first = [s for i, s in enumerate(xs[0].shape) if i != axis]
        if other != first:
            raise ShapeError(f"concat: shapes {[t.shape for t in xs]} along axis {axis}")
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _node(np.concatenate([x.value for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def _scatter_rows(n_rows: int, idx: np.ndarray, src: np.ndarray) -> np.ndarray:
    out = np.zeros((n_rows,) + src.shape[1:], dtype=src.dtype)
    flat = out.reshape(n_rows, -1)
    kernels.scatter_add_rows(flat, np.ascontiguousarray(idx, dtype=np.int64),
                             np.ascontiguousarray(src.reshape(len(idx), -1)))
    return out


def gather(x: Tensor, idx) -> Tensor:
    """Rows ``x[idx]`` for an integer index array of any shape."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"gather: index out of range for {n} rows")
    idx = np.where(idx < 0, idx + n, idx)
    flat = idx.ravel()
    tail = x.shape[1:]

    def back(g):
        return (_scatter_rows(n, flat, g.reshape((len(flat),) + tail)),)

    return _node(x.value[idx], (x,), back, "gather")


def scatter_add(src: Tensor, idx, n_rows: int) -> Tensor:
    """Zero array of ``n_rows`` rows with ``src`` rows added at ``idx``."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or len(idx) != src.shape[0]:
        raise ShapeError(f"scatter_add: {idx.shape} indices for source {src.shape}")
    return _node(_scatter_rows(n_rows, idx, src.value), (src,), lambda g: (g[idx],), "scatter_add")


# --------------------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return _node(np.asarray(x.value.sum(axis=axis, keepdims=keepdims)), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.value.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def min_(x: Tensor) -> Tensor:
    """Global minimum; the gradient goes to the first minimal element."""
    k = int(np.argmin(x.value))
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=x.dtype).ravel()
        out[k] = g
        return (out.reshape(shape),)

    return _node(np.asarray(x.value.ravel()[k]), (x,), back, "min")


def masked_max_pool(features: Tensor, gate: Tensor | None = None) -> Tensor:
    """Per-channel max over rows of ``gate * features``; ties go to the lowest row."""
    f = features.value
    if f.ndim != 2:
        raise ShapeError(f"masked_max_pool: features must be (N, C), got {features.shape}")
    if gate is not None and gate.shape != (f.shape[0], 1):
        raise ShapeError(f"masked_max_pool: gate {gate.shape} for features {features.shape}")
    gv = None if gate is None else gate.value
    y = f if gv is None else gv * f
    arg = np.argmax(y, axis=0)
    cols = np.arange(f.shape[1])
    out = y[arg, cols]

    def back(g):
        gf = np.zeros_like(f)
        if gv is None:
            gf[arg, cols] = g
            return (gf,)
        gf[arg, cols] = g * gv[arg, 0]
        gg = np.zeros_like(gv)
        np.add.at(gg[:, 0], arg, g * f[arg, cols])
        return gf, gg

    parents = (features,) if gate is None else (features, gate)
    return _node(out, parents, back, "masked_max_pool")


def group_norm(x: Tensor, group_size: int, eps: float = 1e-5) -> Tensor:
    """Normalize (N, C) features over all rows and ``group_size`` consecutive channels."""
    n, c = x.shape
    if c % group_size:
        raise ShapeError(f"group_norm: {c} channels not divisible by group size {group_size}")
    k = c // group_size
    xv = x.value.reshape(n, k, group_size)
    mu = xv.mean(axis=(0, 2), keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=(0, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    m = n * group_size

    def back(g):
        gh = g.reshape(n, k, group_size)
        s1 = gh.sum(axis=(0, 2), keepdims=True)
        s2 = (gh * xhat).sum(axis=(0, 2), keepdims=True)
        gx = inv * (gh - s1 / m - xhat * s2 / m)
        return (gx.reshape(n, c).astype(x.dtype),)

    return _node(xhat.reshape(n, c).astype(x.dtype), (x,), back, "group_norm")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Unit rows (or a unit vector for 1-D input): ``x / sqrt(|x|^2 + eps)``."""
    xv = x.value
    nrm = np.sqrt((xv * xv).sum(axis=-1, keepdims=True) + eps)
    y = xv / nrm

    def back(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / nrm,)

    return _node(y, (x,), back, "l2_normalize")
