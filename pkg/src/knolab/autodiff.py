"""Dense-tensor engine with reverse-mode differentiation.

Only the primitives the Koopman operator models need are provided. Tensors
wrap numpy arrays; every op records a node holding a closure that maps the
output gradient to input gradients.

Complex tensors follow one convention throughout: the stored gradient of a
complex node ``z`` is ``dL/dRe(z) + 1j * dL/dIm(z)``. With that convention a
complex-linear map ``y = A z`` back-propagates as ``g_z = A^H g_y`` and real
operands simply keep the real part, so real and imaginary parts are handled
as a pair of real-valued accumulators packed into one array.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "AutodiffError",
    "ShapeError",
    "GraphConsumedError",
    "Tensor",
    "Parameter",
    "as_tensor",
    "matmul",
    "conv1d",
    "conv2d",
    "conv",
    "add",
    "sub",
    "mul",
    "scale",
    "tanh",
    "leaky_relu",
    "gelu",
    "reshape",
    "permute",
    "complex_mul",
    "real",
    "imag",
    "make_complex",
    "reduce_sum",
    "norm",
    "abs_sum",
    "take",
    "concat",
    "forward_op",
    "backward",
    "grad_check",
]


class AutodiffError(Exception):
    """Base class for engine errors."""


class ShapeError(AutodiffError, ValueError):
    """Input shapes violate an op's shape rule."""

    def __init__(self, op: str, message: str, dims=None):
        self.op = op
        self.dims = dims
        super().__init__(f"{op}: {message}" + (f" (dims: {dims})" if dims is not None else ""))


class GraphConsumedError(AutodiffError, RuntimeError):
    """Backward was requested through a graph that was already traversed."""


class Tensor:
    """A node in the compute graph.

    ``data`` is a float64 or complex128 array. Leaf tensors created directly
    are constants unless ``requires_grad`` is set.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.asarray(data)
        if np.iscomplexobj(arr):
            arr = arr.astype(np.complex128, copy=False)
        else:
            arr = arr.astype(np.float64, copy=False)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = tuple(_parents)
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        kind = "complex128" if self.is_complex else "float64"
        return f"Tensor(shape={self.shape}, dtype={kind}, op={self.op!r})"

    def backward(self) -> None:
        backward(self)

    __add__ = lambda self, other: add(self, other)
    __sub__ = lambda self, other: sub(self, other)
    __matmul__ = lambda self, other: matmul(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """A trainable real tensor with a name and a gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, value, name: str = ""):
        value = np.array(value, dtype=np.float64)
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


def _fit(g: np.ndarray, like: Tensor) -> np.ndarray:
    # real operands receive only the real part of a complex cotangent
    if np.iscomplexobj(g) and not like.is_complex:
        return g.real
    return g


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., k) and ``b`` of shape (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1:
        raise ShapeError("matmul", "right operand must be 2-D", (a.shape, b.shape))
    if a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", "inner dimensions differ", (a.shape, b.shape))
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.conj(b.data).T
        a2 = a.data.reshape(-1, a.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gb = np.conj(a2).T @ g2
        return _fit(ga, a), _fit(gb, b)

    return _node(out, (a, b), bw, "matmul")


def _pad(x: np.ndarray, pads: Sequence[int], mode: str) -> np.ndarray:
    width = [(0, 0)] + [(p, p) for p in pads] + [(0, 0)]
    if mode == "circular":
        return np.pad(x, width, mode="wrap")
    return np.pad(x, width)


def _unpad(g: np.ndarray, pads: Sequence[int], sizes: Sequence[int], mode: str) -> np.ndarray:
    for ax, (p, n) in enumerate(zip(pads, sizes), start=1):
        if p == 0:
            continue
        core = np.take(g, np.arange(p, p + n), axis=ax).copy()
        if mode == "circular":
            lead = np.take(g, np.arange(0, p), axis=ax)
            tail = np.take(g, np.arange(p + n, 2 * p + n), axis=ax)
            idx_lead = [slice(None)] * g.ndim
            idx_lead[ax] = slice(n - p, n)
            core[tuple(idx_lead)] += lead
            idx_tail = [slice(None)] * g.ndim
            idx_tail[ax] = slice(0, p)
            core[tuple(idx_tail)] += tail
        g = core
    return g


def conv(x, w, padding: int | Sequence[int] = 0, mode: str = "zeros") -> Tensor:
    """Stride-1 convolution over the spatial axes of a channel-last tensor.

    ``x`` has shape (B, *spatial, Cin) and ``w`` has shape (*kernel, Cin, Cout).
    ``mode`` is ``"zeros"`` or ``"circular"`` (periodic wrap).
    """
    x, w = as_tensor(x), as_tensor(w)
    nsp = w.ndim - 2
    name = f"conv{nsp}d"
    if nsp < 1 or x.ndim != nsp + 2:
        raise ShapeError(name, f"expected input rank {nsp + 2}", (x.shape, w.shape))
    if x.shape[-1] != w.shape[-2]:
        raise ShapeError(name, "input channels do not match kernel", (x.shape, w.shape))
    if mode not in ("zeros", "circular"):
        raise ValueError(f"{name}: unknown padding mode {mode!r}")
    pads = (padding,) * nsp if np.isscalar(padding) else tuple(padding)
    sizes = x.shape[1:-1]
    kernel = w.shape[:nsp]
    if mode == "circular" and any(p > n for p, n in zip(pads, sizes)):
        raise ShapeError(name, "circular padding wider than the field", (x.shape, pads))
    xp = _pad(x.data, pads, mode)
    out_sizes = tuple(n + 2 * p - k + 1 for n, p, k in zip(sizes, pads, kernel))
    if any(s < 1 for s in out_sizes):
        raise ShapeError(name, "kernel larger than padded input", (x.shape, w.shape))
    offsets = list(itertools.product(*(range(k) for k in kernel)))

    def window(arr, off):
        sl = (slice(None),) + tuple(slice(o, o + s) for o, s in zip(off, out_sizes)) + (slice(None),)
        return sl

    dtype = np.result_type(x.data, w.data)
    out = np.zeros((x.shape[0],) + out_sizes + (w.shape[-1],), dtype=dtype)
    for off in offsets:
        out += xp[window(xp, off)] @ w.data[off]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=np.result_type(g, w.data))
        gw = np.zeros(w.shape, dtype=np.result_type(g, xp))
        g2 = g.reshape(-1, g.shape[-1])
        cin = x.shape[-1]
        for off in offsets:
            sl = window(xp, off)
            gw[off] = np.conj(xp[sl].reshape(-1, cin)).T @ g2
            gxp[sl] += g @ np.conj(w.data[off]).T
        gx = _unpad(gxp, pads, sizes, mode)
        return _fit(gx, x), _fit(gw, w)

    return _node(out, (x, w), bw, name)


def conv1d(x, w, padding: int = 0, mode: str = "zeros") -> Tensor:
    if as_tensor(w).ndim != 3:
        raise ShapeError("conv1d", "kernel must have shape (K, Cin, Cout)", as_tensor(w).shape)
    return conv(x, w, padding, mode)


def conv2d(x, w, padding: int | Sequence[int] = 0, mode: str = "zeros") -> Tensor:
    if as_tensor(w).ndim != 4:
        raise ShapeError("conv2d", "kernel must have shape (Kh, Kw, Cin, Cout)", as_tensor(w).shape)
    return conv(x, w, padding, mode)


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may match only the trailing axes of ``a`` (bias)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
            raise ShapeError("add", "operands must match or the second must be a trailing bias", (a.shape, b.shape))
    out = a.data + b.data
    lead = tuple(range(a.ndim - b.ndim))

    def bw(g):
        gb = g.sum(axis=lead) if lead else g
        return _fit(g, a), _fit(gb, b)

    return _node(out, (a, b), bw, "add")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a, b) -> Tensor:
    """Elementwise product of two equally shaped real tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", "shapes differ", (a.shape, b.shape))
    if a.is_complex or b.is_complex:
        return complex_mul(a, b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def complex_mul(a, b) -> Tensor:
    """Elementwise product where either operand may be complex."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("complex_mul", "shapes differ", (a.shape, b.shape))
    out = a.data * b.data

    def bw(g):
        return _fit(g * np.conj(b.data), a), _fit(g * np.conj(a.data), b)

    return _node(out, (a, b), bw, "complex_mul")


def _real_only(op: str, a: Tensor) -> None:
    if a.is_complex:
        raise ShapeError(op, "expects a real tensor; split complex inputs with real()/imag()", a.shape)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    _real_only("tanh", a)
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    _real_only("leaky_relu", a)
    d = np.where(a.data > 0, 1.0, slope)
    return _node(a.data * d, (a,), lambda g: (g * d,), "leaky_relu")


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    a = as_tensor(a)
    _real_only("gelu", a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    y = x * cdf

    def bw(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return _node(y, (a,), bw, "gelu")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape to {tuple(shape)}", a.shape) from None
    src = a.shape
    return _node(out, (a,), lambda g: (g.reshape(src),), "reshape")


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("permute", f"invalid axes {axes}", a.shape)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "permute")


def real(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.real.copy(), (a,), lambda g: (g.astype(np.complex128) if a.is_complex else g,), "real")


def imag(a) -> Tensor:
    a = as_tensor(a)
    if not a.is_complex:
        raise ShapeError("imag", "expects a complex tensor", a.shape)
    return _node(a.data.imag.copy(), (a,), lambda g: (1j * g,), "imag")


def make_complex(re, im) -> Tensor:
    re, im = as_tensor(re), as_tensor(im)
    if re.shape != im.shape:
        raise ShapeError("make_complex", "real and imaginary parts differ in shape", (re.shape, im.shape))
    _real_only("make_complex", re)
    _real_only("make_complex", im)
    return _node(re.data + 1j * im.data, (re, im), lambda g: (g.real, g.imag), "make_complex")


def reduce_sum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis)
    src = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _node(out, (a,), bw, "reduce_sum")


def norm(a, axes=None) -> Tensor:
    """Frobenius norm over ``axes`` (all axes when None).

    The subgradient at zero is taken as zero.
    """
    a = as_tensor(a)
    _real_only("norm", a)
    keep = np.sqrt(np.sum(a.data * a.data, axis=axes, keepdims=True))
    out = keep.reshape(()) if axes is None else np.squeeze(keep, axis=axes)

    def bw(g):
        safe = np.where(keep > 0, keep, 1.0)
        gk = g.reshape(()) if axes is None else np.expand_dims(g, axes)
        return (np.where(keep > 0, a.data / safe, 0.0) * gk,)

    return _node(out, (a,), bw, "norm")


def abs_sum(a) -> Tensor:
    a = as_tensor(a)
    _real_only("abs_sum", a)
    sign = np.sign(a.data)
    return _node(np.abs(a.data).sum(), (a,), lambda g: (g * sign,), "abs_sum")


def take(a, start: int, stop: int) -> Tensor:
    """Slice ``[start:stop]`` of the last axis."""
    a = as_tensor(a)
    n = a.shape[-1]
    if not (0 <= start < stop <= n):
        raise ShapeError("take", f"slice [{start}:{stop}] outside last axis of size {n}", a.shape)
    src = a.shape

    def bw(g):
        full = np.zeros(src, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _node(a.data[..., start:stop].copy(), (a,), bw, "take")


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", "incompatible shapes", [t.shape for t in ts]) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(_fit(p, t) for p, t in zip(np.split(g, bounds, axis=axis), ts))

    return _node(out, tuple(ts), bw, "concat")


_OPS = {
    "matmul": matmul,
    "conv1d": conv1d,
    "conv2d": conv2d,
    "add": add,
    "scale": scale,
    "tanh": tanh,
    "leaky_relu": leaky_relu,
    "gelu": gelu,
    "reshape": reshape,
    "complex_mul": complex_mul,
    "reduce_sum": reduce_sum,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {sorted(_OPS)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward pass


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every Parameter reachable from ``loss``.

    Parameter gradients are reset to zero first. The graph's closures are
    released afterwards; a second traversal raises GraphConsumedError.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError("backward", "loss must be a scalar", loss.shape)
    if loss.is_complex:
        raise ShapeError("backward", "loss must be real", loss.shape)
    if loss._consumed:
        raise GraphConsumedError("backward: graph already consumed")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    for node in order:
        if node._consumed:
            raise GraphConsumedError(f"backward: node {node.op!r} belongs to a consumed graph")
        if isinstance(node, Parameter):
            node.zero_grad()
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if isinstance(node, Parameter):
            if g is not None:
                node.grad = node.grad + g
            continue
        if node._backward is None or g is None:
            continue
        contribs = node._backward(g)
        for parent, pg in zip(node._parents, contribs):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
        node._backward = None
        node._consumed = True
    loss._consumed = True


def grad_check(fn: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-6) -> float:
    """Max relative deviation between analytic and central-difference gradients.

    ``fn`` rebuilds the graph from the current parameter values and returns a
    scalar loss. The deviation is |analytic - numeric| / max(1, |numeric|).
    """
    params = list(params)
    if not params:
        return 0.0
    loss = fn()
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("grad_check: loss is not finite")
    backward(loss)
    worst = 0.0
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise FloatingPointError(f"grad_check: parameter {p.name!r} is not finite")
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data)
            flat[i] = orig - h
            down = float(fn().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"grad_check: non-finite loss perturbing {p.name!r}")
            dev = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, dev)
    return worst
