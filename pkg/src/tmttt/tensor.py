"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation in this module works on and returns :class:`Tensor` objects.
When a :class:`Tape` is active and at least one input is already on it, the
operation appends a node holding its vector-Jacobian product; otherwise it is
plain numpy arithmetic.  Parameters become tape leaves only through
:meth:`Tape.watch`.

Nodes are numbered in creation order, so parents always precede children and a
reverse sweep over the node list is a valid topological order.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

from .errors import DimensionError, EmptyParameterError, RankError, TapeError, UnsupportedKernelError

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("kind", "parents", "vjp")

    def __init__(self, kind, parents, vjp):
        self.kind = kind
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; only one worker may use a tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.watched: list[Tensor] = []
        self.bytes_held = 0

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def watch(self, *tensors):
        for t in _flatten(tensors):
            if t._tape is self:
                continue
            self._record("leaf", (), None, t)
            self.watched.append(t)
        return self

    def _record(self, kind, parents, vjp, out):
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append(_Node(kind, parents, vjp))
        self.bytes_held += out.data.nbytes


def _flatten(items):
    for item in items:
        if isinstance(item, Tensor):
            yield item
        else:
            yield from _flatten(item)


class _MacCounter:
    def __init__(self):
        self.total = 0


@contextlib.contextmanager
def count_macs():
    """Count scalar multiplications performed by tensor ops inside the block."""
    counter = _MacCounter()
    prev = getattr(_local, "macs", None)
    _local.macs = counter
    try:
        yield counter
    finally:
        _local.macs = prev


def _add_macs(n):
    counter = getattr(_local, "macs", None)
    if counter is not None:
        counter.total += int(n)


class Tensor:
    """A float64 array, optionally attached to the active gradient tape."""

    __slots__ = ("data", "param", "name", "_tape", "_node")
    __array_priority__ = 100.0
    __array_ufunc__ = None  # make numpy operators defer to the reflected Tensor methods

    def __init__(self, data, param: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.param = param
        self.name = name
        self._tape = None
        self._node = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.param = False
        t.name = None
        t._tape = None
        t._node = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_rank(self.shape)

    def on_tape(self, tape=None):
        tape = tape or active_tape()
        return tape is not None and self._tape is tape

    def __repr__(self):
        tag = " param" if self.param else ""
        return f"Tensor(shape={self.shape}{tag}, data={np.array2string(self.data, precision=4, threshold=8)})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def _raise_rank(shape):
    raise RankError(f"expected a scalar tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _make(out_data, inputs, vjp, kind):
    out = Tensor._wrap(out_data)
    tape = active_tape()
    if tape is not None:
        parents = tuple(t._node if t._tape is tape else -1 for t in inputs)
        if any(p >= 0 for p in parents):
            tape._record(kind, parents, vjp, out)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise arithmetic ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad * bd
    _add_macs(out.size)
    return _make(out, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _make(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if exponent == 2:
        _add_macs(ad.size)
        return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")
    out = ad**exponent
    return _make(out, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def expm1(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.expm1(ad), (a,), lambda g: (g * np.exp(ad),), "expm1")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def maximum(a, floor: float) -> Tensor:
    """Elementwise max against a constant; the gradient flows where ``a > floor``."""
    a = as_tensor(a)
    ad = a.data
    keep = ad > floor
    return _make(np.where(keep, ad, floor), (a,), lambda g: (g * keep,), "maximum")


def detach(a) -> Tensor:
    return Tensor._wrap(as_tensor(a).data)


# activations -----------------------------------------------------------------

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _softplus(x):
    out = np.log1p(np.exp(np.minimum(x, 30.0)))
    return np.where(x > 30.0, x, out)


def _normal_cdf(x):
    return 0.5 * (1.0 + special.erf(x * _INV_SQRT2))


def _normal_pdf(x):
    return _INV_SQRT2PI * np.exp(-0.5 * x * x)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(_softplus(ad), (a,), lambda g: (g * special.expit(ad),), "softplus")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0.0),), "relu")


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    ad = a.data
    out = ad * _normal_cdf(ad)
    return _make(out, (a,), lambda g: (g * (_normal_cdf(ad) + ad * _normal_pdf(ad)),), "gelu")


def gelu_prime(a) -> Tensor:
    """Derivative of :func:`gelu`, itself differentiable (needed inside TTT-MLP inner steps)."""
    a = as_tensor(a)
    ad = a.data
    out = _normal_cdf(ad) + ad * _normal_pdf(ad)
    return _make(out, (a,), lambda g: (g * _normal_pdf(ad) * (2.0 - ad * ad),), "gelu_prime")


_ACTIVATIONS = {"softplus": softplus, "gelu": gelu, "sigmoid": sigmoid, "relu": relu, "tanh": tanh}


def activation(kind: str, x) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


# reductions and shape ops -----------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _make(np.asarray(a.data[idx]), (a,), vjp, "getitem")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
        "concat",
    )


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _make(
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
        "stack",
    )


# linear algebra and convolution ---------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batching over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {ad.shape} and {bd.shape}")
    out = ad @ bd
    _add_macs(out.size * ad.shape[-1])

    tape = active_tape()
    need_a = tape is not None and a._tape is tape
    need_b = tape is not None and b._tape is tape

    def vjp(g):
        return (
            _matmul_grad_left(g, bd, ad.shape) if need_a else None,
            _matmul_grad_right(ad, g, bd.shape) if need_b else None,
        )

    return _make(out, (a, b), vjp, "matmul")


def _matmul_grad_left(g, bd, shape):
    if len(shape) == 2 and bd.ndim > 2 and bd.shape[:-2] == g.shape[:-2]:
        # shared left factor: fold the batch axes into one contraction
        lead = list(range(g.ndim - 2))
        return np.tensordot(g, bd, axes=(lead + [g.ndim - 1], lead + [bd.ndim - 1]))
    return _unbroadcast(g @ np.swapaxes(bd, -1, -2), shape)


def _matmul_grad_right(ad, g, shape):
    if len(shape) == 2 and ad.ndim > 2 and ad.shape[:-2] == g.shape[:-2]:
        k, n = ad.shape[-1], g.shape[-1]
        return ad.reshape(-1, k).T @ g.reshape(-1, n)
    return _unbroadcast(np.swapaxes(ad, -1, -2) @ g, shape)


def conv1d_depthwise_same(x, kernel) -> Tensor:
    """Per-channel 1-D cross-correlation with zero 'same' padding.

    ``x`` has shape (..., C, L) and ``kernel`` shape (C, K) with K odd.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    xd, kd = x.data, kernel.data
    if kd.ndim != 2:
        raise DimensionError(f"kernel must be (C, K), got {kd.shape}")
    c, k = kd.shape
    if k % 2 == 0:
        raise UnsupportedKernelError(f"kernel size must be odd, got {k}")
    if xd.ndim < 2 or xd.shape[-2] != c:
        raise DimensionError(f"conv input {xd.shape} does not match kernel channels {kd.shape}")
    n = xd.shape[-1]
    pad = (k - 1) // 2
    widths = [(0, 0)] * (xd.ndim - 1) + [(pad, pad)]
    xp = np.pad(xd, widths)
    out = kd[:, 0, None] * xp[..., 0:n]
    for j in range(1, k):
        out = out + kd[:, j, None] * xp[..., j : j + n]
    _add_macs(out.size * k)

    def vjp(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kd)
        red = tuple(range(g.ndim - 2)) + (g.ndim - 1,)
        for j in range(k):
            gxp[..., j : j + n] += kd[:, j, None] * g
            gk[:, j] = (g * xp[..., j : j + n]).sum(axis=red)
        return gxp[..., pad : pad + n], gk

    return _make(out, (x, kernel), vjp, "conv1d")


# differentiation ----------------------------------------------------------------

class GradientMap(dict):
    """Maps each watched parameter tensor to its gradient array (same shape)."""

    def flat(self, params: Iterable[Tensor]) -> np.ndarray:
        return np.concatenate([self[p].reshape(-1) for p in params])


def backward(root: Tensor) -> GradientMap:
    """Reverse sweep from a scalar ``root``; returns gradients of every watched leaf."""
    if root.data.size != 1:
        raise RankError(f"backward needs a scalar root, got shape {root.shape}")
    tape = root._tape
    if tape is None or root._node is None:
        raise TapeError("root was not produced under an active tape")
    nodes = tape.nodes
    grads: list = [None] * (root._node + 1)
    grads[root._node] = np.ones_like(root.data)
    for i in range(root._node, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        if node.vjp is None:
            continue
        for p, gp in zip(node.parents, node.vjp(g)):
            if p < 0 or gp is None:
                continue
            grads[p] = gp if grads[p] is None else grads[p] + gp
    out = GradientMap()
    for t in tape.watched:
        g = grads[t._node] if t._tape is tape and t._node < len(grads) else None
        out[t] = np.zeros_like(t.data) if g is None else np.array(np.broadcast_to(g, t.shape))
    return out


def value_and_grad(f: Callable[[], Tensor], params: Sequence[Tensor]):
    with Tape() as tape:
        tape.watch(*params)
        value = f()
    return value, backward(value)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` takes no arguments and must read ``params`` (which are perturbed in
    place).  Error per coordinate is ``|g_ad - g_fd| / (|g_fd| + 1e-8)``.
    """
    params = list(params)
    if not params:
        raise EmptyParameterError("grad_check needs at least one parameter")
    if eps <= 0:
        raise ValueError("eps must be positive")
    _, grads = value_and_grad(f, params)
    worst = 0.0
    for p in params:
        p.data = np.array(p.data, dtype=np.float64)
        flat = p.data.reshape(-1)
        g_ad = grads[p].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            g_fd = (up - down) / (2.0 * eps)
            worst = max(worst, abs(g_ad[i] - g_fd) / (abs(g_fd) + 1e-8))
    return worst
