"""A small define-by-run reverse-mode autodiff engine over float64 numpy arrays.

Every primitive computes its result eagerly and, when any input requires a
gradient, records a :class:`Node` holding a closure for its local
vector-Jacobian product.  :func:`backward` replays the recorded nodes in
reverse execution order.

Broadcasting is deliberately narrow: two operands must either have the same
shape or one shape must be a suffix of the other (leading-axis broadcast).
Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import GradientError, NonFiniteError, ShapeError

_seq_counter = itertools.count()
_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


class Node:
    """One executed primitive on the tape."""

    __slots__ = ("seq", "op", "inputs", "vjp")

    def __init__(self, op: str, inputs: tuple, vjp: Callable):
        self.seq = next(_seq_counter)
        self.op = op
        self.inputs = inputs
        self.vjp = vjp

    def __repr__(self):
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    """A float64 array that may participate in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            label = f"tensor {name!r}" if name else "tensor"
            raise NonFiniteError(f"{label} built from non-finite input")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, requires_grad: bool, node: Node | None) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.node = node
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._result(self.data, False, None)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={list(self.shape)}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def constant(data) -> Tensor:
    """Wrap an internally produced array without the finiteness scan."""
    return Tensor._result(np.asarray(data, dtype=np.float64), False, None)


def _record(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    needs = _grad_enabled.get() and any(t.requires_grad for t in inputs)
    node = Node(op, tuple(inputs), vjp) if needs else None
    return Tensor._result(data, needs, node)


def _check_broadcast(op: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) <= len(b) and b[len(b) - len(a):] == a:
        return b
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return a
    raise ShapeError(op, a, b, detail="only leading-axis broadcast is allowed")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record("mul", ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _record("div", out, (a, b), vjp)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record("log", np.log(xd), (x,), lambda g: (g / xd,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record("softplus", np.logaddexp(0.0, xd), (x,), lambda g: (g * _sigmoid(xd),))


def silu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    s = _sigmoid(xd)
    return _record("silu", xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),))


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``.

    Leading (batch) axes follow the suffix broadcast rule.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    _check_broadcast("matmul", a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record("matmul", ad @ bd, (a, b), vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, shape) from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes, detail="axes must permute all dimensions")
    inv = tuple(np.argsort(axes))
    return _record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swapaxes(x, axis1: int, axis2: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(x, axes)


def expand(x, axis: int, size: int) -> Tensor:
    """Repeat a length-1 axis ``size`` times (explicit, never implicit)."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if x.shape[axis] != 1:
        raise ShapeError("expand", x.shape, (size,), detail=f"axis {axis} must have length 1")
    target = x.shape[:axis] + (size,) + x.shape[axis + 1:]
    out = np.broadcast_to(x.data, target).copy()
    return _record("expand", out, (x,), lambda g: (g.sum(axis=axis, keepdims=True),))


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", (), detail="nothing to concatenate")
    ndim = ts[0].ndim
    axis = axis % ndim
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != ndim or t.shape[:axis] != ref[:axis] or t.shape[axis + 1:] != ref[axis + 1:]:
            raise ShapeError("concat", ref, t.shape, detail=f"along axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record("concat", np.concatenate([t.data for t in ts], axis=axis), ts, vjp)


def slice_(x, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``x[start:stop]`` along one axis."""
    x = as_tensor(x)
    axis = axis % x.ndim
    n = x.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError("slice", x.shape, (start, stop), detail=f"range outside axis {axis} of length {n}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    src = x.shape

    def vjp(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return _record("slice", x.data[index], (x,), vjp)


def reverse(x, axis: int) -> Tensor:
    x = as_tensor(x)
    axis = axis % x.ndim
    return _record("reverse", np.flip(x.data, axis=axis).copy(), (x,), lambda g: (np.flip(g, axis=axis),))


def index_axis(x, axis: int, i: int) -> Tensor:
    """Select position ``i`` of ``axis`` and drop that axis."""
    x = as_tensor(x)
    axis = axis % x.ndim
    part = slice_(x, axis, i, i + 1)
    return reshape(part, x.shape[:axis] + x.shape[axis + 1:])


# ---------------------------------------------------------------------------
# reductions and normalizers


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    src = x.shape

    def vjp(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _record("sum", np.sum(x.data, axis=axes), (x,), vjp)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis), 1.0 / count)


def min_(x, axis=None) -> Tensor:
    """Hard minimum; the gradient goes to the first minimizing entry only."""
    x = as_tensor(x)
    xd = x.data
    if axis is None:
        flat = int(np.argmin(xd))
        src = xd.shape

        def vjp_all(g):
            full = np.zeros(src)
            full.flat[flat] = g
            return (full,)

        return _record("min", xd.flat[flat].copy(), (x,), vjp_all)
    axis = axis % xd.ndim
    idx = np.expand_dims(np.argmin(xd, axis=axis), axis)
    out = np.take_along_axis(xd, idx, axis=axis).squeeze(axis)

    def vjp(g):
        full = np.zeros(xd.shape)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _record("min", out, (x,), vjp)


def softmax(x, axis: int) -> Tensor:
    x = as_tensor(x)
    axis = axis % x.ndim
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", y, (x,), vjp)


def weighted_sum(xs: Sequence, w) -> Tensor:
    """``sum_i w[i] * xs[i]`` with a learnable weight vector ``w``."""
    xs = [as_tensor(t) for t in xs]
    w = as_tensor(w)
    if w.shape != (len(xs),):
        raise ShapeError("weighted_sum", w.shape, (len(xs),), detail="one weight per term")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.shape != ref:
            raise ShapeError("weighted_sum", ref, t.shape)
    stack = np.stack([t.data for t in xs])
    wd = w.data
    out = np.tensordot(wd, stack, axes=(0, 0))

    def vjp(g):
        gw = np.tensordot(stack, g, axes=(tuple(range(1, stack.ndim)), tuple(range(g.ndim))))
        return tuple(wd[i] * g for i in range(len(xs))) + (gw,)

    return _record("weighted_sum", out, (*xs, w), vjp)


def mse(a, b) -> Tensor:
    """Mean of squared differences over all entries."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    diff = a.data - b.data
    n = diff.size

    def vjp(g):
        ga = (2.0 / n) * g * diff
        return ga, -ga

    return _record("mse", np.mean(diff * diff), (a, b), vjp)


# ---------------------------------------------------------------------------
# sequence primitive


def causal_conv(x, weight, bias) -> Tensor:
    """Causal depthwise convolution along axis -2.

    ``x`` is ``[..., L, E]``, ``weight`` is ``[E, K]`` where tap ``K-1`` multiplies
    the current step and tap ``K-1-j`` the step ``j`` positions back; ``bias`` is
    ``[E]``.  Missing history is zero.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim < 2 or weight.ndim != 2 or weight.shape[0] != x.shape[-1] or bias.shape != (x.shape[-1],):
        raise ShapeError("causal_conv", x.shape, weight.shape, bias.shape)
    xd, wd = x.data, weight.data
    L, K = xd.shape[-2], wd.shape[1]
    pad = [(0, 0)] * (xd.ndim - 2) + [(K - 1, 0), (0, 0)]
    xp = np.pad(xd, pad)
    out = np.broadcast_to(bias.data, xd.shape).copy()
    for k in range(K):
        out += xp[..., k:k + L, :] * wd[:, k]

    def vjp(g):
        gxp = np.zeros(xp.shape)
        gw = np.empty(wd.shape)
        lead = tuple(range(xd.ndim - 1))
        for k in range(K):
            gxp[..., k:k + L, :] += g * wd[:, k]
            gw[:, k] = np.sum(g * xp[..., k:k + L, :], axis=lead)
        gb = np.sum(g, axis=lead)
        return gxp[..., K - 1:, :], gw, gb

    return _record("causal_conv", out, (x, weight, bias), vjp)


# ---------------------------------------------------------------------------
# tape traversal


@dataclass
class Tape:
    """Recorded primitives reachable from an output, in execution order."""

    nodes: list
    outputs: dict  # node.seq -> tensor produced by that node

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        outputs = {}
        stack = [output]
        seen = set()
        while stack:
            t = stack.pop()
            if t.node is None or id(t) in seen:
                continue
            seen.add(id(t))
            outputs[t.node.seq] = t
            stack.extend(i for i in t.node.inputs if i.requires_grad)
        order = sorted(outputs)
        return cls([outputs[s].node for s in order], outputs)


def backward(output: Tensor) -> Tape:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every leaf that requires grad.

    Repeated calls without resetting ``grad`` accumulate.  Returns the tape that
    was traversed.
    """
    if output.shape != ():
        raise GradientError(f"backward needs a scalar output, got shape {list(output.shape)}")
    if not output.requires_grad:
        raise GradientError("output does not depend on any tensor that requires grad")
    tape = Tape.from_output(output)
    pending = {id(output): np.ones(())}
    for node in reversed(tape.nodes):
        t = tape.outputs[node.seq]
        g = pending.pop(id(t), None)
        if g is None:
            continue
        grads = node.vjp(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                gi = np.asarray(gi, dtype=np.float64).reshape(inp.shape)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
    return tape


def zero_grad(params):
    for p in params:
        p.grad = None


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    The error of one entry is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    ``f`` must rebuild its graph on every call.
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    params = list(params)
    if not params:
        return 0.0
    zero_grad(params)
    backward(f())
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for pi, p in enumerate(params):
            flat = p.data.reshape(-1)
            ga = analytic[pi].reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                fp = float(f().data)
                flat[j] = orig - eps
                fm = float(f().data)
                flat[j] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    label = p.name or f"param[{pi}]"
                    raise NonFiniteError(f"non-finite objective while perturbing {label} entry {j}")
                num = (fp - fm) / (2.0 * eps)
                err = abs(ga[j] - num) / max(1.0, abs(ga[j]), abs(num))
                worst = max(worst, err)
    zero_grad(params)
    return worst


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "silu": silu,
    "softmax": softmax,
    "concat": lambda *xs, axis: concat(xs, axis),
    "slice": slice_,
    "reverse": reverse,
    "reshape": reshape,
    "transpose": transpose,
    "expand": expand,
    "weighted_sum": lambda *xs, w: weighted_sum(xs, w),
    "mse": mse,
    "sum": sum_,
    "mean": mean,
    "min": min_,
    "causal_conv": causal_conv,
}


def apply_primitive(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise KeyError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)
