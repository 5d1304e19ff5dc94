"""Dense array arithmetic with a recorded tape and reverse-mode gradients.

Values wrap numpy arrays. Operations execute eagerly; when a Tape is active
and any input is attached, the op is recorded so `backward` can replay it in
reverse. Training runs in float32; float64 exists for gradient checking.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to a primitive's rule."""


class Node:
    """One recorded primitive application on a tape."""

    __slots__ = ("name", "inputs", "out", "bwd", "release_hook")

    def __init__(self, name, inputs, out, bwd, release_hook=None):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.bwd = bwd
        self.release_hook = release_hook

    def release(self):
        if self.release_hook is not None:
            self.release_hook()
            self.release_hook = None
        self.bwd = None


_ACTIVE_TAPES: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class Tape:
    """Ordered record of primitive applications; insertion order is the
    topological order replayed in reverse by backward()."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.pop()
        return False

    def record(self, node: Node):
        self.nodes.append(node)

    def backward(self, seeds: dict["Value", np.ndarray]):
        """Propagate gradients from the seeded values to every attached Value.

        Gradients accumulate additively; a Value used twice receives the sum
        of both contributions.
        """
        for v, g in seeds.items():
            g = np.asarray(g, dtype=v.data.dtype)
            if g.shape != v.data.shape:
                raise ShapeError(
                    f"backward seed: shape {g.shape} does not match value shape {v.data.shape}"
                )
            v._accumulate(g)
        for node in reversed(self.nodes):
            gout = node.out.grad
            if gout is None or node.bwd is None:
                node.release()
                continue
            gins = node.bwd(gout)
            for inp, gin in zip(node.inputs, gins):
                if gin is None:
                    continue
                if inp.attached:
                    inp._accumulate(gin)
            node.release()


class Value:
    """A dense float array, optionally attached to the active tape.

    A Value is attached when it is an explicitly watched leaf or the output
    of a recorded op. Detached Values never receive gradient.
    """

    __slots__ = ("data", "grad", "node", "watched")

    def __init__(self, data, dtype=None, watch: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.watched = bool(watch)

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def attached(self) -> bool:
        return self.watched or self.node is not None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Value":
        return Value(self.data)

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        if self.data.shape != ():
            raise ShapeError(
                f"backward: loss must be scalar, got shape {self.data.shape}"
            )
        tape = active_tape()
        if tape is None:
            raise RuntimeError("backward: no active tape")
        tape.backward({self: np.ones((), dtype=self.data.dtype)})

    def __repr__(self):
        return f"Value(shape={self.data.shape}, dtype={self.data.dtype}, attached={self.attached})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_value(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_value(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_value(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_value(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take_slice(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sigmoid(self):
        return sigmoid(self)

    def gelu(self):
        return gelu(self)

    def softmax(self):
        return softmax(self)


def _as_value(x, dtype) -> Value:
    if isinstance(x, Value):
        return x
    return Value(np.asarray(x, dtype=dtype))


def _record(name: str, inputs: Sequence[Value], out_data: np.ndarray,
            bwd: Callable, release_hook=None) -> Value:
    out = Value(out_data)
    tape = active_tape()
    if tape is not None and any(v.attached for v in inputs):
        out.node = Node(name, tuple(inputs), out, bwd, release_hook)
        tape.record(out.node)
    elif release_hook is not None:
        release_hook()
    return out


# -- broadcasting (leading-dimension expansion and scalars only) -----------

def _check_binary(name: str, a: Value, b: Value):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or sa == () or sb == ():
        return
    # one shape must be a trailing suffix of the other
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    raise ShapeError(f"{name}: shapes {sa} and {sb} do not conform "
                     "(equal, scalar, or leading-dimension expansion only)")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    n_lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(n_lead)))


def _binary(name, fa, fb):
    def op(a, b):
        if not isinstance(a, Value):
            a = _as_value(a, b.dtype)
        if not isinstance(b, Value):
            b = _as_value(b, a.dtype)
        _check_binary(name, a, b)
        out = {
            "add": lambda: a.data + b.data,
            "sub": lambda: a.data - b.data,
            "mul": lambda: a.data * b.data,
            "div": lambda: a.data / b.data,
        }[name]()

        def bwd(g):
            return (_unbroadcast(fa(g, a.data, b.data), a.data.shape),
                    _unbroadcast(fb(g, a.data, b.data), b.data.shape))

        return _record(name, (a, b), out, bwd)

    op.__name__ = name
    return op


add = _binary("add", lambda g, a, b: g, lambda g, a, b: g)
sub = _binary("sub", lambda g, a, b: g, lambda g, a, b: -g)
mul = _binary("mul", lambda g, a, b: g * b, lambda g, a, b: g * a)
div = _binary("div", lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b))


def neg(a: Value) -> Value:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def power(a: Value, p) -> Value:
    p = float(p)
    out = a.data ** p

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),)

    return _record("pow", (a,), out, bwd)


def matmul(a: Value, b: Value) -> Value:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must have rank >= 2, "
                         f"got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} "
                         "have mismatched contraction axes")
    if a.data.ndim != b.data.ndim and min(a.data.ndim, b.data.ndim) != 2:
        raise ShapeError(f"matmul: leading dims of {a.data.shape} and "
                         f"{b.data.shape} must match (no batch broadcasting)")
    if a.data.ndim == b.data.ndim and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul: leading dims of {a.data.shape} and "
                         f"{b.data.shape} must match (no batch broadcasting)")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast_matmul(ga, a.data.shape),
                _unbroadcast_matmul(gb, b.data.shape))

    return _record("matmul", (a, b), out, bwd)


def _unbroadcast_matmul(g, shape):
    if g.shape == shape:
        return g
    return g.sum(axis=tuple(range(g.ndim - len(shape))))


def reshape(a: Value, shape) -> Value:
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}") from e
    old = a.data.shape
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),))


def transpose(a: Value, axes=None) -> Value:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = np.transpose(a.data, axes)
    return _record("transpose", (a,), out,
                   lambda g: (np.transpose(g, inv),))


def concat(values: Sequence[Value], axis: int = 0) -> Value:
    values = [v if isinstance(v, Value) else Value(v) for v in values]
    if not values:
        raise ShapeError("concat: empty input list")
    out = np.concatenate([v.data for v in values], axis=axis)
    sizes = [v.data.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tuple(values), out, bwd)


def take_slice(a: Value, key) -> Value:
    out = a.data[key]
    shape = a.data.shape
    dtype = a.data.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        full[key] = g
        return (full,)

    return _record("slice", (a,), out, bwd)


def reduce_sum(a: Value, axis=None, keepdims=False) -> Value:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (a,), out, bwd)


def reduce_mean(a: Value, axis=None, keepdims=False) -> Value:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    denom = a.data.size if axis is None else np.prod(
        [shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))])

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / denom, shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / denom, shape).copy(),)

    return _record("mean", (a,), out, bwd)


def exp(a: Value) -> Value:
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a: Value) -> Value:
    return _record("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a: Value) -> Value:
    out = np.sqrt(a.data)
    return _record("sqrt", (a,), out, lambda g: (0.5 * g / out,))


def sigmoid(a: Value) -> Value:
    out = expit(a.data)
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def gelu(a: Value) -> Value:
    """Tanh-approximation GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record("gelu", (a,), out, bwd)


def clip(a: Value, lo: float, hi: float) -> Value:
    out = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)
    return _record("clip", (a,), out, lambda g: (g * mask,))


def softplus(a: Value) -> Value:
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _record("softplus", (a,), out, lambda g: (g * expit(x),))


def softmax(a: Value) -> Value:
    """Softmax over the last axis."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", (a,), out, bwd)


def layer_norm(a: Value, gain: Value, bias: Value, eps: float = 1e-5) -> Value:
    """Normalize over the last axis, then affine by gain and bias."""
    if gain.data.shape != a.data.shape[-1:] or bias.data.shape != a.data.shape[-1:]:
        raise ShapeError(f"layernorm: gain/bias shapes {gain.data.shape}/"
                         f"{bias.data.shape} do not match last axis of {a.data.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return (dx, dgain, dbias)

    return _record("layernorm", (a, gain, bias), out, bwd)


def l2_normalize(a: Value, eps: float = 1e-12) -> Value:
    """Scale vectors along the last axis to unit L2 norm."""
    x = a.data
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)
    out = x / n

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * dot) / n,)

    return _record("l2norm", (a,), out, bwd)


def patches(a: Value, kernel: int, stride: int) -> Value:
    """Extract kernel x kernel patches with the given stride from a
    (B, H, W, C) array, flattened to (B, Ho, Wo, kernel*kernel*C)."""
    if a.data.ndim != 4:
        raise ShapeError(f"patches: expected rank-4 (B,H,W,C), got {a.data.shape}")
    b, h, w, c = a.data.shape
    k, s = kernel, stride
    if (h - k) % s != 0 or (w - k) % s != 0 or h < k or w < k:
        raise ShapeError(f"patches: grid {h}x{w} incompatible with "
                         f"kernel {k} stride {s}")
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    sw = np.lib.stride_tricks.sliding_window_view(a.data, (k, k), axis=(1, 2))
    sw = sw[:, ::s, ::s]                      # (B, Ho, Wo, C, k, k)
    out = np.ascontiguousarray(sw.transpose(0, 1, 2, 4, 5, 3)).reshape(
        b, ho, wo, k * k * c)

    def bwd(g):
        g = g.reshape(b, ho, wo, k, k, c)
        full = np.zeros((b, h, w, c), dtype=a.data.dtype)
        for di in range(k):
            for dj in range(k):
                full[:, di:di + ho * s:s, dj:dj + wo * s:s, :] += g[:, :, :, di, dj, :]
        return (full,)

    return _record("patches", (a,), out, bwd)


def pad2d(a: Value, top: int, bottom: int, left: int | None = None,
          right: int | None = None) -> Value:
    """Zero-pad the two spatial axes of a (B, H, W, C) array; horizontal
    padding defaults to the vertical amounts."""
    if a.data.ndim != 4:
        raise ShapeError(f"pad2d: expected rank-4 (B,H,W,C), got {a.data.shape}")
    left = top if left is None else left
    right = bottom if right is None else right
    out = np.pad(a.data, ((0, 0), (top, bottom), (left, right), (0, 0)))
    h, w = a.data.shape[1], a.data.shape[2]

    def bwd(g):
        return (g[:, top:top + h, left:left + w, :],)

    return _record("pad2d", (a,), out, bwd)


def roll(a: Value, shift: int, axis: int = 0) -> Value:
    out = np.roll(a.data, shift, axis=axis)
    return _record("roll", (a,), out,
                   lambda g: (np.roll(g, -shift, axis=axis),))


def repeat(a: Value, reps: int, axis: int) -> Value:
    out = np.repeat(a.data, reps, axis=axis)
    shape = a.data.shape

    def bwd(g):
        g = g.reshape(shape[:axis] + (shape[axis], reps) + shape[axis + 1:])
        return (g.sum(axis=axis + 1),)

    return _record("repeat", (a,), out, bwd)


def gather(a: Value, index, axis: int = 0) -> Value:
    index = np.asarray(index)
    out = np.take(a.data, index, axis=axis)
    shape = a.data.shape
    dtype = a.data.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(
            g, tuple(range(axis, axis + index.ndim)), tuple(range(index.ndim))))
        return (full,)

    return _record("gather", (a,), out, bwd)


def scatter_add(a: Value, index, size: int, axis: int = 0) -> Value:
    """Sum rows of `a` into a new array of extent `size` along `axis`,
    indexed by `index` (the adjoint of gather)."""
    index = np.asarray(index)
    if index.shape != (a.data.shape[axis],):
        raise ShapeError(f"scatter_add: index shape {index.shape} does not "
                         f"match axis extent {a.data.shape[axis]}")
    out_shape = a.data.shape[:axis] + (size,) + a.data.shape[axis + 1:]
    out = np.zeros(out_shape, dtype=a.data.dtype)
    np.add.at(np.moveaxis(out, axis, 0), index, np.moveaxis(a.data, axis, 0))

    def bwd(g):
        return (np.take(g, index, axis=axis),)

    return _record("scatter_add", (a,), out, bwd)


def cast(a: Value, dtype) -> Value:
    dtype = np.dtype(dtype)
    src = a.data.dtype
    return _record("cast", (a,), a.data.astype(dtype),
                   lambda g: (g.astype(src),))


# -- generic entry point ----------------------------------------------------

_PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "pow": power,
    "matmul": matmul, "reshape": reshape, "transpose": transpose,
    "concat": concat, "slice": take_slice, "sum": reduce_sum,
    "mean": reduce_mean, "exp": exp, "log": log, "sqrt": sqrt,
    "sigmoid": sigmoid, "gelu": gelu, "softmax": softmax,
    "layernorm": layer_norm, "l2norm": l2_normalize, "patches": patches,
    "pad2d": pad2d, "roll": roll, "repeat": repeat, "gather": gather,
    "scatter_add": scatter_add, "clip": clip, "softplus": softplus,
    "cast": cast,
}


def apply(op: str, *inputs, **attrs) -> Value:
    """Apply a primitive by name. Unknown names are rejected."""
    if op not in _PRIMITIVES:
        raise KeyError(f"unknown primitive {op!r}; "
                       f"known: {sorted(_PRIMITIVES)}")
    if op == "concat":
        return concat(inputs[0] if len(inputs) == 1 else list(inputs), **attrs)
    return _PRIMITIVES[op](*inputs, **attrs)


def grad_check(f: Callable[[Value], Value], x: Value, eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of f at x and
    central finite differences, per coordinate.

    f must map a Value to a scalar Value and be deterministic. Error is
    |analytic - numeric| / max(1, |numeric|), maximized over coordinates.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    with Tape():
        xw = Value(x.data.copy(), watch=True)
        loss = f(xw)
        if loss.data.shape != ():
            raise ShapeError(f"grad_check: f must return a scalar, "
                             f"got shape {loss.data.shape}")
        loss.backward()
        analytic = (xw.grad if xw.grad is not None
                    else np.zeros_like(x.data)).ravel()

    flat = x.data.ravel()
    worst = 0.0
    for i in range(flat.size):
        for sign, store in ((+1, "hi"), (-1, "lo")):
            pert = flat.copy()
            pert[i] += sign * eps
            out = f(Value(pert.reshape(x.data.shape))).item()
            if not math.isfinite(out):
                raise FloatingPointError(
                    f"grad_check: non-finite output at coordinate {i}")
            if sign > 0:
                hi = out
            else:
                lo = out
        numeric = (hi - lo) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
