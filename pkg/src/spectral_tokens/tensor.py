"""Dense float64 tensors with a minimal reverse-mode tape.

A :class:`Tensor` is an immutable wrapper around a read-only ``numpy`` array.
Operations executed while a :class:`GradTape` is active, and that touch at
least one tensor with ``requires_grad=True``, are recorded together with a
backward rule. ``GradTape.gradient`` replays the record in reverse.

Frozen tensors (``requires_grad=False``) never receive a gradient buffer: the
backward rules are told which inputs need gradients and skip the rest.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "record_op",
    "record_multi",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "exp",
    "log",
    "sqrt",
    "sin",
    "cos",
    "atan2",
    "nonlinearity",
    "affine",
    "matmul",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "softmax_rows",
    "log_softmax",
    "bilinear_map",
    "depthwise_conv3x3",
    "wrap_phase",
    "gradcheck",
]

GELU_GATE = 1.702


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class Tensor:
    """Immutable dense array of 64-bit floats."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if any(n <= 0 for n in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.flags.writeable and arr.base is not None:
            arr = arr.view()
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

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
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def trainable(self) -> "Tensor":
        return Tensor._wrap(self.data, True)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape


class _Record:
    __slots__ = ("inputs", "outputs", "backward")

    def __init__(self, inputs, outputs, backward):
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward


_ACTIVE: list["GradTape"] = []


class GradTape:
    """Ordered record of primitive ops executed inside a ``with`` block.

    One tape per training step; tapes are not thread-safe.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "GradTape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``target`` with respect to each of ``sources``.

        Sources that do not influence the target get a zero array.
        """
        if target.size != 1:
            raise ShapeError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones(target.shape)}
        for rec in reversed(self.records):
            gs = [grads.pop(id(o), None) for o in rec.outputs]
            if all(g is None for g in gs):
                continue
            need = tuple(t.requires_grad for t in rec.inputs)
            if len(gs) == 1:
                parts = rec.backward(gs[0], need)
            else:
                gs = [np.zeros(o.shape) if g is None else g for g, o in zip(gs, rec.outputs)]
                parts = rec.backward(gs, need)
            for t, n, gi in zip(rec.inputs, need, parts):
                if not n or gi is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(s), np.zeros(s.shape)) for s in sources]


def record_op(out: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    """Wrap ``out`` as the result of a primitive with the given backward rule.

    ``backward(g, need)`` receives the upstream gradient and a tuple of flags
    saying which inputs require a gradient; it returns one array (or None)
    per input.
    """
    tape = _ACTIVE[-1] if _ACTIVE else None
    track = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, track)
    if track:
        tape.records.append(_Record(inputs, (result,), backward))
    return result


def record_multi(outs: Sequence[np.ndarray], inputs: tuple, backward: Callable) -> tuple[Tensor, ...]:
    """Like :func:`record_op` for a primitive with several outputs.

    ``backward(gs, need)`` gets one upstream gradient per output (zeros for
    outputs that did not reach the target).
    """
    tape = _ACTIVE[-1] if _ACTIVE else None
    track = tape is not None and any(t.requires_grad for t in inputs)
    results = tuple(Tensor._wrap(o, track) for o in outs)
    if track:
        tape.records.append(_Record(inputs, results, backward))
    return results


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g, need):
        return (
            _unbroadcast(g, a.shape) if need[0] else None,
            _unbroadcast(g, b.shape) if need[1] else None,
        )

    return record_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g, need):
        return (
            _unbroadcast(g, a.shape) if need[0] else None,
            _unbroadcast(-g, b.shape) if need[1] else None,
        )

    return record_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g, need):
        return (
            _unbroadcast(g * b.data, a.shape) if need[0] else None,
            _unbroadcast(g * a.data, b.shape) if need[1] else None,
        )

    return record_op(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g, need):
        return (
            _unbroadcast(g / b.data, a.shape) if need[0] else None,
            _unbroadcast(-g * out / b.data, b.shape) if need[1] else None,
        )

    return record_op(out, (a, b), backward)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return record_op(-x.data, (x,), lambda g, need: (-g,))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return record_op(x.data * c, (x,), lambda g, need: (g * c,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return record_op(out, (x,), lambda g, need: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return record_op(np.log(x.data), (x,), lambda g, need: (g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return record_op(out, (x,), lambda g, need: (0.5 * g / out,))


def sin(x) -> Tensor:
    x = as_tensor(x)
    return record_op(np.sin(x.data), (x,), lambda g, need: (g * np.cos(x.data),))


def cos(x) -> Tensor:
    x = as_tensor(x)
    return record_op(np.cos(x.data), (x,), lambda g, need: (-g * np.sin(x.data),))


def atan2(y, x) -> Tensor:
    """Four-quadrant angle in (-pi, pi]; 0 where both arguments are 0."""
    y, x = as_tensor(y), as_tensor(x)
    if y.shape != x.shape:
        raise ShapeError(f"atan2: shapes differ {y.shape} vs {x.shape}")
    out = np.arctan2(y.data, x.data)
    # atan2(-0.0, x<0) gives -pi; fold it onto the closed end of the range
    out = np.where(out <= -math.pi, math.pi, out)
    r2 = x.data * x.data + y.data * y.data
    nz = r2 > 0.0
    safe = np.where(nz, r2, 1.0)

    def backward(g, need):
        gy = np.where(nz, g * x.data / safe, 0.0) if need[0] else None
        gx = np.where(nz, -g * y.data / safe, 0.0) if need[1] else None
        return gy, gx

    return record_op(out, (y, x), backward)


def nonlinearity(x) -> Tensor:
    """x * sigmoid(1.702 x): smooth approximation of the Gaussian-error gate."""
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * GELU_GATE * x.data))
    out = x.data * s

    def backward(g, need):
        return (g * (s + GELU_GATE * x.data * s * (1.0 - s)),)

    return record_op(out, (x,), backward)


def wrap_phase(x) -> Tensor:
    """Map angles into (-pi, pi]; gradient is one almost everywhere."""
    x = as_tensor(x)
    two_pi = 2.0 * math.pi
    out = x.data - two_pi * np.ceil((x.data - math.pi) / two_pi)
    return record_op(out, (x,), lambda g, need: (g,))


# --------------------------------------------------------------------------
# linear algebra and shape


def _rows2d(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def matmul(x, w) -> Tensor:
    """``x[..., p] @ w[p, q]``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, x{x.shape} @ w{w.shape}")
    out_shape = x.shape[:-1] + (w.shape[1],)

    def backward(g, need):
        g2 = _rows2d(g)
        gx = (g2 @ w.data.T).reshape(x.shape) if need[0] else None
        gw = _rows2d(x.data).T @ g2 if need[1] else None
        return gx, gw

    return record_op((_rows2d(x.data) @ w.data).reshape(out_shape), (x, w), backward)


def affine(x, w, b) -> Tensor:
    """``x[..., p] @ w[p, q] + b[q]`` as one primitive."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(
            f"affine: input has {x.shape[-1] if x.ndim else 0} features "
            f"but weight expects {w.shape[0] if w.ndim else '?'} (x{x.shape}, W{w.shape})"
        )
    if b.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias shape {b.shape} does not match output width {w.shape[1]}")
    out = _rows2d(x.data) @ w.data
    out += b.data
    out = out.reshape(x.shape[:-1] + (w.shape[1],))

    def backward(g, need):
        g2 = _rows2d(g)
        gx = (g2 @ w.data.T).reshape(x.shape) if need[0] else None
        gw = _rows2d(x.data).T @ g2 if need[1] else None
        gb = g2.sum(axis=0) if need[2] else None
        return gx, gw, gb

    return record_op(out, (x, w, b), backward)


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record_op(np.transpose(x.data, axes), (x,), lambda g, need: (np.transpose(g, inv),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return record_op(out, (x,), lambda g, need: (g.reshape(src),))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g, need):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record_op(np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g, need):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record_op(s, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g, need):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return record_op(out, (x,), backward)


def bilinear_map(x, left: np.ndarray, right: np.ndarray) -> Tensor:
    """``left @ x @ right.T`` over the last two axes; ``left``/``right`` are constants."""
    x = as_tensor(x)
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if x.ndim < 2 or left.shape[1] != x.shape[-2] or right.shape[1] != x.shape[-1]:
        raise ShapeError(
            f"bilinear_map: {left.shape} @ x{x.shape} @ {right.shape[::-1]} is not defined"
        )
    out = left @ x.data @ right.T
    return record_op(out, (x,), lambda g, need: (left.T @ g @ right,))


def depthwise_conv3x3(x, kernel) -> Tensor:
    """Per-channel 3x3 cross-correlation with zero padding.

    ``x`` is ``[..., d, H, W]``, ``kernel`` is ``[d, 3, 3]``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim < 3 or kernel.shape != (x.shape[-3], 3, 3):
        raise ShapeError(f"depthwise_conv3x3: kernel {kernel.shape} vs input {x.shape}")
    H, W = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    xp = np.pad(x.data, pad)
    k = kernel.data
    out = np.zeros(x.shape)
    for i in range(3):
        for j in range(3):
            out += k[:, i, j, None, None] * xp[..., i : i + H, j : j + W]

    def backward(g, need):
        gx = gk = None
        if need[0]:
            gp = np.zeros(xp.shape)
            for i in range(3):
                for j in range(3):
                    gp[..., i : i + H, j : j + W] += k[:, i, j, None, None] * g
            gx = gp[..., 1 : H + 1, 1 : W + 1]
        if need[1]:
            gk = np.zeros(k.shape)
            lead = tuple(range(x.ndim - 3))
            for i in range(3):
                for j in range(3):
                    prod = g * xp[..., i : i + H, j : j + W]
                    gk[:, i, j] = prod.sum(axis=lead + (-2, -1))
        return gx, gk

    return record_op(out, (x, kernel), backward)


# --------------------------------------------------------------------------
# finite-difference checking


def gradcheck(f: Callable[..., Tensor], *thetas, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` takes one tensor per entry of ``thetas`` and returns a scalar.
    The error of a component is ``|a - n| / max(|a|, |n|, 1e-8)``. Returns
    ``inf`` if ``f`` is not finite anywhere it is evaluated.
    """
    bases = [np.array(as_tensor(t).data, dtype=np.float64) for t in thetas]
    params = [Tensor(b, requires_grad=True) for b in bases]
    with GradTape() as tape:
        y = f(*params)
    if not np.all(np.isfinite(y.data)):
        return math.inf
    analytic = tape.gradient(y, params)

    def evaluate(k: int, arr: np.ndarray) -> float:
        args = [Tensor(arr if i == k else bases[i]) for i in range(len(bases))]
        return float(f(*args).data.reshape(-1)[0])

    worst = 0.0
    for k, base in enumerate(bases):
        flat = base.reshape(-1)
        for idx in range(flat.size):
            plus = flat.copy()
            plus[idx] += h
            minus = flat.copy()
            minus[idx] -= h
            fp = evaluate(k, plus.reshape(base.shape))
            fm = evaluate(k, minus.reshape(base.shape))
            if not (math.isfinite(fp) and math.isfinite(fm)):
                return math.inf
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[k].reshape(-1)[idx])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
