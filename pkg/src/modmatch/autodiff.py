"""Dense arrays with tape-based reverse-mode differentiation.

Arrays are numpy-backed. Every differentiable operation goes through
:func:`forward_op`, which looks the operation up in a fixed registry and,
when a :class:`Tape` is active on the current thread, records a
vector-Jacobian product for the backward pass.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, message: str):
        super().__init__(message)
        self.op = op


class NonDeterministicError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind in "iub" and requires_grad:
            raise TypeError("integer arrays cannot require gradients")
        if arr.dtype.kind == "f" and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # Python operators route through the registry so they are taped.
    def __add__(self, other):
        return forward_op("add", self, other)

    def __radd__(self, other):
        return forward_op("add", other, self)

    def __sub__(self, other):
        return forward_op("sub", self, other)

    def __rsub__(self, other):
        return forward_op("sub", other, self)

    def __mul__(self, other):
        return forward_op("mul", self, other)

    def __rmul__(self, other):
        return forward_op("mul", other, self)

    def __truediv__(self, other):
        return forward_op("div", self, other)

    def __neg__(self):
        return forward_op("neg", self)

    def __matmul__(self, other):
        return forward_op("matmul", self, other)

    def __getitem__(self, index):
        return forward_op("slice", self, index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return forward_op("reshape", self, shape=shape)

    def transpose(self, *axes):
        return forward_op("transpose", self, axes=axes or None)

    def sum(self, axis=None, keepdims=False):
        return forward_op("reduce_sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return forward_op("mean", self, axis=axis, keepdims=keepdims)


@dataclass
class Node:
    out: Tensor
    inputs: tuple
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of differentiable ops executed while the tape is active."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording; used for EMA-teacher predictions."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None and arr.dtype.kind == "f":
        arr = arr.astype(dtype)
    return Tensor(arr)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# op implementations: each takes raw arrays and returns (output, vjp)


def _check_broadcast(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _add(a, b):
    _check_broadcast("add", a, b)
    return a + b, lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape))


def _sub(a, b):
    _check_broadcast("sub", a, b)
    return a - b, lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape))


def _mul(a, b):
    _check_broadcast("mul", a, b)
    return a * b, lambda g: (unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape))


def _div(a, b):
    _check_broadcast("div", a, b)
    out = a / b
    return out, lambda g: (unbroadcast(g / b, a.shape), unbroadcast(-g * out / b, b.shape))


def _neg(a):
    return -a, lambda g: (-g,)


def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a @ b

    def vjp(g):
        ga = g @ np.swapaxes(b, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            # weight shared over leading axes: contract them in one matmul
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return out, vjp


def _exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


def _log(a):
    return np.log(a), lambda g: (g / a,)


def _sqrt(a):
    out = np.sqrt(a)
    return out, lambda g: (g * 0.5 / out,)


def _square(a):
    return a * a, lambda g: (2.0 * g * a,)


def _tanh(a):
    out = np.tanh(a)
    return out, lambda g: (g * (1.0 - out * out),)


def _sigmoid(a):
    out = 0.5 * (np.tanh(0.5 * a) + 1.0)
    return out, lambda g: (g * out * (1.0 - out),)


def _relu(a):
    pos = a > 0
    return np.where(pos, a, 0).astype(a.dtype), lambda g: (g * pos,)


def _reduce_sum(a, axis=None, keepdims=False):
    out = np.sum(a, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, vjp


def _mean(a, axis=None, keepdims=False):
    out = np.mean(a, axis=axis, keepdims=keepdims)
    count = a.size / max(np.size(out), 1)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return out, vjp


def _logsumexp(a, axis=-1, keepdims=False):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    s = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    out = s if keepdims else np.squeeze(s, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(a - s),)

    return out, vjp


def _softmax(a, axis=-1):
    e = np.exp(a - np.max(a, axis=axis, keepdims=True))
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return out, vjp


def _log_softmax(a, axis=-1):
    m = np.max(a, axis=axis, keepdims=True)
    out = a - m - np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return out, vjp


def _layer_norm(x, gamma, beta, eps=1e-5):
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma + beta

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = np.sum(g * xhat, axis=lead)
        gbeta = np.sum(g, axis=lead)
        gx_hat = g * gamma
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return out, vjp


def _gather(table, indices=None):
    """Row lookup: ``table[indices]`` along axis 0 (embedding semantics)."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ShapeError(f"gather: indices must be integers, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather: index out of range for table of shape {table.shape}")
    out = table[idx]

    def vjp(g):
        gt = np.zeros_like(table)
        np.add.at(gt, idx.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        return (gt,)

    return out, vjp


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)


def _slice(a, index=None):
    out = a[index]
    basic = _is_basic(index)

    def vjp(g):
        ga = np.zeros_like(a)
        if basic:
            ga[index] = g
        else:
            np.add.at(ga, index, g)
        return (ga,)

    return out, vjp


def _concat(*arrays, axis=0):
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in arrays]} on axis {axis}") from None
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=axis))


def _reshape(a, shape=None):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return out, lambda g: (g.reshape(a.shape),)


def _transpose(a, axes=None):
    out = np.transpose(a, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return out, lambda g: (np.transpose(g, inv),)


def _conv1d(x, w):
    """Same-padded 1-D convolution over axis -2 of a channel-last input.

    ``w`` of shape (C_out, C_in, K) gives a full convolution; ``w`` of shape
    (C, K) gives a depthwise one. K must be odd.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d: input must be (B, T, C), got {x.shape}")
    k = w.shape[-1]
    if k % 2 != 1:
        raise ShapeError(f"conv1d: kernel width must be odd, got {w.shape}")
    depthwise = w.ndim == 2
    cin = w.shape[0] if depthwise else w.shape[1]
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d: input {x.shape} does not match kernel {w.shape}")
    b, t, c = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # (B, T, C, K)
    if depthwise:
        out = np.einsum("btck,ck->btc", win, w)
    else:
        out = np.tensordot(win, w, axes=([2, 3], [1, 2]))

    def vjp(g):
        if depthwise:
            gw = np.einsum("btck,btc->ck", win, g)
            gwin = g[..., None] * w
        else:
            gw = np.tensordot(g, win, axes=([0, 1], [0, 1]))
            gwin = np.tensordot(g, w, axes=([2], [0]))
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, j:j + t] += gwin[..., j]
        return gxp[:, pad:pad + t], gw

    return out, vjp


_OPS: dict[str, Callable] = {
    "add": _add,
    "sub": _sub,
    "mul": _mul,
    "div": _div,
    "neg": _neg,
    "matmul": _matmul,
    "exp": _exp,
    "log": _log,
    "sqrt": _sqrt,
    "square": _square,
    "tanh": _tanh,
    "sigmoid": _sigmoid,
    "relu": _relu,
    "reduce_sum": _reduce_sum,
    "mean": _mean,
    "logsumexp": _logsumexp,
    "softmax": _softmax,
    "log_softmax": _log_softmax,
    "layer_norm": _layer_norm,
    "gather": _gather,
    "slice": _slice,
    "concat": _concat,
    "reshape": _reshape,
    "transpose": _transpose,
    "conv1d": _conv1d,
}


def register_op(name: str, fn: Callable) -> None:
    """Add a fused op (e.g. the transducer loss) to the registry."""
    if name in _OPS:
        raise ValueError(f"op {name!r} already registered")
    _OPS[name] = fn


def supported_ops() -> list[str]:
    return sorted(_OPS)


def forward_op(name: str, *inputs, **attrs) -> Tensor:
    try:
        fn = _OPS[name]
    except KeyError:
        raise ValueError(f"unsupported op {name!r}") from None
    ref_dtype = next((x.dtype for x in inputs if isinstance(x, Tensor) and x.dtype.kind == "f"), None)
    tensors = tuple(as_tensor(x, ref_dtype) for x in inputs)
    out_data, vjp = fn(*(t.data for t in tensors), **attrs)
    if not np.all(np.isfinite(out_data)) and all(np.all(np.isfinite(t.data)) for t in tensors):
        raise NonFiniteError(name, f"op {name!r} produced non-finite values from finite inputs")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in tensors)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(out, tensors, vjp, name))
    return out


class Gradients:
    """Gradient lookup keyed by tensor identity; unused leaves read as zeros."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads


def backward(tape: Tape, loss: Tensor) -> Gradients:
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not tape.nodes:
        raise ValueError("backward: tape is empty")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return Gradients(grads)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# thin functional wrappers used by the model code


def matmul(a, b):
    return forward_op("matmul", a, b)


def exp(x):
    return forward_op("exp", x)


def log(x):
    return forward_op("log", x)


def sqrt(x):
    return forward_op("sqrt", x)


def square(x):
    return forward_op("square", x)


def tanh(x):
    return forward_op("tanh", x)


def sigmoid(x):
    return forward_op("sigmoid", x)


def relu(x):
    return forward_op("relu", x)


def swish(x):
    return x * sigmoid(x)


def softmax(x, axis=-1):
    return forward_op("softmax", x, axis=axis)


def log_softmax(x, axis=-1):
    return forward_op("log_softmax", x, axis=axis)


def logsumexp(x, axis=-1, keepdims=False):
    return forward_op("logsumexp", x, axis=axis, keepdims=keepdims)


def layer_norm(x, gamma, beta, eps=1e-5):
    return forward_op("layer_norm", x, gamma, beta, eps=eps)


def gather(table, indices):
    return forward_op("gather", table, indices=indices)


def concat(tensors: Iterable, axis=0):
    return forward_op("concat", *tensors, axis=axis)


def conv1d(x, w):
    return forward_op("conv1d", x, w)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def worst(self) -> tuple[str, float]:
        return max(self.errors.items(), key=lambda kv: kv[1])


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` with central differences.

    The error for one parameter is ``max_i |a_i - n_i| / max(|a|_inf, |n|_inf)``
    over the probed coordinates, with ``a`` the reverse-mode gradient and ``n``
    the numerical one. ``max_coords`` probes a seeded random subset of each
    parameter's entries instead of all of them.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with no_grad():
        first = np.array(f().data, copy=True)
        second = np.array(f().data, copy=True)
    if not np.array_equal(first, second):
        raise NonDeterministicError("f returned different values on identical inputs")
    with Tape() as tape:
        loss = f()
    grads = backward(tape, loss)
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    with no_grad():
        for name, p in params.items():
            analytic = grads[p]
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            numeric = np.empty(len(coords))
            for j, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                numeric[j] = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[coords]
            scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
            diff = np.abs(a - numeric).max(initial=0.0)
            errors[name] = 0.0 if scale == 0.0 else float(diff / scale)
    return GradCheckReport(errors, tol)
