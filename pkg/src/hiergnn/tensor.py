"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records a node (its parents and a local-gradient closure) on the
output tensor when gradient tracking is on and any input requires grad.
``backward`` linearises that graph into a tape in topological order, sweeps it
in reverse, and then severs the recorded nodes so the tape cannot be replayed.

Layout conventions used by the rest of the package:

* matmul follows numpy broadcasting (``(m, n) @ (B, n, k) -> (B, m, k)``)
* ``conv1d_dilated`` works on ``(..., channels, time)``
* ``dft_real`` maps ``(..., T)`` to ``(..., 2, T // 2 + 1)`` (real, imaginary)
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Gradients",
    "NonFiniteError",
    "TapeError",
    "tensor",
    "no_grad",
    "grad_enabled",
    "apply",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "sigmoid",
    "tanh",
    "relu",
    "abs_",
    "softmax",
    "concat",
    "stack",
    "take",
    "transpose",
    "swapaxes",
    "reshape",
    "sum_",
    "mean",
    "conv1d_dilated",
    "dft_real",
    "idft_real",
]


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class TapeError(RuntimeError):
    """Raised when backward is asked to do something the tape cannot support."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    """A float64 array that can take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

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
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # identity semantics: tensors are dict keys in Gradients
    __hash__ = object.__hash__

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._node = _Node(op, parents, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}") from exc

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result("mul", out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _result("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _result("relu", a.data * mask, (a,), lambda g: (g * mask,))


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.data)
    return _result("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result("softmax", y, (a,), bw)


# --------------------------------------------------------------------------
# linear algebra and shape


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """np.matmul with single-GEMM paths when one side is a plain matrix."""
    if b.ndim == 2 and a.ndim > 2:
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[1],))
    if a.ndim == 2 and b.ndim > 2:
        out = np.tensordot(a, b, axes=([1], [b.ndim - 2]))  # (m, ..., n)
        return np.moveaxis(out, 0, -2)
    return np.matmul(a, b)


def _contract_lead(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    """sum over leading axes of g[..., i, j] * x[..., k, j] -> (i, k)."""
    lead = list(range(g.ndim - 2)) + [g.ndim - 1]
    return np.tensordot(g, x, axes=(lead, lead))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    try:
        out = _mm(a.data, b.data)
    except ValueError as exc:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if a.ndim == 2 and b.ndim > 2:
                ga = _contract_lead(g, b.data)
            else:
                ga = _unbroadcast(_mm(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(_mm(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result("matmul", out, (a, b), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat: shape mismatch {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", out, ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    ax = axis if axis >= 0 else axis + ts[0].ndim + 1
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts], axis=ax)


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def take(a, idx) -> Tensor:
    """Index a tensor (numpy basic or integer-array indexing)."""
    a = _as_tensor(a)
    out = np.array(a.data[idx], dtype=np.float64, copy=True)
    advanced = _is_advanced(idx)

    def bw(g):
        ga = np.zeros_like(a.data)
        if advanced:
            np.add.at(ga, idx, g)
        else:
            ga[idx] += g
        return (ga,)

    return _result("slice", out, (a,), bw)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    return _result("transpose", np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    return _result("reshape", a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(a.shape),))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)
    if out.ndim == 0:
        out = out.reshape(1)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _result("sum", out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    s = sum_(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / count)


# --------------------------------------------------------------------------
# temporal primitives


def conv1d_dilated(x, w, dilation: int = 1) -> Tensor:
    """Causal dilated 1-D convolution over the last axis.

    ``x`` is ``(..., C_in, T)`` and ``w`` is ``(C_out, C_in, k)``. The input is
    left-padded with ``(k - 1) * dilation`` zeros so the output keeps length T
    and ``out[..., t]`` only sees ``x[..., :t + 1]``. Tap ``j`` of the kernel
    reads ``x[t - (k - 1 - j) * dilation]``, so the last tap is the current step.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    if w.ndim != 3 or x.ndim < 2 or x.shape[-2] != w.shape[1]:
        raise ValueError(f"conv1d_dilated: shape mismatch x={x.shape} w={w.shape}")
    c_out, c_in, k = w.shape
    T = x.shape[-1]
    pad = (k - 1) * dilation
    lead = x.shape[:-2]
    rows = int(np.prod(lead, dtype=np.int64)) * T
    # channels-last im2col so every product is a single 2-D GEMM
    xp = np.zeros(lead + (T + pad, c_in))
    xp[..., pad:, :] = np.swapaxes(x.data, -1, -2)
    cols = np.stack([xp[..., j * dilation : j * dilation + T, :] for j in range(k)], axis=-2)
    cols2 = cols.reshape(rows, k * c_in)  # cols[..., t, j, c] = x[..., c, t - (k - 1 - j) * dilation]
    w2 = np.transpose(w.data, (2, 1, 0)).reshape(k * c_in, c_out)
    out = np.ascontiguousarray(np.swapaxes((cols2 @ w2).reshape(lead + (T, c_out)), -1, -2))

    def bw(g):
        gx = gw = None
        g2 = np.swapaxes(g, -1, -2).reshape(rows, c_out)
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(lead + (T, k, c_in))
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j * dilation : j * dilation + T, :] += gcols[..., j, :]
            gx = np.swapaxes(gxp[..., pad:, :], -1, -2)
        if w.requires_grad:
            gw = np.transpose((cols2.T @ g2).reshape(k, c_in, c_out), (2, 1, 0))
        return gx, gw

    return _result("conv1d_dilated", out, (x, w), bw)


@lru_cache(maxsize=64)
def _dft_basis(T: int) -> tuple[np.ndarray, np.ndarray]:
    t = np.arange(T)[:, None]
    f = np.arange(T // 2 + 1)[None, :]
    ang = 2.0 * np.pi * t * f / T
    cos, sin = np.cos(ang), -np.sin(ang)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


@lru_cache(maxsize=64)
def _idft_basis(T: int) -> tuple[np.ndarray, np.ndarray]:
    F = T // 2 + 1
    w = np.full(F, 2.0)
    w[0] = 1.0
    if T % 2 == 0:
        w[-1] = 1.0
    f = np.arange(F)[:, None]
    t = np.arange(T)[None, :]
    ang = 2.0 * np.pi * f * t / T
    cos = w[:, None] * np.cos(ang) / T
    sin = -w[:, None] * np.sin(ang) / T
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def dft_real(x) -> Tensor:
    """Real DFT along the last axis: ``(..., T) -> (..., 2, T//2 + 1)``."""
    x = _as_tensor(x)
    cos, sin = _dft_basis(x.shape[-1])
    out = np.stack([x.data @ cos, x.data @ sin], axis=-2)

    def bw(g):
        return (g[..., 0, :] @ cos.T + g[..., 1, :] @ sin.T,)

    return _result("dft_real", out, (x,), bw)


def idft_real(spec, n: int) -> Tensor:
    """Inverse of :func:`dft_real` for a length-``n`` real signal."""
    spec = _as_tensor(spec)
    F = n // 2 + 1
    if spec.ndim < 2 or spec.shape[-2] != 2 or spec.shape[-1] != F:
        raise ValueError(f"idft_real: expected (..., 2, {F}), got {spec.shape}")
    cos, sin = _idft_basis(n)
    out = spec.data[..., 0, :] @ cos + spec.data[..., 1, :] @ sin

    def bw(g):
        return (np.stack([g @ cos.T, g @ sin.T], axis=-2),)

    return _result("idft_real", out, (spec,), bw)


_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "softmax_lastdim": lambda a: softmax(a, axis=-1),
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": take,
    "transpose": transpose,
    "sum": sum_,
    "mean": mean,
    "conv1d_dilated": conv1d_dilated,
    "dft_real": dft_real,
    "idft_real": idft_real,
}


def apply(op_kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch an op by name, e.g. ``apply("conv1d_dilated", x, w, dilation=2)``."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    return fn(*inputs, **attrs)


# --------------------------------------------------------------------------
# reverse sweep


class Gradients(dict):
    """Maps each reachable leaf tensor (by identity) to its gradient tensor."""

    def for_(self, t: Tensor) -> np.ndarray:
        g = self.get(t)
        return np.zeros_like(t.data) if g is None else g.data


def _tape(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        t, done = stack_.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack_.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack_.append((p, False))
    return order


def backward(loss: Tensor) -> Gradients:
    """Back-propagate from a single-element loss.

    Returns gradients for every leaf reachable from ``loss`` that requires
    grad; each leaf's ``.grad`` is also set. The recorded graph is released
    afterwards, so calling backward twice on the same loss raises TapeError.
    """
    if loss.size != 1:
        raise TapeError(f"loss must be a single element, got shape {loss.shape}")
    if loss._node is None:
        raise TapeError("loss did not record a tape (no input requires grad, or already consumed)")
    tape = _tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    out = Gradients()
    for t in reversed(tape):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            if t.requires_grad:
                out[t] = Tensor(g)
                t.grad = g
            continue
        for p, gp in zip(node.parents, node.backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp
    for t in tape:
        t._node = None
    return out


def grad_check(
    f: Callable[..., Tensor],
    point: Tensor | Sequence[Tensor],
    epsilon: float = 1e-5,
    coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` is called as ``f(*points)`` and must return a single-element tensor.
    ``coords`` limits the check to that many randomly chosen coordinates
    (always at least one per tensor); ``None`` checks every coordinate.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    points = [point] if isinstance(point, Tensor) else list(point)
    flags = [p.requires_grad for p in points]
    for p in points:
        p.requires_grad = True
        p.grad = None
    try:
        grads = backward(f(*points))
        picks = _pick_coords(points, coords, seed)
        worst = 0.0
        with no_grad():
            for p, flat_idx in picks:
                analytic = grads.for_(p).reshape(-1)
                flat = p.data.reshape(-1)
                for i in flat_idx:
                    orig = flat[i]
                    flat[i] = orig + epsilon
                    fp = _scalar(f(*points))
                    flat[i] = orig - epsilon
                    fm = _scalar(f(*points))
                    flat[i] = orig
                    numeric = (fp - fm) / (2.0 * epsilon)
                    a = analytic[i]
                    err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                    worst = max(worst, err)
        return worst
    finally:
        for p, flag in zip(points, flags):
            p.requires_grad = flag


def _scalar(t: Tensor) -> float:
    v = float(t.data.reshape(-1)[0])
    if not np.isfinite(v):
        raise NonFiniteError("function is non-finite at a perturbed point")
    return v


def _pick_coords(points: list[Tensor], coords: int | None, seed: int):
    if coords is None:
        return [(p, range(p.size)) for p in points]
    rng = np.random.default_rng(seed)
    total = sum(p.size for p in points)
    picks = []
    for p in points:
        share = max(1, int(round(coords * p.size / total)))
        share = min(share, p.size)
        picks.append((p, np.sort(rng.choice(p.size, size=share, replace=False))))
    return picks
