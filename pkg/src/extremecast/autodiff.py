"""Dense tensors plus a reverse-mode differentiation tape.

Tensors wrap contiguous row-major numpy arrays, float32 by default and
float64 on request (oracles, gradient checks). Ops run eagerly; when a Tape
is active and an input requires grad, the op is recorded so `Tape.backward`
can replay the recording in reverse. A tape is single-threaded; concurrent
workers each open their own.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "tensor",
    "zeros",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "tanh",
    "sigmoid",
    "relu",
    "square",
    "conv2d",
    "add_channel_bias",
    "concat_channels",
    "slice_channels",
    "index_time",
    "broadcast_spatial",
    "stack_steps",
    "sum_all",
    "masked_mean_abs",
    "finite_difference_check",
]


class ShapeError(ValueError):
    """Operand shapes or ranks are incompatible with the op's contract."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class TapeError(RuntimeError):
    """Tape misuse (non-scalar loss, double backward, ...)."""


_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Immutable dense array. Do not mutate `.data`; it is marked read-only."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if dtype is None:
            # float64 survives only when handed an explicit float64 array
            src_dtype = getattr(data, "dtype", None)
            dtype = np.float64 if src_dtype == np.float64 else np.float32
        arr = np.array(data, dtype=dtype, copy=True, order="C")
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # Internal: takes ownership of a freshly allocated array, no copy.
        t = object.__new__(cls)
        arr = np.asarray(arr)
        if arr.ndim > 0 and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def tensor(data, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=requires_grad)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=dtype), requires_grad)


class _TapeOp:
    __slots__ = ("name", "out", "parents", "backward_fn")

    def __init__(self, name, out, parents, backward_fn):
        self.name = name
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Gradients:
    """Gradient lookup keyed by tensor identity; absent tensors read as zero."""

    def __init__(self, buffers: dict):
        self._buffers = buffers

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._buffers.get(id(t))
        if g is None:
            return np.zeros(t.shape, dtype=t.dtype)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._buffers


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered recording of primitive ops; consumed once by `backward`."""

    def __init__(self):
        self._ops: list[_TapeOp] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape exited out of order")
        stack.pop()
        return False

    def _record(self, name, out, parents, backward_fn):
        self._ops.append(_TapeOp(name, out, parents, backward_fn))

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, loss: Tensor) -> Gradients:
        """Reverse sweep from a scalar loss.

        Gradients are kept for leaves (tensors not produced by an op on this
        tape); intermediate buffers are freed as soon as they are consumed.
        Leaves off the loss path read as zero.
        """
        if loss.shape != ():
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward")
        self._consumed = True
        buffers: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        for op in reversed(self._ops):
            g_out = buffers.get(id(op.out))
            if g_out is not None:
                for parent, g in zip(op.parents, op.backward_fn(g_out)):
                    if g is None or not parent.requires_grad:
                        continue
                    buf = buffers.get(id(parent))
                    if buf is None:
                        # pass-through backward rules may hand back g_out
                        # itself; copy so later += cannot corrupt siblings
                        buffers[id(parent)] = g.copy() if g is g_out else g
                    else:
                        buf += g
                # this op is the sole producer of op.out, so its gradient
                # buffer is fully consumed now; drop it to bound memory
                if op.out is not loss:
                    buffers.pop(id(op.out), None)
            # free saved activations as soon as the op is consumed
            op.parents = ()
            op.backward_fn = None
        self._ops.clear()
        return Gradients(buffers)


def _check_finite(arr: np.ndarray, name: str):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} produced non-finite values")


def _emit(name: str, out_data: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], Iterable]) -> Tensor:
    _check_finite(out_data, name)
    requires = any(p.requires_grad for p in parents)
    out = Tensor._wrap(out_data, requires_grad=requires)
    tape = _active_tape()
    if tape is not None and requires:
        tape._record(name, out, tuple(parents), backward_fn)
    return out


def _as_tensor_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _check_pair(a: Tensor, b: Tensor, name: str):
    if a.dtype != b.dtype:
        raise ShapeError(f"{name}: mixed dtypes {a.dtype} vs {b.dtype}")
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} "
                     "(only equal-shape or scalar broadcasting)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    # gradient of a scalar operand broadcast against a full tensor
    if shape == () and g.shape != ():
        return np.asarray(g.sum(), dtype=g.dtype)
    return g


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor_like(b, a)
    _check_pair(a, b, "add")
    out = a.data + b.data
    return _emit("add", out, (a, b), lambda g: (
        _reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor_like(b, a)
    _check_pair(a, b, "sub")
    out = a.data - b.data
    return _emit("sub", out, (a, b), lambda g: (
        _reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor_like(b, a)
    _check_pair(a, b, "mul")
    with np.errstate(over="ignore"):
        out = a.data * b.data
    ad, bd = a.data, b.data
    return _emit("mul", out, (a, b), lambda g: (
        _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)))


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor_like(b, a)
    _check_pair(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    ad, bd = a.data, b.data
    return _emit("div", out, (a, b), lambda g: (
        _reduce_to(g / bd, a.shape), _reduce_to(-g * ad / (bd * bd), b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * a.dtype.type(c)
    return _emit("scale", out, (a,), lambda g: (g * a.dtype.type(c),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    mask = a.data > 0
    return _emit("relu", out, (a,), lambda g: (g * mask,))


def square(a: Tensor) -> Tensor:
    out = a.data * a.data
    ad = a.data
    return _emit("square", out, (a,), lambda g: (g * (2.0 * ad),))


def _im2col(xp: np.ndarray, k: int, Ho: int, Wo: int) -> np.ndarray:
    """(C, Hp, Wp) -> (C*k*k, Ho*Wo) patch matrix."""
    C = xp.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k),
                                                   axis=(1, 2))
    # (C, Ho, Wo, k, k) -> (C, k, k, Ho, Wo), flattened to match the
    # kernel's natural (O, C*k*k) layout
    return win.transpose(0, 3, 4, 1, 2).reshape(C * k * k, Ho * Wo)


def conv2d(x: Tensor, kernel: Tensor, padding: int = 0) -> Tensor:
    """Cross-correlation of (C,H,W) with (O,C,k,k), zero padding, stride 1.

    Output is (O, H + 2*padding - k + 1, W + 2*padding - k + 1). Forward
    and the kernel gradient are each a single patch-matrix GEMM; the
    patch matrix is rebuilt in backward rather than kept on the tape.
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: need (C,H,W) and (O,C,k,k), "
                         f"got {x.shape} and {kernel.shape}")
    C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}")
    if Ck != C:
        raise ShapeError(f"conv2d: kernel expects {Ck} channels, input has {C}")
    if x.dtype != kernel.dtype:
        raise ShapeError(f"conv2d: mixed dtypes {x.dtype} vs {kernel.dtype}")
    if padding < 0:
        raise ShapeError("conv2d: padding must be >= 0")
    k, p = kh, int(padding)
    Ho = H + 2 * p - k + 1
    Wo = W + 2 * p - k + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: output would be {Ho}x{Wo}")

    if p > 0:
        xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    else:
        xp = x.data
    kd = kernel.data
    if k == 1:
        out = (kd.reshape(O, C) @ xp.reshape(C, -1)).reshape(O, Ho, Wo)
    else:
        out = (kd.reshape(O, -1) @ _im2col(xp, k, Ho, Wo)) \
            .reshape(O, Ho, Wo)

    def backward(g):
        g2 = g.reshape(O, -1)
        if k == 1:
            dk = (g2 @ xp.reshape(C, -1).T).reshape(kd.shape)
            dx = (kd.reshape(O, C).T @ g2).reshape(C, Ho, Wo)
            return np.ascontiguousarray(dx), dk
        patches = _im2col(xp, k, Ho, Wo)
        dk = (g2 @ patches.T).reshape(kd.shape)
        dpatch = (kd.reshape(O, -1).T @ g2).reshape(C, k, k, Ho, Wo)
        dxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                dxp[:, ki:ki + Ho, kj:kj + Wo] += dpatch[:, ki, kj]
        dx = dxp[:, p:p + H, p:p + W] if p > 0 else dxp
        return np.ascontiguousarray(dx), dk

    return _emit("conv2d", out, (x, kernel), backward)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias (C,) to a (C, ...) tensor."""
    if bias.ndim != 1 or x.shape[0] != bias.shape[0]:
        raise ShapeError(f"add_channel_bias: {x.shape} vs bias {bias.shape}")
    if x.dtype != bias.dtype:
        raise ShapeError("add_channel_bias: mixed dtypes")
    extra = x.ndim - 1
    out = x.data + bias.data.reshape((-1,) + (1,) * extra)
    axes = tuple(range(1, x.ndim))
    return _emit("add_channel_bias", out, (x, bias),
                 lambda g: (g, g.sum(axis=axes) if axes else g.copy()))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0; trailing extents must agree."""
    if not parts:
        raise ShapeError("concat_channels: empty input")
    rest = parts[0].shape[1:]
    dt = parts[0].dtype
    for t in parts[1:]:
        if t.shape[1:] != rest:
            raise ShapeError(f"concat_channels: trailing dims {t.shape[1:]} != {rest}")
        if t.dtype != dt:
            raise ShapeError("concat_channels: mixed dtypes")
    out = np.concatenate([t.data for t in parts], axis=0)
    sizes = [t.shape[0] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return [np.ascontiguousarray(g[offsets[i]:offsets[i + 1]])
                for i in range(len(sizes))]

    return _emit("concat_channels", out, tuple(parts), backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[0]):
        raise ShapeError(f"slice_channels: [{start}:{stop}] out of {x.shape[0]}")
    out = x.data[start:stop].copy()

    def backward(g):
        dx = np.zeros(x.shape, dtype=x.dtype)
        dx[start:stop] = g
        return (dx,)

    return _emit("slice_channels", out, (x,), backward)


def index_time(x: Tensor, t: int) -> Tensor:
    """Select step t from a (C, T, ...) tensor, yielding (C, ...)."""
    if x.ndim < 2:
        raise ShapeError(f"index_time: rank must be >= 2, got {x.ndim}")
    if not (0 <= t < x.shape[1]):
        raise ShapeError(f"index_time: t={t} out of T={x.shape[1]}")
    out = np.ascontiguousarray(x.data[:, t])

    def backward(g):
        dx = np.zeros(x.shape, dtype=x.dtype)
        dx[:, t] = g
        return (dx,)

    return _emit("index_time", out, (x,), backward)


def broadcast_spatial(v: Tensor, height: int, width: int) -> Tensor:
    """Tile a (C,) vector to (C, height, width)."""
    if v.ndim != 1:
        raise ShapeError(f"broadcast_spatial: need rank 1, got {v.shape}")
    out = np.broadcast_to(v.data[:, None, None],
                          (v.shape[0], height, width)).copy()
    return _emit("broadcast_spatial", out, (v,),
                 lambda g: (g.sum(axis=(1, 2)),))


def stack_steps(parts: Sequence[Tensor]) -> Tensor:
    """Stack T tensors of shape (C, ...) into (C, T, ...)."""
    if not parts:
        raise ShapeError("stack_steps: empty input")
    shape = parts[0].shape
    dt = parts[0].dtype
    for t in parts[1:]:
        if t.shape != shape or t.dtype != dt:
            raise ShapeError("stack_steps: all parts must share shape and dtype")
    out = np.stack([t.data for t in parts], axis=1)

    def backward(g):
        return [np.ascontiguousarray(g[:, i]) for i in range(len(parts))]

    return _emit("stack_steps", out, tuple(parts), backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _emit("sum_all", out, (x,),
                 lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def masked_mean_abs(pred: Tensor, target: Tensor, valid: Tensor) -> Tensor:
    """sum(|pred - target| * valid) / max(1, sum(valid)).

    `valid` must be 0/1-valued and match shapes. Differentiable w.r.t. pred
    only; target and valid are treated as constants. Returns 0 when nothing
    is valid.
    """
    if pred.shape != target.shape or pred.shape != valid.shape:
        raise ShapeError(f"masked_mean_abs: shapes {pred.shape}/{target.shape}/"
                         f"{valid.shape} must match")
    v = valid.data
    if not np.all((v == 0) | (v == 1)):
        raise ShapeError("masked_mean_abs: valid mask must be 0/1-valued")
    denom = max(1.0, float(v.sum()))
    diff = pred.data - target.data
    out = np.asarray((np.abs(diff) * v).sum() / denom, dtype=pred.dtype)

    def backward(g):
        return (g * np.sign(diff) * v / pred.dtype.type(denom), None, None)

    return _emit("masked_mean_abs", out, (pred, target, valid), backward)


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor,
                            eps: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    `f` maps one tensor to a scalar Tensor and must be deterministic.
    Relative error per coordinate is |analytic - fd| / (|analytic| + |fd|
    + 1e-8). Run in float64 for meaningful tolerances.
    """
    leaf = Tensor(x.data, dtype=x.dtype, requires_grad=True)
    with Tape() as tape:
        y = f(leaf)
        if not isinstance(y, Tensor) or y.shape != ():
            raise TapeError("finite_difference_check: f must return a scalar Tensor")
        grads = tape.backward(y)
    analytic = grads[leaf]

    flat = x.data.ravel()
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        f_hi = f(Tensor(bumped.reshape(x.shape), dtype=x.dtype)).item()
        bumped[i] = flat[i] - eps
        f_lo = f(Tensor(bumped.reshape(x.shape), dtype=x.dtype)).item()
        fd = (f_hi - f_lo) / (2.0 * eps)
        a = float(analytic.ravel()[i])
        rel = abs(a - fd) / (abs(a) + abs(fd) + 1e-8)
        worst = max(worst, rel)
    return worst
