"""Reverse-mode differentiation over a fixed dense-tensor operator set.

Eager tape: every op that touches a grad-requiring tensor records a node
(parents + backward closure) on its output. ``backward`` walks the recorded
nodes once in reverse topological order and accumulates gradients onto
grad-requiring leaves. Values are 64-bit floats throughout; numpy provides
the dense array arithmetic, all differentiation rules live here.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import BinaryIO, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, InvalidAxisError, ShapeError

# log inputs clamped to >= LOG_EPS; implements the 0*log(0) := 0 convention
LOG_EPS = 1e-12

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference/scoring paths)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class OpNode:
    """One recorded operation: parent tensors plus the closure that maps the
    output gradient to per-parent gradients (None where a parent opts out)."""

    __slots__ = ("op", "parents", "bwd")

    def __init__(self, op: str, parents: tuple, bwd):
        self.op = op
        self.parents = parents
        self.bwd = bwd


class Tensor:
    """Dense n-d array of float64 with optional gradient tracking.

    ``data`` is row-major; ``grad`` is populated by :func:`backward` on
    grad-requiring leaves and always matches ``data``'s shape. Tensors are
    value-immutable after creation except for gradient accumulation (the
    optimizer mutates parameter data between graphs, never inside one).
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[OpNode] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, cut from the graph, never accumulates gradient."""
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars lift to constant tensors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None):
        return sum(self, axes)

    def mean(self, axes=None):
        return mean(self, axes)

    def reshape(self, shape):
        return reshape(self, shape)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _from_op(data: np.ndarray, op: str, parents: Sequence[Tensor], bwd) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = OpNode(op, tuple(parents), bwd)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g back down to ``shape`` (adjoint of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


def _norm_axis(op: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise InvalidAxisError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _norm_axes(op: str, axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(_norm_axis(op, a, ndim) for a in axes)


# ---------------------------------------------------------------------------
# elementwise / linear ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def bwd(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _from_op(a.data + b.data, "add", (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def bwd(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _from_op(a.data - b.data, "sub", (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _from_op(a.data * b.data, "mul", (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = (
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    return _from_op(a.data / b.data, "div", (a, b), bwd)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return (g * c if a.requires_grad else None,)

    return _from_op(a.data * c, "scalar_mul", (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")

    def bwd(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _from_op(a.data @ b.data, "matmul", (a, b), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _from_op(np.maximum(a.data, 0.0), "relu", (a,), bwd)


def square(a: Tensor) -> Tensor:
    def bwd(g):
        return (g * (2.0 * a.data),)

    return _from_op(a.data * a.data, "square", (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _from_op(out, "exp", (a,), bwd)


def log(a: Tensor) -> Tensor:
    """Natural log with inputs clamped to >= LOG_EPS (so 0*log 0 terms vanish).

    Gradient is zero in the clamped region, 1/x elsewhere.
    """
    clamped = np.maximum(a.data, LOG_EPS)
    live = a.data >= LOG_EPS

    def bwd(g):
        return (np.where(live, g / clamped, 0.0),)

    return _from_op(np.log(clamped), "log", (a,), bwd)


# ---------------------------------------------------------------------------
# reductions


def sum(a: Tensor, axes=None) -> Tensor:
    axes_n = _norm_axes("sum", axes, a.ndim)
    shape = a.shape

    def bwd(g):
        kd = list(g.shape)
        for ax in sorted(axes_n):
            kd.insert(ax, 1)
        return (np.broadcast_to(g.reshape(kd), shape).copy(),)

    return _from_op(a.data.sum(axis=axes_n), "sum", (a,), bwd)


def mean(a: Tensor, axes=None) -> Tensor:
    axes_n = _norm_axes("mean", axes, a.ndim)
    shape = a.shape
    count = 1
    for ax in axes_n:
        count *= shape[ax]

    def bwd(g):
        kd = list(g.shape)
        for ax in sorted(axes_n):
            kd.insert(ax, 1)
        return (np.broadcast_to(g.reshape(kd) / count, shape).copy(),)

    return _from_op(a.data.mean(axis=axes_n), "mean", (a,), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements, scalar output."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size

    def bwd(g):
        scale = g * (2.0 / n)
        return (
            scale * diff if a.requires_grad else None,
            -scale * diff if b.requires_grad else None,
        )

    return _from_op(np.asarray((diff * diff).mean()), "mse", (a, b), bwd)


def softmax_cross_entropy(logits: Tensor, target: Tensor, axis: int = 1) -> Tensor:
    """Mean over all non-class positions of -sum_c target*log(softmax(logits)),
    probabilities clamped to >= LOG_EPS. Fused single node (the elementwise
    composition allocates an order of magnitude more temporaries).
    """
    if logits.shape != target.shape:
        raise ShapeError(f"softmax_cross_entropy: shapes {logits.shape} vs {target.shape}")
    ax = _norm_axis("softmax_cross_entropy", axis, logits.ndim)
    shifted = logits.data - logits.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=ax, keepdims=True)
    n = logits.size // logits.shape[ax]
    live = p >= LOG_EPS
    value = -(target.data * np.log(np.maximum(p, LOG_EPS))).sum() / n

    def bwd(g):
        glogits = None
        if logits.requires_grad:
            tm = target.data * live
            glogits = (g / n) * (p * tm.sum(axis=ax, keepdims=True) - tm)
        gtarget = None
        if target.requires_grad:
            gtarget = -(g / n) * np.log(np.maximum(p, LOG_EPS))
        return glogits, gtarget

    return _from_op(np.asarray(value), "softmax_cross_entropy", (logits, target), bwd)


# ---------------------------------------------------------------------------
# normalizations


def softmax(a: Tensor, axis: int) -> Tensor:
    ax = _norm_axis("softmax", axis, a.ndim)
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _from_op(out, "softmax", (a,), bwd)


def l2_normalize(a: Tensor, axis: int, eps: float = 1e-8) -> Tensor:
    """Scale so the slice along ``axis`` has unit L2 norm; below ``eps`` the
    norm is replaced by ``eps`` (linear regime, keeps gradients finite)."""
    ax = _norm_axis("l2_normalize", axis, a.ndim)
    norm = np.sqrt((a.data * a.data).sum(axis=ax, keepdims=True))
    denom = np.maximum(norm, eps)
    out = a.data / denom
    live = norm > eps

    def bwd(g):
        dot = (g * out).sum(axis=ax, keepdims=True)
        return ((g - np.where(live, out * dot, 0.0)) / denom,)

    return _from_op(out, "l2_normalize", (a,), bwd)


# ---------------------------------------------------------------------------
# convolution / pooling / resampling
#
# The cores work channels-last (NHWC): the im2col matrix and its adjoint are
# then plain block copies and every GEMM runs on contiguous operands. The
# public NCHW form (the convention of all module contracts) composes the core
# with permutes; hot paths opt in to channels_last directly.


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise InvalidAxisError(f"permute: axes {axes} not a permutation for rank {x.ndim}")
    inv = tuple(int(i) for i in np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _from_op(np.ascontiguousarray(x.data.transpose(axes)), "permute", (x,), bwd)


def _to_nhwc(x: Tensor) -> Tensor:
    return permute(x, (0, 2, 3, 1))


def _to_nchw(x: Tensor) -> Tensor:
    return permute(x, (0, 3, 1, 2))


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           pad: int = 0, channels_last: bool = False) -> Tensor:
    """2-d cross-correlation with OIHW kernel and optional per-channel bias.

    Input/output are NCHW by default, NHWC with ``channels_last=True``.
    Lowered to a single GEMM over an im2col matrix that the backward pass
    reuses.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expects 4-d input/kernel, got {x.shape} and {w.shape}")
    if not channels_last:
        return _to_nchw(_conv2d_nhwc(_to_nhwc(x), w, bias, stride, pad))
    return _conv2d_nhwc(x, w, bias, stride, pad)


def _im2col(xd: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(B, H, W, C) -> (B*OH*OW, kh*kw*C) column matrix (one copy)."""
    B = xd.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    B, OH, OW = win.shape[:3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * OH * OW, kh * kw * xd.shape[3])


def _conv2d_nhwc(x: Tensor, w: Tensor, bias: Optional[Tensor], stride: int, pad: int) -> Tensor:
    B, H, W, Cin = x.shape
    Cout, Cin2, kh, kw = w.shape
    if Cin != Cin2:
        raise ShapeError(f"conv2d: input channels {x.shape} vs kernel {w.shape}")
    xd = x.data
    if pad:
        xd = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if kh > Hp or kw > Wp:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    OH = (Hp - kh) // stride + 1
    OW = (Wp - kw) // stride + 1
    # kernel as (kh*kw*Cin, Cout) to match the column layout
    wmat = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0).reshape(kh * kw * Cin, Cout))

    pointwise = kh == 1 and kw == 1 and stride == 1
    if pointwise:
        cols = xd.reshape(B * OH * OW, Cin)
    else:
        cols = _im2col(xd, kh, kw, stride)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(B, OH, OW, Cout)

    def bwd(g):
        g2 = g.reshape(B * OH * OW, Cout)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(kh, kw, Cin, Cout).transpose(3, 2, 0, 1)
            gw = np.ascontiguousarray(gw)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            if pointwise:
                gx = (g2 @ wmat.T).reshape(B, OH, OW, Cin)
            else:
                # input grad as a full correlation of the (dilated) output
                # grad with the flipped kernel: one more im2col GEMM instead
                # of a strided scatter
                canvas = np.zeros((B, Hp + kh - 1, Wp + kw - 1, Cout))
                canvas[:, kh - 1:kh - 1 + OH * stride:stride,
                       kw - 1:kw - 1 + OW * stride:stride, :] = g
                gcols = _im2col(canvas, kh, kw, 1)
                wflip = np.ascontiguousarray(
                    w.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * Cout, Cin))
                gpad = (gcols @ wflip).reshape(B, Hp, Wp, Cin)
                gx = gpad[:, pad:pad + H, pad:pad + W, :] if pad else gpad
        if bias is None:
            return gx, gw
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _from_op(out, "conv2d", parents, bwd)


def max_pool2d(x: Tensor, k: int = 2, channels_last: bool = False) -> Tensor:
    """Non-overlapping k x k max pooling; spatial dims must divide by k.
    Ties route the gradient to the first maximal position in the window."""
    if not channels_last:
        _require_4d("max_pool2d", x)
        return _to_nchw(_max_pool2d_nhwc(_to_nhwc(x), k))
    return _max_pool2d_nhwc(x, k)


def _max_pool2d_nhwc(x: Tensor, k: int) -> Tensor:
    B, H, W, C = _require_4d("max_pool2d", x)
    if H % k or W % k:
        raise ShapeError(f"max_pool2d: spatial dims {x.shape} not divisible by {k}")
    OH, OW = H // k, W // k
    xd = x.data
    if k == 2:
        # argmax over the four window slots; first maximal slot (window
        # row-major) wins ties
        stacked = np.stack([xd[:, 0::2, 0::2, :], xd[:, 0::2, 1::2, :],
                            xd[:, 1::2, 0::2, :], xd[:, 1::2, 1::2, :]])
        idx = stacked.argmax(axis=0)
        out = np.take_along_axis(stacked, idx[None], axis=0)[0]

        def bwd2(g):
            gx = np.empty((B, H, W, C))
            slots = ((0, 0), (0, 1), (1, 0), (1, 1))
            for s, (i, j) in enumerate(slots):
                gx[:, i::2, j::2, :] = g * (idx == s)
            return (gx,)

        return _from_op(np.ascontiguousarray(out), "max_pool2d", (x,), bwd2)

    win = np.empty((B, OH, OW, k * k, C))
    for i in range(k):
        for j in range(k):
            win[:, :, :, i * k + j, :] = xd[:, i::k, j::k, :]
    idx = win.argmax(axis=3)
    out = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def bwd(g):
        gwin = np.zeros((B, OH, OW, k * k, C))
        np.put_along_axis(gwin, idx[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        gx = np.empty((B, H, W, C))
        for i in range(k):
            for j in range(k):
                gx[:, i::k, j::k, :] = gwin[:, :, :, i * k + j, :]
        return (gx,)

    return _from_op(out, "max_pool2d", (x,), bwd)


def avg_pool2d(x: Tensor, k: int = 2, channels_last: bool = False) -> Tensor:
    """Non-overlapping k x k average pooling; spatial dims must divide by k."""
    if not channels_last:
        _require_4d("avg_pool2d", x)
        return _to_nchw(_avg_pool2d_nhwc(_to_nhwc(x), k))
    return _avg_pool2d_nhwc(x, k)


def _avg_pool2d_nhwc(x: Tensor, k: int) -> Tensor:
    B, H, W, C = _require_4d("avg_pool2d", x)
    if H % k or W % k:
        raise ShapeError(f"avg_pool2d: spatial dims {x.shape} not divisible by {k}")
    OH, OW = H // k, W // k
    out = x.data.reshape(B, OH, k, OW, k, C).mean(axis=(2, 4))

    def bwd(g):
        gx = np.broadcast_to(g[:, :, None, :, None, :] / (k * k), (B, OH, k, OW, k, C))
        return (gx.reshape(B, H, W, C).copy(),)

    return _from_op(out, "avg_pool2d", (x,), bwd)


def adaptive_avg_pool2d(x: Tensor, out_size: int, channels_last: bool = False) -> Tensor:
    """Average-pool to ``out_size`` x ``out_size``; windows follow the
    floor/ceil bound convention so any input size is accepted."""
    if not channels_last:
        _require_4d("adaptive_avg_pool2d", x)
        return _to_nchw(_adaptive_avg_pool2d_nhwc(_to_nhwc(x), out_size))
    return _adaptive_avg_pool2d_nhwc(x, out_size)


def _adaptive_avg_pool2d_nhwc(x: Tensor, out_size: int) -> Tensor:
    B, H, W, C = _require_4d("adaptive_avg_pool2d", x)
    if out_size < 1 or out_size > H or out_size > W:
        raise ShapeError(f"adaptive_avg_pool2d: out_size {out_size} invalid for input {x.shape}")
    if H % out_size == 0 and W % out_size == 0:
        kh_, kw_ = H // out_size, W // out_size
        out = x.data.reshape(B, out_size, kh_, out_size, kw_, C).mean(axis=(2, 4))

        def bwd_fast(g):
            gx = np.broadcast_to(
                g[:, :, None, :, None, :] / (kh_ * kw_),
                (B, out_size, kh_, out_size, kw_, C))
            return (gx.reshape(B, H, W, C).copy(),)

        return _from_op(out, "adaptive_avg_pool2d", (x,), bwd_fast)

    hb = [((i * H) // out_size, -((-(i + 1) * H) // out_size)) for i in range(out_size)]
    wb = [((j * W) // out_size, -((-(j + 1) * W) // out_size)) for j in range(out_size)]
    out = np.empty((B, out_size, out_size, C))
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            out[:, i, j, :] = x.data[:, h0:h1, w0:w1, :].mean(axis=(1, 2))

    def bwd(g):
        gx = np.zeros((B, H, W, C))
        for i, (h0, h1) in enumerate(hb):
            for j, (w0, w1) in enumerate(wb):
                area = (h1 - h0) * (w1 - w0)
                gx[:, h0:h1, w0:w1, :] += g[:, i:i + 1, j:j + 1, :] / area
        return (gx,)

    return _from_op(out, "adaptive_avg_pool2d", (x,), bwd)


def upsample_nearest(x: Tensor, factor: int, channels_last: bool = False) -> Tensor:
    if not channels_last:
        _require_4d("upsample_nearest", x)
        return _to_nchw(_upsample_nearest_nhwc(_to_nhwc(x), factor))
    return _upsample_nearest_nhwc(x, factor)


def _upsample_nearest_nhwc(x: Tensor, factor: int) -> Tensor:
    B, H, W, C = _require_4d("upsample_nearest", x)
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def bwd(g):
        return (g.reshape(B, H, factor, W, factor, C).sum(axis=(2, 4)),)

    return _from_op(out, "upsample_nearest", (x,), bwd)


def _require_4d(op: str, x: Tensor):
    if x.ndim != 4:
        raise ShapeError(f"{op}: expects 4-d input, got {x.shape}")
    return x.shape


# ---------------------------------------------------------------------------
# structural ops


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: needs at least one tensor")
    ax = _norm_axis("concat", axis, tensors[0].ndim)
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != ax and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for t, o, s in zip(tensors, offsets, sizes):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(o, o + s)
                pieces.append(np.ascontiguousarray(g[tuple(sl)]))
            else:
                pieces.append(None)
        return tuple(pieces)

    return _from_op(np.concatenate([t.data for t in tensors], axis=ax), "concat", tuple(tensors), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis (adjoint scatters into zeros)."""
    ax = _norm_axis("narrow", axis, x.ndim)
    if start < 0 or start + length > x.shape[ax]:
        raise ShapeError(f"narrow: [{start}:{start + length}) outside dim {x.shape[ax]} of {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, start + length)
    sl = tuple(sl)

    def bwd(g):
        gx = np.zeros(x.shape)
        gx[sl] = g
        return (gx,)

    return _from_op(np.ascontiguousarray(x.data[sl]), "narrow", (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _from_op(x.data.reshape(shape), "reshape", (x,), bwd)


# ---------------------------------------------------------------------------
# backward driver


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every grad-requiring leaf reachable from ``loss``.

    ``loss`` must be scalar. Repeated calls without :func:`zero_grad`
    accumulate. Each recorded node is visited exactly once.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    order = _toposort(loss._node)
    grads: dict[int, np.ndarray] = {id(loss._node): seed}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node.bwd(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pnode = parent._node
            if pnode is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(pnode)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _toposort(root: OpNode) -> list:
    """Parents-before-children ordering of all nodes reachable from root."""
    order: list[OpNode] = []
    seen = {id(root)}
    stack: list[tuple[OpNode, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        stack.append((node, True))
        for p in node.parents:
            pn = p._node
            if pn is not None and id(pn) not in seen:
                seen.add(id(pn))
                stack.append((pn, False))
    return order


def zero_grad(params: Iterable[Tensor]) -> None:
    """Clear accumulated gradients to zeros in place; fresh tensors are untouched."""
    for p in params:
        if p.grad is not None:
            p.grad[...] = 0.0


# ---------------------------------------------------------------------------
# serialization: ASCII header `TNSR <ndim> <d0> <d1> ...` + little-endian f64


def save_tensor(f: BinaryIO, t: Tensor) -> None:
    dims = " ".join(str(d) for d in t.shape)
    header = f"TNSR {t.ndim}{' ' + dims if dims else ''}\n"
    f.write(header.encode("ascii"))
    f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_tensor(f: BinaryIO) -> Tensor:
    header = bytearray()
    while True:
        c = f.read(1)
        if not c:
            raise ContractError("load_tensor: truncated header")
        if c == b"\n":
            break
        header.extend(c)
    fields = header.decode("ascii").split()
    if not fields or fields[0] != "TNSR":
        raise ContractError(f"load_tensor: bad magic {fields[:1]}")
    ndim = int(fields[1])
    dims = tuple(int(d) for d in fields[2:2 + ndim])
    if len(dims) != ndim:
        raise ContractError("load_tensor: header dim count mismatch")
    count = int(np.prod(dims)) if dims else 1
    raw = f.read(count * 8)
    if len(raw) != count * 8:
        raise ContractError("load_tensor: truncated payload")
    data = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    return Tensor(data)
