"""Dense tensors with reverse-mode automatic differentiation.

Every backward rule is written with the same recorded primitives that the
forward pass uses. Calling :func:`gradient` with ``differentiable=True``
therefore leaves the backward pass in the graph, and the returned gradients
can be differentiated again. That is all the unrolled second-order
meta-gradient needs; there is no separate Hessian code path.

When nothing is being recorded (plain gradients, or the outer backward pass)
a few heavy primitives take a fused numpy shortcut for their backward rule.
Both paths compute the same quantity; the tests check each against finite
differences.

Conventions:

* storage is a row-major numpy array, float32 (``"f32"``) or float64 (``"f64"``);
* image tensors are channels-last ``(N, H, W, C)``; conv kernels are
  ``(kh, kw, C_in, C_out)``;
* binary elementwise ops require equal shapes. The only implicit broadcast
  is per-channel (last axis) scale/shift, i.e. bias-add.
"""

from __future__ import annotations

import contextlib
import io
import itertools
import os
import struct
import threading
from typing import Sequence

import numpy as np

PRECISIONS = {"f32": np.float32, "f64": np.float64}

_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "recording", True)


@contextlib.contextmanager
def no_record():
    """Evaluate without adding nodes to the computation record."""
    prev = _recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


class ShapeError(ValueError):
    pass


class PrecisionError(TypeError):
    pass


def _precision_of(dtype) -> str:
    if dtype == np.float32:
        return "f32"
    if dtype == np.float64:
        return "f64"
    raise PrecisionError(f"unsupported dtype {dtype}")


class Tensor:
    """An n-dimensional float array that may carry provenance.

    ``node`` is the primitive application that produced this tensor, or
    ``None`` for leaves and for anything computed outside a record.
    """

    __slots__ = ("data", "requires_grad", "node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, precision: str | None = None):
        if precision is not None:
            arr = np.asarray(data, dtype=PRECISIONS[precision])
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def precision(self) -> str:
        return _precision_of(self.data.dtype)

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=5, threshold=12)}{flag})"

    # arithmetic
    def __add__(self, other):
        if isinstance(other, Tensor):
            return _apply(Add(), self, other)
        return _apply(AddScalar(float(other)), self)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return _apply(Sub(), self, other)
        return _apply(AddScalar(-float(other)), self)

    def __rsub__(self, other):
        return _apply(AddScalar(float(other)), -self)

    def __neg__(self):
        return _apply(ScalarMul(-1.0), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return _apply(Mul(), self, other)
        return _apply(ScalarMul(float(other)), self)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return _apply(Mul(), self, other**-1.0)
        return _apply(ScalarMul(1.0 / float(other)), self)

    def __pow__(self, p):
        return _apply(PowScalar(float(p)), self)

    def __matmul__(self, other):
        return matmul(self, other)

    # shape
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _apply(Reshape(shape), self)

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _apply(Permute(axes), self)

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise ShapeError(f"T: expected a matrix, got shape {self.shape}")
        return self.permute(1, 0)

    def expand(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _apply(Expand(tuple(shape)), self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _apply(Sum(_norm_axes(axis, self.ndim), keepdims), self)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _norm_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return self.sum(axes, keepdims) * (1.0 / count)

    def exp(self) -> "Tensor":
        return _apply(Exp(), self)

    def log(self) -> "Tensor":
        return _apply(Log(), self)

    def mask_mul(self, mask: np.ndarray) -> "Tensor":
        """Multiply by a constant array of the same shape (no gradient to ``mask``)."""
        return _apply(MaskMul(mask), self)

    def detach(self) -> "Tensor":
        return detach(self)


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tensor(data, precision: str = "f32", requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, precision=precision)


def zeros(shape, precision: str = "f32") -> Tensor:
    return Tensor(np.zeros(shape, dtype=PRECISIONS[precision]))


def detach(t: Tensor) -> Tensor:
    """Same values, no provenance, no gradient flow."""
    return Tensor._wrap(t.data, False)


# ---------------------------------------------------------------------------
# primitive machinery


class Function:
    """One primitive application; ``inputs`` is filled in when recorded."""

    inputs: tuple[Tensor, ...] = ()

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: Tensor) -> tuple[Tensor | None, ...]:
        raise NotImplementedError

    @property
    def name(self) -> str:
        return type(self).__name__


def _apply(fn: Function, *inputs: Tensor) -> Tensor:
    if len(inputs) > 1:
        p = inputs[0].data.dtype
        for t in inputs[1:]:
            if t.data.dtype != p:
                raise PrecisionError(
                    f"{fn.name}: mixed precision {_precision_of(p)} and {t.precision}"
                )
    out = fn.forward(*(t.data for t in inputs))
    track = _recording() and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, track)
    if track:
        fn.inputs = inputs
        result.node = fn
    return result


def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


class Add(Function):
    def forward(self, a, b):
        _same_shape("add", a, b)
        return a + b

    def backward(self, g):
        return g, g


class Sub(Function):
    def forward(self, a, b):
        _same_shape("sub", a, b)
        return a - b

    def backward(self, g):
        return g, -g


class Mul(Function):
    def forward(self, a, b):
        _same_shape("mul", a, b)
        return a * b

    def backward(self, g):
        a, b = self.inputs
        return (g * b if a.requires_grad else None), (g * a if b.requires_grad else None)


class ScalarMul(Function):
    def __init__(self, c: float):
        self.c = c

    def forward(self, a):
        return a * a.dtype.type(self.c)

    def backward(self, g):
        return (g * self.c,)


class AddScalar(Function):
    def __init__(self, c: float):
        self.c = c

    def forward(self, a):
        return a + a.dtype.type(self.c)

    def backward(self, g):
        return (g,)


class PowScalar(Function):
    def __init__(self, p: float):
        self.p = p

    def forward(self, a):
        return np.power(a, a.dtype.type(self.p))

    def backward(self, g):
        (a,) = self.inputs
        return (g * (a ** (self.p - 1.0)) * self.p,)


class Exp(Function):
    def forward(self, a):
        return np.exp(a)

    def backward(self, g):
        (a,) = self.inputs
        return (g * a.exp(),)


class Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, g):
        (a,) = self.inputs
        return (g * a**-1.0,)


class MaskMul(Function):
    def __init__(self, mask: np.ndarray):
        self.mask = mask

    def forward(self, a):
        if self.mask.shape != a.shape:
            raise ShapeError(f"mask_mul: shape mismatch {a.shape} vs {self.mask.shape}")
        if self.mask.dtype != a.dtype:
            self.mask = self.mask.astype(a.dtype)
        return a * self.mask

    def backward(self, g):
        return (g.mask_mul(self.mask),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return a @ b

    def backward(self, g):
        a, b = self.inputs
        ga = matmul(g, b.T) if a.requires_grad else None
        gb = matmul(a.T, g) if b.requires_grad else None
        return ga, gb


class Reshape(Function):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, a):
        try:
            return a.reshape(self.shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {a.shape} to {self.shape}") from None

    def backward(self, g):
        return (g.reshape(self.inputs[0].shape),)


class Permute(Function):
    def __init__(self, axes):
        self.axes = tuple(int(a) for a in axes)

    def forward(self, a):
        if sorted(self.axes) != list(range(a.ndim)):
            raise ShapeError(f"permute: axes {self.axes} invalid for shape {a.shape}")
        return a.transpose(self.axes)

    def backward(self, g):
        return (g.permute(tuple(np.argsort(self.axes))),)


class Sum(Function):
    def __init__(self, axes, keepdims):
        self.axes = axes
        self.keepdims = keepdims

    def forward(self, a):
        return np.asarray(a.sum(axis=self.axes, keepdims=self.keepdims))

    def backward(self, g):
        shape = self.inputs[0].shape
        if not self.keepdims:
            kept = tuple(1 if i in self.axes else s for i, s in enumerate(shape))
            g = g.reshape(kept)
        return (g.expand(shape),)


class Expand(Function):
    def __init__(self, shape):
        self.shape = shape

    def forward(self, a):
        if a.ndim != len(self.shape) or any(
            s != t and s != 1 for s, t in zip(a.shape, self.shape)
        ):
            raise ShapeError(f"expand: cannot expand {a.shape} to {self.shape}")
        return np.broadcast_to(a, self.shape)

    def backward(self, g):
        src = self.inputs[0].shape
        axes = tuple(i for i, (s, t) in enumerate(zip(src, self.shape)) if s != t)
        return (g.sum(axes, keepdims=True) if axes else g,)


# per-channel (last axis) primitives --------------------------------------


def _csum(x: np.ndarray) -> np.ndarray:
    """Sum over every axis but the last (a BLAS row-vector product is much
    faster than ``sum(axis=0)`` for narrow matrices)."""
    flat = x.reshape(-1, x.shape[-1])
    return (np.ones((1, flat.shape[0]), dtype=flat.dtype) @ flat)[0]


def _check_channel(name, x, v):
    if v.ndim != 1 or x.ndim < 1 or x.shape[-1] != v.shape[0]:
        raise ShapeError(f"{name}: per-channel vector {v.shape} does not match input {x.shape}")


class ChannelShift(Function):
    """x + v, with v broadcast along every axis except the last."""

    def forward(self, x, v):
        _check_channel("bias_add", x, v)
        return x + v

    def backward(self, g):
        x, v = self.inputs
        return (g if x.requires_grad else None), (channel_sum(g) if v.requires_grad else None)


class ChannelScale(Function):
    """x * v, with v broadcast along every axis except the last."""

    def forward(self, x, v):
        _check_channel("channel_scale", x, v)
        return x * v

    def backward(self, g):
        x, v = self.inputs
        gx = channel_scale(g, v) if x.requires_grad else None
        gv = channel_sum(g * x) if v.requires_grad else None
        return gx, gv


class ChannelSum(Function):
    def forward(self, x):
        return _csum(x)

    def backward(self, g):
        return (_apply(ChannelBroadcast(self.inputs[0].shape), g),)


class ChannelBroadcast(Function):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, v):
        return np.broadcast_to(v, self.shape)

    def backward(self, g):
        return (channel_sum(g),)


def channel_sum(x: Tensor) -> Tensor:
    return _apply(ChannelSum(), x)


def channel_mean(x: Tensor) -> Tensor:
    return channel_sum(x) * (1.0 / (x.data.size // x.shape[-1]))


def channel_broadcast(v: Tensor, shape) -> Tensor:
    return _apply(ChannelBroadcast(shape), v)


def channel_scale(x: Tensor, v: Tensor) -> Tensor:
    return _apply(ChannelScale(), x, v)


# Rounding error of an f32 mean grows with the mean's magnitude; past this
# many standard deviations a second centering pass is worth its cost.
_RECENTER_RATIO = {np.dtype(np.float32): 4.0, np.dtype(np.float64): 1e6}


def _center(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel centered copy of ``x`` and its biased variance."""
    count = x.dtype.type(x.size // x.shape[-1])
    mean = _csum(x) / count
    xc = x - mean
    var = _csum(xc * xc) / count
    if np.any(np.abs(mean) > _RECENTER_RATIO[x.dtype] * np.sqrt(var)):
        xc -= _csum(xc) / count
        var = _csum(xc * xc) / count
    return xc, var


class BatchNorm(Function):
    """``(x - mean) / sqrt(var + eps) * gamma + beta`` per channel, fused.

    Statistics come from ``x`` itself. Fusing saves passes over the input;
    the recorded backward rebuilds the same quantity from differentiable ops.
    """

    def __init__(self, eps: float):
        self.eps = eps

    def forward(self, x, gamma, beta):
        t = x.dtype.type
        xc, var = _center(x)
        self.inv = (var + t(self.eps)) ** t(-0.5)
        self.xc = xc
        self._xhat = None
        out = xc * (self.inv * gamma)
        out += beta
        return out

    def backward(self, g):
        x, gamma, beta = self.inputs
        if not _recording():
            gd = g.data
            count = gd.dtype.type(gd.size // gd.shape[-1])
            inv, ga = self.inv, gamma.data
            dbeta = _csum(gd)
            dgamma = _csum(gd * self.xc) * inv
            gx = None
            if x.requires_grad:
                scale = ga * inv
                gx = gd * scale
                gx -= scale * (dbeta / count)
                gx -= self.xc * (scale * inv * (dgamma / count))
                gx = Tensor._wrap(gx)
            return (
                gx,
                Tensor._wrap(dgamma) if gamma.requires_grad else None,
                Tensor._wrap(dbeta) if beta.requires_grad else None,
            )
        return (
            _apply(BatchNormInputGrad(self), g, x, gamma) if x.requires_grad else None,
            _apply(BatchNormScaleGrad(self), g, x) if gamma.requires_grad else None,
            channel_sum(g) if beta.requires_grad else None,
        )

    def normalized(self) -> np.ndarray:
        if getattr(self, "_xhat", None) is None:
            self._xhat = self.xc * self.inv
        return self._xhat


def _bn_normalized(x: Tensor, eps: float) -> tuple[Tensor, Tensor]:
    """Normalized ``x`` and its inverse std, composed from differentiable ops."""
    xc = x - channel_broadcast(channel_mean(x), x.shape)
    inv = (channel_mean(xc * xc) + eps) ** -0.5
    return channel_scale(xc, inv), inv


class _BatchNormGrad(Function):
    """Base for the fused pieces of the batch-norm backward.

    Their own backward is closed form; should a further derivative be
    recorded, they differentiate the equivalent composition instead.
    """

    def __init__(self, norm: BatchNorm):
        self.norm = norm

    def composed(self, *inputs: Tensor) -> Tensor:
        raise NotImplementedError

    def backward(self, a):
        if not _recording():
            return self.closed_form(a.data)
        out = self.composed(*self.inputs)
        grads = gradient((out * a).sum(), list(self.inputs), differentiable=True, independent=True)
        return tuple(gr if t.requires_grad else None for t, gr in zip(self.inputs, grads))

    def _moments(self, u):
        """Per-channel mean of ``u`` and of ``u * xhat``."""
        xhat = self.norm.normalized()
        count = u.dtype.type(u.size // u.shape[-1])
        return xhat, count, _csum(u) / count, _csum(u * xhat) / count


class BatchNormInputGrad(_BatchNormGrad):
    """Input gradient of batch norm from the upstream gradient ``u``."""

    def forward(self, u, x, gamma):
        xhat, _, s1, s2 = self._moments(u)
        self.s1, self.s2 = s1, s2
        scale = gamma * self.norm.inv
        out = u * scale
        out -= xhat * (scale * s2)
        out -= scale * s1
        return out

    def composed(self, u, x, gamma):
        xhat, inv = _bn_normalized(x, self.norm.eps)
        gh = channel_scale(u, gamma)
        mean_g = channel_broadcast(channel_mean(gh), x.shape)
        return channel_scale(gh - mean_g - channel_scale(xhat, channel_mean(gh * xhat)), inv)

    def closed_form(self, a):
        u_t, x_t, gamma_t = self.inputs
        u, gamma, inv = u_t.data, gamma_t.data, self.norm.inv
        xhat = self.norm.normalized()
        count = a.dtype.type(a.size // a.shape[-1])
        s1, s2 = self.s1, self.s2
        sum_a = _csum(a)
        a_xhat = _csum(a * xhat) / count
        k = _csum(a * u) - s1 * sum_a - s2 * a_xhat * count
        gu = gx = gg = None
        if u_t.requires_grad:
            scale = gamma * inv
            gu = a * scale
            gu -= xhat * (scale * a_xhat)
            gu -= scale * (sum_a / count)
            gu = Tensor._wrap(gu)
        if x_t.requires_grad:
            # d/dx of gamma*inv*(u - mean u - xhat*mean(u*xhat)) against a
            c = -gamma * inv * inv
            gx = xhat * (c * (k / count - 2 * s2 * a_xhat))
            gx += a * (c * s2)
            gx += u * (c * a_xhat)
            gx -= c * (s2 * sum_a / count + a_xhat * s1)
            gx = Tensor._wrap(gx)
        if gamma_t.requires_grad:
            gg = Tensor._wrap(inv * k)
        return gu, gx, gg


class BatchNormScaleGrad(_BatchNormGrad):
    """Gradient of batch norm's per-channel scale: ``sum(u * xhat)``."""

    def forward(self, u, x):
        xhat, _, s1, s2 = self._moments(u)
        self.s1, self.s2 = s1, s2
        return _csum(u * xhat)

    def composed(self, u, x):
        return channel_sum(u * _bn_normalized(x, self.norm.eps)[0])

    def closed_form(self, a):
        u_t, x_t = self.inputs
        xhat = self.norm.normalized()
        gu = Tensor._wrap(xhat * a) if u_t.requires_grad else None
        gx = None
        if x_t.requires_grad:
            c = a * self.norm.inv
            gx = u_t.data * c
            gx -= xhat * (c * self.s2)
            gx -= c * self.s1
            gx = Tensor._wrap(gx)
        return gu, gx


# convolution ---------------------------------------------------------------


class Im2Col(Function):
    """(N,H,W,C) -> (N*Ho*Wo, kh*kw*C) patches, zero padded, stride 1."""

    def __init__(self, kh, kw, pad, source=None, result=None):
        self.kh, self.kw, self.pad = kh, kw, pad
        self._source, self._result = source, result

    def forward(self, x):
        if x is self._source:
            return self._result
        return _im2col(x, self.kh, self.kw, self.pad)

    def backward(self, g):
        return (_apply(Col2Im(self.inputs[0].shape, self.kh, self.kw, self.pad), g),)


class Col2Im(Function):
    """Adjoint of :class:`Im2Col`: scatter-add patches back to an image."""

    def __init__(self, x_shape, kh, kw, pad):
        self.x_shape, self.kh, self.kw, self.pad = tuple(x_shape), kh, kw, pad

    def forward(self, cols):
        return _col2im(cols, self.x_shape, self.kh, self.kw, self.pad)

    def backward(self, g):
        return (_apply(Im2Col(self.kh, self.kw, self.pad), g),)


class Conv2d(Function):
    """Stride-1 cross-correlation of ``(N,H,W,C)`` with a ``(kh,kw,C,O)`` kernel.

    The input gradient is itself a correlation of the output gradient with
    the flipped, channel-swapped kernel whenever the geometry allows it
    (padding ``k - 1 - pad`` is supported), which is much cheaper than
    scattering a ``kh*kw``-wide patch gradient back onto the image.
    """

    def __init__(self, pad):
        self.pad = pad

    def forward(self, x, w):
        kh, kw, c, o = w.shape
        self.cols = _im2col(x, kh, kw, self.pad)
        out = self.cols @ w.reshape(kh * kw * c, o)
        n, h, wd, _ = x.shape
        return out.reshape(n, h + 2 * self.pad - kh + 1, wd + 2 * self.pad - kw + 1, o)

    def _transposable(self, w_shape) -> bool:
        kh, kw = w_shape[:2]
        return kh == kw and kh - 1 - self.pad in (0, 1)

    def backward(self, g):
        x, w = self.inputs
        kh, kw, c, o = w.shape
        if not _recording():
            gd = g.data
            g2 = gd.reshape(-1, o)
            gw = Tensor._wrap((self.cols.T @ g2).reshape(w.shape)) if w.requires_grad else None
            gx = None
            if x.requires_grad:
                if self._transposable(w.shape):
                    flipped = _flip_kernel(w.data).reshape(kh * kw * o, c)
                    gx = (_im2col(gd, kh, kw, kh - 1 - self.pad) @ flipped).reshape(x.shape)
                else:
                    gx = _col2im(g2 @ w.data.reshape(kh * kw * c, o).T, x.shape, kh, kw, self.pad)
                gx = Tensor._wrap(gx)
            return gx, gw
        g2 = g.reshape(-1, o)
        gw = gx = None
        if w.requires_grad:
            cols = _apply(Im2Col(kh, kw, self.pad, x.data, self.cols), x)
            gw = matmul(cols.T, g2).reshape(w.shape)
        if x.requires_grad:
            if self._transposable(w.shape):
                gx = _apply(Conv2d(kh - 1 - self.pad), g, _apply(KernelFlip(), w))
            else:
                cols_grad = matmul(g2, w.reshape(kh * kw * c, o).T)
                gx = _apply(Col2Im(x.shape, kh, kw, self.pad), cols_grad)
        return gx, gw


def _flip_kernel(w: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))


class KernelFlip(Function):
    """Rotate a ``(kh,kw,C,O)`` kernel by 180 degrees and swap C with O.

    The map is a linear involution whose adjoint is itself.
    """

    def forward(self, w):
        return _flip_kernel(w)

    def backward(self, g):
        return (_apply(KernelFlip(), g),)


def _im2col(x, kh, kw, pad):
    n, h, w, c = x.shape
    if kh == kw == 1 and not pad:
        return x.reshape(n * h * w, c)
    if pad:
        padded = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
        padded[:, pad : pad + h, pad : pad + w, :] = x
        x = padded
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    ho, wo = win.shape[1], win.shape[2]
    # (N, Ho, Wo, C, kh, kw) -> (N, Ho, Wo, kh, kw, C)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


def _col2im(cols, x_shape, kh, kw, pad):
    n, h, w, c = x_shape
    if kh == kw == 1 and not pad:
        return cols.reshape(x_shape)
    hp, wp = h + 2 * pad, w + 2 * pad
    ho, wo = hp - kh + 1, wp - kw + 1
    patches = cols.reshape(n, ho, wo, kh, kw, c)
    if (ho, wo) == (h, w):
        # "same" convolution: every tap lands on a shifted window of the
        # unpadded image, so accumulate clipped windows in place
        out = patches[:, :, :, pad, pad, :].copy()
        for i in range(kh):
            for j in range(kw):
                if i == pad and j == pad:
                    continue
                dy, dx = i - pad, j - pad
                src_y, dst_y = _shift_slices(dy, h)
                src_x, dst_x = _shift_slices(dx, w)
                out[:, dst_y, dst_x, :] += patches[:, src_y, src_x, i, j, :]
        return out
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + ho, j : j + wo, :] += patches[:, :, :, i, j, :]
    if pad:
        out = out[:, pad : pad + h, pad : pad + w, :]
    return out


def _shift_slices(d: int, size: int) -> tuple[slice, slice]:
    """Source/destination ranges for output index ``o`` feeding input ``o + d``."""
    if d >= 0:
        return slice(0, size - d), slice(d, size)
    return slice(-d, size), slice(0, size + d)


class PoolSelect(Function):
    """Pick one entry per pooling window using a fixed one-hot window mask.

    ``mask`` has shape ``(N, Ho, k, Wo, k, C)``; the op is linear in its input.
    """

    def __init__(self, mask: np.ndarray, source=None, result=None):
        self.mask = mask
        self._source, self._result = source, result

    def forward(self, x):
        if x is self._source:
            return self._result
        n, ho, k, wo, _, c = self.mask.shape
        v = x[:, : ho * k, : wo * k, :].reshape(self.mask.shape)
        return (v * self.mask).sum(axis=(2, 4))

    def backward(self, g):
        return (_apply(PoolSpread(self.mask, self.inputs[0].shape), g),)


class PoolSpread(Function):
    """Adjoint of :class:`PoolSelect`: route each value back to its window slot."""

    def __init__(self, mask: np.ndarray, x_shape):
        self.mask = mask
        self.x_shape = tuple(x_shape)

    def forward(self, g):
        n, ho, k, wo, _, c = self.mask.shape
        spread = (g[:, :, None, :, None, :] * self.mask).reshape(n, ho * k, wo * k, c)
        if spread.shape == self.x_shape:
            return spread
        out = np.zeros(self.x_shape, dtype=g.dtype)
        out[:, : ho * k, : wo * k, :] = spread
        return out

    def backward(self, g):
        return (_apply(PoolSelect(self.mask), g),)


def _pool_mask(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """One-hot window mask (first maximal slot in row-major order) and the max."""
    n, h, w, c = x.shape
    ho, wo = h // k, w // k
    slots = [x[:, i : ho * k : k, j : wo * k : k, :] for i in range(k) for j in range(k)]
    best = slots[0]
    for v in slots[1:]:
        best = np.maximum(best, v)
    windows = x[:, : ho * k, : wo * k, :].reshape(n, ho, k, wo, k, c)
    hit = windows == best[:, :, None, :, None, :]
    if np.count_nonzero(hit) == best.size:
        return hit.astype(x.dtype), best
    # some window has several maximal slots: keep the first in row-major order
    mask = np.zeros((n, ho, k, wo, k, c), dtype=x.dtype)
    taken = np.zeros(best.shape, dtype=bool)
    for idx in range(k * k):
        cur = hit[:, :, idx // k, :, idx % k, :] & ~taken
        taken |= cur
        mask[:, :, idx // k, :, idx % k, :] = cur
    return mask, best


# ---------------------------------------------------------------------------
# public primitive set


def add(a: Tensor, b: Tensor) -> Tensor:
    return a + b


def sub(a: Tensor, b: Tensor) -> Tensor:
    return a - b


def scalar_mul(a: Tensor, c: float) -> Tensor:
    return a * c


def residual_add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"residual_add: shape mismatch {x.shape} vs {y.shape}")
    return x + y


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _apply(MatMul(), a, b)


def _tracked(x: Tensor) -> bool:
    return x.requires_grad and _recording()


def relu(x: Tensor) -> Tensor:
    if not _tracked(x):
        return Tensor._wrap(np.maximum(x.data, 0), False)
    return x.mask_mul((x.data > 0).astype(x.data.dtype))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    return x.mask_mul(np.where(x.data > 0, 1.0, slope).astype(x.data.dtype))


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], int(np.prod(x.shape[1:])))


def mean(x: Tensor) -> Tensor:
    return x.mean()


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias along the last axis of ``x``."""
    return _apply(ChannelShift(), x, b)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` of shape (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = matmul(x, w.T)
    return bias_add(out, b) if b is not None else out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``(N,H,W,C)`` input with a ``(kh,kw,C,O)`` kernel."""
    if stride != 1:
        raise ValueError(f"conv2d: only stride 1 is supported, got {stride}")
    if padding not in (0, 1):
        raise ValueError(f"conv2d: padding must be 0 or 1, got {padding}")
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    n, h, wd, _ = x.shape
    kh, kw, c, o = w.shape
    ho, wo = h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    return _apply(Conv2d(padding), x, w)


def max_pool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pool over (H, W) of ``(N,H,W,C)``.

    Trailing rows/cols that do not fill a window are dropped; ties go to the
    first position in row-major window order.
    """
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected (N,H,W,C) input, got {x.shape}")
    n, h, w, c = x.shape
    ho, wo = h // window, w // window
    if ho < 1 or wo < 1:
        raise ShapeError(f"max_pool2d: window {window} larger than input {x.shape}")
    if not _tracked(x):
        best = x.data[:, 0 : ho * window : window, 0 : wo * window : window, :]
        for i, j in itertools.product(range(window), repeat=2):
            if i or j:
                best = np.maximum(best, x.data[:, i : ho * window : window, j : wo * window : window, :])
        return Tensor._wrap(best if window > 1 else best.copy(), False)
    mask, best = _pool_mask(x.data, window)
    return _apply(PoolSelect(mask, x.data, best), x)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize with the statistics of ``x`` itself (never running averages).

    Channels are the last axis; statistics pool every other axis. Variance is
    the biased (population) estimate.
    """
    if x.ndim < 2:
        raise ShapeError(f"batch_norm: expected a batched input, got {x.shape}")
    if x.shape[0] < 2:
        raise ValueError(f"batch_norm: batch size must be >= 2, got {x.shape[0]}")
    if eps < 0:
        raise ValueError(f"batch_norm: eps must be non-negative, got {eps}")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"batch_norm: gamma {gamma.shape} / beta {beta.shape} do not match input {x.shape}"
        )
    return _apply(BatchNorm(eps), x, gamma, beta)


def log_softmax(logits: Tensor) -> Tensor:
    if logits.ndim != 2:
        raise ShapeError(f"log_softmax: expected (N, classes), got {logits.shape}")
    shift = Tensor._wrap(logits.data.max(axis=1, keepdims=True), False)
    z = logits - shift.expand(logits.shape)
    lse = z.exp().sum(1, keepdims=True).log()
    return z - lse.expand(z.shape)


def softmax(logits: Tensor) -> Tensor:
    return log_softmax(logits).exp()


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("softmax_cross_entropy: label out of range")
    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    onehot[np.arange(labels.size), labels] = 1
    return log_softmax(logits).mask_mul(onehot).sum() * (-1.0 / labels.size)


# ---------------------------------------------------------------------------
# differentiation


def trace(output: Tensor) -> list[Tensor]:
    """Topologically ordered tensors reachable from ``output`` (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(output, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if id(inp) not in seen:
                    stack.append((inp, False))
    return order


def replay(output: Tensor, leaves: dict[int, np.ndarray] | None = None) -> np.ndarray:
    """Re-execute the record behind ``output``.

    ``leaves`` maps ``id(tensor)`` of leaf tensors to replacement values;
    unlisted leaves keep their data. Shape-dependent bookkeeping (pooling
    indices, relu masks) is taken from the original run.
    """
    values: dict[int, np.ndarray] = {}
    leaves = leaves or {}
    for t in trace(output):
        if t.node is None:
            values[id(t)] = leaves.get(id(t), t.data)
        else:
            values[id(t)] = t.node.forward(*(values[id(i)] for i in t.node.inputs))
    return values[id(output)]


def gradient(
    loss: Tensor, params: Sequence[Tensor], differentiable: bool = False, independent: bool = False
) -> list[Tensor]:
    """d(loss)/d(p) for each p in ``params``.

    Args:
        loss: scalar tensor.
        params: tensors to differentiate with respect to. They may be
            interior nodes, e.g. parameters produced by an earlier inner step.
        differentiable: record the backward pass so the results carry
            provenance and can be differentiated again.
        independent: treat ``params`` as independent variables and return
            partial derivatives; paths from one param through another are
            not followed.

    Returns:
        One tensor per param. A param the loss does not reach gets zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"gradient: loss must be a scalar, got shape {loss.shape}")
    targets = {id(p) for p in params}
    order = trace(loss)
    # only propagate into tensors that lie on a path from some param
    relevant: set[int] = set()
    for t in order:
        if id(t) in targets or (
            t.node is not None and any(id(i) in relevant for i in t.node.inputs)
        ):
            relevant.add(id(t))

    grads: dict[int, Tensor] = {}
    if id(loss) in relevant:
        grads[id(loss)] = Tensor._wrap(np.ones_like(loss.data), False)
    ctx = contextlib.nullcontext() if differentiable else no_record()
    with ctx:
        for t in reversed(order):
            g = grads.get(id(t))
            if g is None or t.node is None:
                continue
            if id(t) not in targets:
                del grads[id(t)]
            elif independent:
                continue
            for inp, gi in zip(t.node.inputs, t.node.backward(g)):
                if gi is None or id(inp) not in relevant:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi

    out = []
    for p in params:
        g = grads.get(id(p))
        if g is None:
            g = Tensor._wrap(np.zeros_like(p.data), False)
        elif not differentiable:
            g = detach(g)
        out.append(g)
    return out


# ---------------------------------------------------------------------------
# tensor archive ("MLT1")

MAGIC = b"MLT1"


def encode_archive(array) -> bytes:
    """Magic, u32 rank, u32 dims, then little-endian f32 values."""
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    head = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def write_archive(target, array) -> None:
    payload = encode_archive(array)
    if isinstance(target, (str, os.PathLike)):
        with open(target, "wb") as fh:
            fh.write(payload)
    else:
        target.write(payload)


def read_archive(source) -> np.ndarray:
    """Inverse of :func:`write_archive`; returns a float32 array."""
    if isinstance(source, (bytes, bytearray)):
        return _decode(io.BytesIO(source))
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            try:
                return _decode(fh)
            except ValueError as exc:
                raise ValueError(f"{os.fspath(source)}: {exc}") from None
    return _decode(source)


def _read_exact(fh, n):
    b = fh.read(n)
    if len(b) != n:
        raise ValueError("truncated tensor archive")
    return b


def _decode(fh) -> np.ndarray:
    if _read_exact(fh, 4) != MAGIC:
        raise ValueError("not a tensor archive (bad magic)")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
    return data.astype(np.float32).reshape(dims)
