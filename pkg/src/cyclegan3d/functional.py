"""Differentiable operators over :class:`~cyclegan3d.tensor.Tensor`.

Convolutions use the cross-correlation convention with weights laid out as
(c_out, c_in, kd, kh, kw); transposed convolutions take (c_in, c_out, kd, kh, kw),
the same array as the convolution they are the adjoint of.  No implicit
broadcasting: elementwise binaries need equal shapes unless one side is a scalar.
"""
from __future__ import annotations

import numpy as np
from scipy import fft as sfft

from . import kernels
from .tensor import Tensor, as_tensor

AXES = ("depth", "height", "width")

# column matrices are built in depth slabs of at most SLAB_BYTES; a conv keeps its
# columns for backward only when they fit in KEEP_COLS_BYTES, else recomputes them
SLAB_BYTES = 64 * 2**20
KEEP_COLS_BYTES = 4 * 2**20
# stride-1 convs with at least this many taps go through the FFT path
FFT_MIN_TAPS = 125


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the offending axis."""


def _triple(v, label):
    if np.isscalar(v):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"{label} must have 3 entries (depth, height, width), got {v}")
    return v


def _check_5d(x, label="input"):
    if x.ndim != 5:
        raise ShapeError(f"{label} must be 5-D (n, c, d, h, w), got shape {x.shape}")


def _scalar_like(value, ref):
    return np.asarray(value, dtype=ref.dtype)


# ---------------------------------------------------------------- elementwise

def _binary_shapes(a, b, op):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def add(a, b):
    if not isinstance(b, Tensor):
        b = Tensor(_scalar_like(b, a.data))
    if not isinstance(a, Tensor):
        a = Tensor(_scalar_like(a, b.data))
    _binary_shapes(a, b, "add")
    return Tensor.from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    if not isinstance(b, Tensor):
        b = Tensor(_scalar_like(b, a.data))
    _binary_shapes(a, b, "sub")
    return Tensor.from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    if not isinstance(b, Tensor):
        s = _scalar_like(b, a.data)
        return Tensor.from_op(a.data * s, (a,), lambda g: (g * s,))
    _binary_shapes(a, b, "mul")
    return Tensor.from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(x):
    return Tensor.from_op(-x.data, (x,), lambda g: (-g,))


def relu(x):
    mask = x.data > 0
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x, slope=0.2):
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return Tensor.from_op(x.data * scale, (x,), lambda g: (g * scale,))


def tanh(x):
    y = np.tanh(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * (1 - y * y),))


def abs(x):  # noqa: A001
    sign = np.sign(x.data)
    return Tensor.from_op(np.abs(x.data), (x,), lambda g: (g * sign,))


def sum(x):  # noqa: A001
    return Tensor.from_op(
        np.asarray(x.data.sum(), dtype=x.dtype), (x,),
        lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x):
    n = x.size
    return Tensor.from_op(
        np.asarray(x.data.mean(), dtype=x.dtype), (x,),
        lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def l1_distance(a, b):
    """Mean absolute difference; the L1 terms of every loss are means."""
    if a.shape != b.shape:
        raise ShapeError(f"l1_distance: shape mismatch {a.shape} vs {b.shape}")
    return mean(abs(sub(a, b)))


def repeat_channels(x, k):
    """Tile a single-channel volume to ``k`` identical channels."""
    _check_5d(x)
    if x.shape[1] != 1:
        raise ShapeError(f"repeat_channels expects 1 channel, got {x.shape[1]}")
    return Tensor.from_op(
        np.repeat(x.data, k, axis=1), (x,),
        lambda g: (g.sum(axis=1, keepdims=True),))


def channel_mean(x):
    """Average channels down to one (the RGB to gray adapter)."""
    _check_5d(x)
    c = x.shape[1]
    return Tensor.from_op(
        x.data.mean(axis=1, keepdims=True), (x,),
        lambda g: (np.repeat(g / c, c, axis=1),))


def bce_with_logits(logits, target):
    """Mean binary cross-entropy on raw logits, in the overflow-free form."""
    z = logits.data
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=z.dtype)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("bce targets must lie in [0, 1]")
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    sig = _sigmoid(z)

    def backward(g):
        return ((sig - t) * (g / n)).astype(z.dtype, copy=False),

    return Tensor.from_op(np.asarray(loss.mean(), dtype=z.dtype), (logits,), backward)


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e))


# ------------------------------------------------------------------ padding

def reflection_pad3d(x, pad):
    """Mirror-pad depth, height and width without repeating the edge voxel."""
    _check_5d(x)
    pad = _triple(pad, "pad")
    for axis, (p, size) in enumerate(zip(pad, x.shape[2:])):
        if p < 0:
            raise ValueError(f"negative pad on {AXES[axis]}")
        if p >= size:
            raise ShapeError(f"reflect pad {p} must be < {AXES[axis]} extent {size}")
    if pad == (0, 0, 0):
        return x
    widths = ((0, 0), (0, 0)) + tuple((p, p) for p in pad)
    out = np.pad(x.data, widths, mode="reflect")

    def backward(g):
        for axis, p in enumerate(pad):
            g = _reflect_fold(g, axis + 2, p)
        return (g,)

    return Tensor.from_op(out, (x,), backward)


def _reflect_fold(g, axis, p):
    if p == 0:
        return g
    g = np.moveaxis(g, axis, 0)
    n = g.shape[0] - 2 * p
    core = g[p:p + n].copy()
    core[1:p + 1] += g[:p][::-1]
    core[n - 1 - p:n - 1] += g[p + n:][::-1]
    return np.moveaxis(core, 0, axis)


def _zero_pad(data, pad):
    if pad == (0, 0, 0):
        return data
    return np.pad(data, ((0, 0), (0, 0)) + tuple((p, p) for p in pad))


def _depth_slabs(out_sp, row_bytes_per_voxel, kd, sd):
    """Split output depth into runs whose column matrix stays under SLAB_BYTES.

    Each run is (a, b, lo, hi): output planes [a, b) read input planes [lo, hi).
    At least one output plane per run.
    """
    plane_bytes = row_bytes_per_voxel * out_sp[1] * out_sp[2]
    per = max(1, SLAB_BYTES // max(plane_bytes, 1))
    runs = []
    for a in range(0, out_sp[0], per):
        b = min(out_sp[0], a + per)
        runs.append((a, b, a * sd, (b - 1) * sd + kd))
    return runs


def _crop(data, pad):
    pd, ph, pw = pad
    d, h, w = data.shape[2:]
    return data[:, :, pd:d - pd, ph:h - ph, pw:w - pw]


# ------------------------------------------------------------ convolutions

def conv_output_shape(size, kernel, stride, padding):
    """Per-axis output extent floor((in + 2p - k)/s) + 1."""
    return tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(size, kernel, stride, padding))


def conv_transpose_output_shape(size, kernel, stride, padding, output_padding=(0, 0, 0)):
    """Per-axis output extent (in - 1)*s - 2p + k + output_padding."""
    return tuple((n - 1) * s - 2 * p + k + op
                 for n, k, s, p, op in zip(size, kernel, stride, padding, output_padding))


def conv3d(x, weight, bias=None, stride=1, padding=0, pad_mode="zeros", method="auto"):
    """3D cross-correlation of (n, c_in, d, h, w) with (c_out, c_in, kd, kh, kw).

    ``method`` picks im2col + matmul or a frequency-domain product; "auto" uses
    the FFT for stride-1 kernels with many taps (the 7x7x7 stem and head),
    where column matrices would be large and memory-bound.
    """
    if method not in ("auto", "im2col", "fft"):
        raise ValueError(f"unknown conv method {method!r}")
    _check_5d(x)
    _check_5d(weight, "weight")
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    c_out, c_in = weight.shape[:2]
    kernel = weight.shape[2:]
    if x.shape[1] != c_in:
        raise ShapeError(f"channel axis: input has {x.shape[1]} channels, weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}")
    if pad_mode == "reflect":
        x = reflection_pad3d(x, padding)
        padding = (0, 0, 0)
    elif pad_mode != "zeros":
        raise ValueError(f"unknown pad_mode {pad_mode!r}")
    for axis, (n, k, p) in enumerate(zip(x.shape[2:], kernel, padding)):
        if n + 2 * p < k:
            raise ShapeError(f"{AXES[axis]} axis: padded extent {n + 2 * p} < kernel {k}")

    taps = kernel[0] * kernel[1] * kernel[2]
    if method == "fft" or (method == "auto" and stride == (1, 1, 1) and taps >= FFT_MIN_TAPS):
        if stride != (1, 1, 1):
            raise ValueError("the FFT path needs stride 1")
        return _conv3d_fft(x, weight, bias, padding)

    n = x.shape[0]
    xp = _zero_pad(x.data, padding)
    out_sp = conv_output_shape(x.shape[2:], kernel, stride, padding)
    w2 = weight.data.reshape(c_out, -1)
    slabs = _depth_slabs(out_sp, w2.shape[1] * n * xp.itemsize, kernel[0], stride[0])
    plane = out_sp[1] * out_sp[2]
    out = np.empty((n, c_out, out_sp[0] * plane), dtype=np.result_type(xp, w2))
    kept = []
    for a, b, lo, hi in slabs:
        cols = kernels.vol2col(xp[:, :, lo:hi], kernel, stride, (b - a,) + out_sp[1:])
        np.matmul(w2, cols, out=out[:, :, a * plane:b * plane])
        if len(slabs) == 1 and cols.nbytes <= KEEP_COLS_BYTES:
            kept.append(cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape((n, c_out) + out_sp)

    def backward(g):
        g2 = g.reshape(n, c_out, -1)
        gw = np.zeros((c_out, w2.shape[1]), dtype=g2.dtype) if weight.requires_grad else None
        gxp = np.zeros(xp.shape, dtype=g2.dtype) if x.requires_grad else None
        for a, b, lo, hi in slabs:
            sub_sp = (b - a,) + out_sp[1:]
            c = kept[0] if kept else kernels.vol2col(xp[:, :, lo:hi], kernel, stride, sub_sp)
            gs = g2[:, :, a * plane:b * plane]
            if gw is not None:
                for i in range(n):
                    gw += gs[i] @ c[i].T
            if gxp is not None:
                dcols = np.matmul(w2.T, gs)
                gxp[:, :, lo:hi] += kernels.col2vol(dcols, xp[:, :, lo:hi].shape, kernel, stride, sub_sp)
        gx = _crop(gxp, padding) if gxp is not None else None
        gw = gw.reshape(weight.shape) if gw is not None else None
        gb = g2.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


def _conv3d_fft(x, weight, bias, padding):
    """Stride-1 cross-correlation as a circular convolution on a zero-padded grid.

    Valid outputs sit at offset k-1 of the circular result and never wrap, as
    long as the transform size is at least the padded input extent.
    """
    xp = _zero_pad(x.data, padding)
    dtype = np.result_type(xp, weight.data)
    sp = xp.shape[2:]
    kernel = weight.shape[2:]
    out_sp = tuple(m - k + 1 for m, k in zip(sp, kernel))
    size = tuple(sfft.next_fast_len(m, real=True) for m in sp)
    axes = (2, 3, 4)
    X = sfft.rfftn(xp, s=size, axes=axes)
    Wflip = sfft.rfftn(weight.data[:, :, ::-1, ::-1, ::-1], s=size, axes=axes)
    Y = np.einsum("ncdhw,ocdhw->nodhw", X, Wflip)
    lead = tuple(slice(k - 1, k - 1 + m) for k, m in zip(kernel, out_sp))
    out = sfft.irfftn(Y, s=size, axes=axes)[(Ellipsis,) + lead].astype(dtype)
    if bias is not None:
        out += bias.data[None, :, None, None, None]
    del Y

    def backward(g):
        gx = gw = gb = None
        G = sfft.rfftn(g, s=size, axes=axes)
        if x.requires_grad:
            # full convolution of g with the unflipped kernel
            W = sfft.rfftn(weight.data, s=size, axes=axes)
            gxp = sfft.irfftn(np.einsum("nodhw,ocdhw->ncdhw", G, W), s=size, axes=axes)
            gx = _crop(gxp[(Ellipsis,) + tuple(slice(0, m) for m in sp)], padding).astype(dtype)
        if weight.requires_grad:
            Gflip = sfft.rfftn(g[:, :, ::-1, ::-1, ::-1], s=size, axes=axes)
            r = sfft.irfftn(np.einsum("ncdhw,nodhw->ocdhw", X, Gflip), s=size, axes=axes)
            lag = tuple(slice(m - 1, m - 1 + k) for m, k in zip(out_sp, kernel))
            gw = r[(Ellipsis,) + lag].astype(dtype)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(np.ascontiguousarray(out), parents, backward)


def conv_transpose3d(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    """Fractionally strided convolution; the input-gradient operator of :func:`conv3d`."""
    _check_5d(x)
    _check_5d(weight, "weight")
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    output_padding = _triple(output_padding, "output_padding")
    c_in, c_out = weight.shape[:2]
    kernel = weight.shape[2:]
    if x.shape[1] != c_in:
        raise ShapeError(f"channel axis: input has {x.shape[1]} channels, weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}")
    for axis, (op, s) in enumerate(zip(output_padding, stride)):
        if op >= s:
            raise ShapeError(f"{AXES[axis]} axis: output_padding {op} must be < stride {s}")
    in_sp = x.shape[2:]
    out_sp = conv_transpose_output_shape(in_sp, kernel, stride, padding, output_padding)
    for axis, m in enumerate(out_sp):
        if m < 1:
            raise ShapeError(f"{AXES[axis]} axis: transposed output extent {m} < 1")

    n = x.shape[0]
    full_sp = tuple(m + 2 * p for m, p in zip(out_sp, padding))
    x2 = x.data.reshape(n, c_in, -1)
    w2 = weight.data.reshape(c_in, -1)
    cols = np.matmul(w2.T, x2)
    full = kernels.col2vol(cols, (n, c_out) + full_sp, kernel, stride, in_sp)
    del cols
    out = np.ascontiguousarray(_crop(full, padding))
    if bias is not None:
        out += bias.data[None, :, None, None, None]

    def backward(g):
        gfull = _zero_pad(g, padding)
        gcols = kernels.vol2col(gfull, kernel, stride, in_sp)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(w2, gcols).reshape(x.shape)
        if weight.requires_grad:
            gw = np.einsum("nil,nkl->ik", x2, gcols) if n > 1 else x2[0] @ gcols[0].T
            gw = gw.reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


# ------------------------------------------------------------ normalization

def instance_norm3d(x, gamma, beta, eps=1e-5):
    """Normalize each (sample, channel) over depth, height and width."""
    _check_5d(x)
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    axes = (2, 3, 4)
    m = x.shape[2] * x.shape[3] * x.shape[4]
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    g_ = gamma.data[None, :, None, None, None]
    out = xhat * g_ + beta.data[None, :, None, None, None]

    def backward(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            dxhat = g * g_
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = (inv_std / m) * (m * dxhat - s1 - xhat * s2)
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=(0, 2, 3, 4))
        if beta.requires_grad:
            gbeta = g.sum(axis=(0, 2, 3, 4))
        return gx, ggamma, gbeta

    return Tensor.from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


# -------------------------------------------------------- spatial gradient

def spatial_gradient(x):
    """Forward differences along depth, height, width stacked on the channel axis.

    The trailing face of each axis is zero.  Output has 3*c channels ordered
    [depth block, height block, width block].
    """
    _check_5d(x)
    for axis, size in enumerate(x.shape[2:]):
        if size < 2:
            raise ShapeError(f"spatial_gradient needs {AXES[axis]} >= 2, got {size}")
    parts = []
    for axis in (2, 3, 4):
        d = np.zeros_like(x.data)
        src = np.moveaxis(x.data, axis, 0)
        np.moveaxis(d, axis, 0)[:-1] = src[1:] - src[:-1]
        parts.append(d)
    c = x.shape[1]

    def backward(g):
        gx = np.zeros_like(x.data)
        for i, axis in enumerate((2, 3, 4)):
            gi = np.moveaxis(g[:, i * c:(i + 1) * c], axis, 0)[:-1]
            dst = np.moveaxis(gx, axis, 0)
            dst[1:] += gi
            dst[:-1] -= gi
        return (gx,)

    return Tensor.from_op(np.concatenate(parts, axis=1), (x,), backward)


__all__ = [
    "ShapeError", "add", "sub", "mul", "neg", "relu", "leaky_relu", "tanh", "abs",
    "sum", "mean", "l1_distance", "repeat_channels", "channel_mean", "bce_with_logits",
    "reflection_pad3d", "conv3d", "conv_transpose3d", "conv_output_shape",
    "conv_transpose_output_shape", "instance_norm3d", "spatial_gradient", "as_tensor",
]
