"""Differentiable operator suite.

Every op takes and returns :class:`Tensor` objects and registers an adjoint
closure when any input requires grad.  Contractions and normalisations
report their cost to the active :func:`count_flops` context.
"""

import math

import numpy as np
from scipy.special import erf

from . import kernels
from .core import DimensionError, Tensor, as_tensor, make_result, record_flops

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), adjoint, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), adjoint, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def adjoint(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), adjoint, "mul")


def scale(a, s):
    s = float(s)
    return make_result(a.data * s, (a,), lambda g: (g * s,), "scale")


def gelu(x):
    """Exact (erf) GELU: ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def adjoint(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make_result(x.data * cdf, (x,), adjoint, "gelu")


def layer_norm(x, gamma=None, beta=None, eps=1e-6):
    """Normalise over the last (channel) axis, then apply the optional affine."""
    if not eps > 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    c = x.shape[-1]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.shape != (c,):
            raise DimensionError(f"layer_norm {name} shape {p.shape} != ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    y = xhat if gamma is None else xhat * gamma.data
    if beta is not None:
        y = y + beta.data
    record_flops("layer_norm", elementwise=5 * x.size)
    lead = tuple(range(x.ndim - 1))

    def adjoint(g):
        gx_hat = g if gamma is None else g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        gg = None if gamma is None else (g * xhat).sum(axis=lead)
        gb = None if beta is None else g.sum(axis=lead)
        return gx, gg, gb

    parents = (x, gamma if gamma is not None else Tensor(0.0), beta if beta is not None else Tensor(0.0))
    return make_result(y, parents, adjoint, "layer_norm")


def softmax_lastdim(x, mask=None):
    """Softmax over the last axis with max subtraction.

    ``mask`` (boolean, broadcastable to ``x``) marks admissible entries;
    masked entries get weight 0 and a row with no admissible entry is all 0.
    """
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("softmax needs a last axis of extent >= 1")
    data = x.data
    if mask is None:
        m = data.max(axis=-1, keepdims=True)
        e = np.exp(data - m)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), data.shape)
        masked = np.where(mask, data, -np.inf)
        m = masked.max(axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(mask, np.exp(np.where(mask, data, m) - m), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)
    record_flops("softmax", elementwise=5 * x.size)

    def adjoint(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), adjoint, "softmax")


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Batched ``a[..., m, k] @ b[..., k, n]`` with broadcast leading extents."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot contract {a.shape} with {b.shape}")
    try:
        lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} differ") from None
    m, k = a.shape[-2:]
    n = b.shape[-1]
    record_flops("matmul", macs=int(np.prod(lead, dtype=np.int64)) * m * n * k)

    def adjoint(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, (a, b), adjoint, "matmul")


def _spatial_args(x, kernel_shape, stride, padding, op):
    rank = len(kernel_shape)
    if rank not in (2, 3) or x.ndim != rank + 2:
        raise DimensionError(f"{op}: expected (N, C, *spatial) with spatial rank 2 or 3, got {x.shape}")
    stride = (stride,) * rank if np.isscalar(stride) else tuple(int(s) for s in stride)
    padding = (padding,) * rank if np.isscalar(padding) else tuple(int(p) for p in padding)
    if len(stride) != rank or len(padding) != rank or min(stride) < 1 or min(padding) < 0:
        raise DimensionError(f"{op}: bad stride {stride} / padding {padding} for rank {rank}")
    out = []
    for n, k, s, p in zip(x.shape[2:], kernel_shape, stride, padding):
        if k > n + 2 * p:
            raise DimensionError(f"{op}: kernel {tuple(kernel_shape)} larger than padded input {x.shape[2:]}")
        out.append(kernels.out_extent(n, k, s, p))
    return rank, stride, padding, tuple(out)


def _to5d(arr, rank):
    return arr if rank == 3 else arr[:, :, None]


def _pad5d(arr, padding, rank, value=0.0):
    pads = ((0, 0), (0, 0)) + (((0, 0),) if rank == 2 else ()) + tuple((p, p) for p in padding)
    return np.pad(_to5d(arr, rank), pads, constant_values=value)


def _crop5d(arr, padding, rank, shape):
    sl = [slice(None), slice(None)]
    if rank == 2:
        sl.append(0)
    for p, n in zip(padding, shape[2:]):
        sl.append(slice(p, p + n))
    return arr[tuple(sl)]


def conv_nd_depthwise(x, kernel, stride=1, padding=0):
    """Per-channel cross-correlation of ``x`` (N, C, *S) with ``kernel`` (C, *K)."""
    if kernel.ndim != x.ndim - 1 or kernel.shape[0] != x.shape[1]:
        raise DimensionError(f"depthwise conv: kernel {kernel.shape} does not match input {x.shape}")
    rank, stride, padding, out_sp = _spatial_args(x, kernel.shape[1:], stride, padding, "conv_nd_depthwise")
    xp = _pad5d(x.data, padding, rank)
    k5 = kernel.data if rank == 3 else kernel.data[:, None]
    s5 = stride if rank == 3 else (1,) + stride
    o5 = out_sp if rank == 3 else (1,) + out_sp
    out = kernels.dwconv_forward(xp, k5, s5, o5)
    record_flops("conv_depthwise", macs=out.size * int(np.prod(kernel.shape[1:])))

    def adjoint(g):
        gxp, gk = kernels.dwconv_backward(xp, k5, g if rank == 3 else g[:, :, None], s5)
        return _crop5d(gxp, padding, rank, x.shape), gk.reshape(kernel.shape)

    return make_result(out if rank == 3 else out[:, :, 0], (x, kernel), adjoint, "conv_depthwise")


def conv_nd(x, weight, bias=None, stride=1, padding=0):
    """Dense convolution (im2col + matmul): ``x`` (N, Cin, *S), ``weight`` (Cout, Cin, *K)."""
    if weight.ndim != x.ndim or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"conv: weight {weight.shape} does not match input {x.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"conv: bias {bias.shape} does not match {weight.shape[0]} outputs")
    rank, stride, padding, out_sp = _spatial_args(x, weight.shape[2:], stride, padding, "conv_nd")
    n, cin = x.shape[:2]
    cout = weight.shape[0]
    ksp = weight.shape[2:] if rank == 3 else (1,) + weight.shape[2:]
    s5 = stride if rank == 3 else (1,) + stride
    o5 = out_sp if rank == 3 else (1,) + out_sp
    xp = _pad5d(x.data, padding, rank)
    win = np.lib.stride_tricks.sliding_window_view(xp, ksp, axis=(2, 3, 4))
    win = win[:, :, ::s5[0], ::s5[1], ::s5[2]][:, :, :o5[0], :o5[1], :o5[2]]
    lout = int(np.prod(o5))
    kvol = cin * int(np.prod(ksp))
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(n, lout, kvol)
    wmat = weight.data.reshape(cout, kvol)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    record_flops("conv", macs=n * lout * cout * kvol)
    out = out.transpose(0, 2, 1).reshape((n, cout) + tuple(out_sp))

    def adjoint(g):
        gflat = g.reshape(n, cout, lout).transpose(0, 2, 1)
        gw = np.einsum("nlo,nlk->ok", gflat, cols).reshape(weight.shape)
        gb = None if bias is None else gflat.sum(axis=(0, 1))
        gcols = (gflat @ wmat).reshape((n,) + o5 + (cin,) + ksp)
        gxp = np.zeros_like(xp)
        for a, b, e in np.ndindex(*ksp):
            sl = (slice(None), slice(None),
                  kernels._tap_slice(a, s5[0], o5[0]),
                  kernels._tap_slice(b, s5[1], o5[1]),
                  kernels._tap_slice(e, s5[2], o5[2]))
            gxp[sl] += gcols[..., a, b, e].transpose(0, 4, 1, 2, 3)
        return _crop5d(gxp, padding, rank, x.shape), gw, gb

    parents = (x, weight, bias if bias is not None else Tensor(0.0))
    return make_result(out, parents, adjoint, "conv")


def max_pool_nd(x, kernel, stride=None, padding=0):
    """Max over sliding windows of ``x`` (N, C, *S); padding is ``-inf``."""
    rank = x.ndim - 2
    kernel = (kernel,) * rank if np.isscalar(kernel) else tuple(int(k) for k in kernel)
    stride = kernel if stride is None else stride
    rank, stride, padding, out_sp = _spatial_args(x, kernel, stride, padding, "max_pool_nd")
    xp = _pad5d(x.data, padding, rank, value=-np.inf)
    k5 = kernel if rank == 3 else (1,) + kernel
    s5 = stride if rank == 3 else (1,) + stride
    o5 = out_sp if rank == 3 else (1,) + out_sp
    out, arg = kernels.maxpool_forward(xp, k5, s5, o5)

    def adjoint(g):
        gxp = kernels.maxpool_backward(xp.shape, arg, g if rank == 3 else g[:, :, None])
        return (_crop5d(gxp, padding, rank, x.shape),)

    return make_result(out if rank == 3 else out[:, :, 0], (x,), adjoint, "max_pool")


# ---------------------------------------------------------------------------
# shape and indexing
# ---------------------------------------------------------------------------


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x, axes):
    axes = tuple(int(a) % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "permute")


def take(x, indices, axis):
    """Gather ``indices`` (1-d int) along ``axis``; duplicate indices accumulate in the adjoint."""
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    n = x.shape[axis]
    if indices.ndim != 1 or indices.size == 0 or indices.min() < -n or indices.max() >= n:
        raise IndexError(f"take: indices out of range for axis {axis} of extent {n}")
    indices = indices % n
    unique = np.unique(indices).size == indices.size

    def adjoint(g):
        gx = np.zeros(x.shape)
        gm = np.moveaxis(gx, axis, 0)
        src = np.moveaxis(g, axis, 0)
        if unique:
            gm[indices] = src
        else:
            np.add.at(gm, indices, src)
        return (gx,)

    return make_result(np.take(x.data, indices, axis=axis), (x,), adjoint, "take")


def pad(x, widths):
    """Zero-pad; ``widths`` is one ``(before, after)`` pair per axis."""
    widths = tuple((int(a), int(b)) for a, b in widths)
    if len(widths) != x.ndim or min(min(w) for w in widths) < 0:
        raise DimensionError(f"pad: widths {widths} invalid for shape {x.shape}")
    crop = tuple(slice(a, a + n) for (a, _), n in zip(widths, x.shape))
    return make_result(np.pad(x.data, widths), (x,), lambda g: (g[crop],), "pad")


def _check_lastaxis_index(lead, idx, op):
    idx = np.asarray(idx, dtype=np.int64)
    try:
        full = np.broadcast_shapes(lead, idx.shape[:-1])
    except ValueError:
        full = None
    if idx.ndim < 1 or full != tuple(lead):
        raise DimensionError(f"{op}: index shape {idx.shape} does not broadcast to {lead}")
    return idx


def take_along_last(p, idx):
    """``out[..., i, j] = p[..., i, idx[..., i, j]]`` with ``idx`` broadcast over leading axes."""
    lead = p.shape[:-1]
    idx = _check_lastaxis_index(lead, idx, "take_along_last")
    rows = p.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise IndexError(f"take_along_last: index outside table of {rows} rows")
    full_idx = np.broadcast_to(idx, lead + idx.shape[-1:])
    out = np.take_along_axis(p.data, full_idx, axis=-1)
    return make_result(out, (p,), lambda g: (_bin_sum(g, full_idx, rows),), "take_along_last")


def _bin_sum(a, full_idx, nbins):
    rows = int(np.prod(a.shape[:-1], dtype=np.int64))
    base = (np.arange(rows, dtype=np.int64) * nbins).reshape(a.shape[:-1] + (1,))
    flat = np.bincount((base + full_idx).ravel(), weights=a.ravel(), minlength=rows * nbins)
    return flat.reshape(a.shape[:-1] + (nbins,))


def bin_sum(a, idx, nbins):
    """``out[..., i, r] = sum_j [idx[..., i, j] == r] * a[..., i, j]`` (adjoint of take_along_last)."""
    lead = a.shape[:-1]
    idx = _check_lastaxis_index(lead, idx, "bin_sum")
    if idx.shape[-1] != a.shape[-1]:
        raise DimensionError(f"bin_sum: index shape {idx.shape} does not match {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= nbins):
        raise IndexError(f"bin_sum: index outside {nbins} bins")
    full_idx = np.broadcast_to(idx, a.shape)
    out = _bin_sum(a.data, full_idx, nbins)
    return make_result(out, (a,), lambda g: (np.take_along_axis(g, full_idx, axis=-1),), "bin_sum")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if np.isscalar(axis):
        axis = (axis,)
    return tuple(int(a) % ndim for a in axis)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def adjoint(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(out, (x,), adjoint, "sum")


def mean(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes], dtype=np.int64))
    return scale(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)
