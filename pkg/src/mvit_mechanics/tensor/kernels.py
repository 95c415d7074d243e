"""Sliding-window kernels for depthwise convolution and max pooling.

Two interchangeable backends compute the forward passes:

* ``numba``: ``@njit`` loops, one output element at a time.
* ``numpy``: one vectorised multiply-add per kernel tap.

Both accumulate in kernel-major order (taps visited in C order of the
kernel extents, starting from ``0.0``), so they agree bit for bit.  The
backend is picked from ``MVIT_MECHANICS_NUMBA`` (``0`` disables numba) and
can be switched at runtime with :func:`set_backend` / :func:`use_backend`.

All kernels work on 5-d padded arrays ``(N, C, D, H, W)``; 2-d callers add a
unit depth axis.
"""

import os
from contextlib import contextmanager

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f


def _env_backend():
    flag = os.environ.get("MVIT_MECHANICS_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off") or not HAVE_NUMBA:
        return "numpy"
    return "numba"


_backend = _env_backend()


def get_backend():
    return _backend


def set_backend(name):
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    _backend = name


@contextmanager
def use_backend(name):
    previous = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _dwconv_nb(xp, k, sd, sh, sw, od, oh, ow):
    n_batch, n_chan = xp.shape[0], xp.shape[1]
    kd, kh, kw = k.shape[1], k.shape[2], k.shape[3]
    out = np.zeros((n_batch, n_chan, od, oh, ow))
    for n in range(n_batch):
        for c in range(n_chan):
            for z in range(od):
                for y in range(oh):
                    for x in range(ow):
                        acc = 0.0
                        for a in range(kd):
                            for b in range(kh):
                                for e in range(kw):
                                    acc += xp[n, c, z * sd + a, y * sh + b, x * sw + e] * k[c, a, b, e]
                        out[n, c, z, y, x] = acc
    return out


@njit(cache=True)
def _maxpool_nb(xp, kd, kh, kw, sd, sh, sw, od, oh, ow):
    n_batch, n_chan = xp.shape[0], xp.shape[1]
    ph, pw = xp.shape[3], xp.shape[4]
    out = np.empty((n_batch, n_chan, od, oh, ow))
    arg = np.empty((n_batch, n_chan, od, oh, ow), dtype=np.int64)
    for n in range(n_batch):
        for c in range(n_chan):
            for z in range(od):
                for y in range(oh):
                    for x in range(ow):
                        best = -np.inf
                        where = -1
                        for a in range(kd):
                            for b in range(kh):
                                for e in range(kw):
                                    zz = z * sd + a
                                    yy = y * sh + b
                                    xx = x * sw + e
                                    v = xp[n, c, zz, yy, xx]
                                    if v > best:
                                        best = v
                                        where = (zz * ph + yy) * pw + xx
                        out[n, c, z, y, x] = best
                        arg[n, c, z, y, x] = where
    return out, arg


# ---------------------------------------------------------------------------
# numpy kernels
# ---------------------------------------------------------------------------


def _tap_slice(start, stride, count):
    return slice(start, start + stride * (count - 1) + 1, stride)


def _dwconv_np(xp, k, sd, sh, sw, od, oh, ow):
    out = np.zeros((xp.shape[0], xp.shape[1], od, oh, ow))
    for a, b, e in np.ndindex(*k.shape[1:]):
        window = xp[:, :, _tap_slice(a, sd, od), _tap_slice(b, sh, oh), _tap_slice(e, sw, ow)]
        out += window * k[:, a, b, e][None, :, None, None, None]
    return out


def _maxpool_np(xp, kd, kh, kw, sd, sh, sw, od, oh, ow):
    ph, pw = xp.shape[3], xp.shape[4]
    out = np.full((xp.shape[0], xp.shape[1], od, oh, ow), -np.inf)
    arg = np.full(out.shape, -1, dtype=np.int64)
    zs = np.arange(od)[:, None, None] * sd
    ys = np.arange(oh)[None, :, None] * sh
    xs = np.arange(ow)[None, None, :] * sw
    for a, b, e in np.ndindex(kd, kh, kw):
        window = xp[:, :, _tap_slice(a, sd, od), _tap_slice(b, sh, oh), _tap_slice(e, sw, ow)]
        better = window > out
        out = np.where(better, window, out)
        flat = ((zs + a) * ph + (ys + b)) * pw + (xs + e)
        arg = np.where(better, flat, arg)
    return out, arg


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def out_extent(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def dwconv_forward(xp, k, stride, out_shape):
    """Depthwise correlation of padded ``xp`` (N, C, D, H, W) with ``k`` (C, KD, KH, KW)."""
    fn = _dwconv_nb if _backend == "numba" else _dwconv_np
    xp = np.ascontiguousarray(xp, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    return fn(xp, k, stride[0], stride[1], stride[2], *out_shape)


def dwconv_backward(xp, k, g, stride):
    """Gradients of the depthwise correlation w.r.t. the padded input and the kernel."""
    sd, sh, sw = stride
    od, oh, ow = g.shape[2:]
    gx = np.zeros_like(xp)
    gk = np.zeros_like(k)
    for a, b, e in np.ndindex(*k.shape[1:]):
        sl = (slice(None), slice(None), _tap_slice(a, sd, od), _tap_slice(b, sh, oh), _tap_slice(e, sw, ow))
        gk[:, a, b, e] = np.einsum("ncdhw,ncdhw->c", g, xp[sl])
        gx[sl] += g * k[:, a, b, e][None, :, None, None, None]
    return gx, gk


def maxpool_forward(xp, kernel, stride, out_shape):
    """Max over sliding windows; returns values and the flat argmax within each padded map."""
    fn = _maxpool_nb if _backend == "numba" else _maxpool_np
    xp = np.ascontiguousarray(xp, dtype=np.float64)
    return fn(xp, kernel[0], kernel[1], kernel[2], stride[0], stride[1], stride[2], *out_shape)


def maxpool_backward(padded_shape, arg, g):
    n_batch, n_chan = padded_shape[:2]
    plane = int(np.prod(padded_shape[2:]))
    base = (np.arange(n_batch * n_chan, dtype=np.int64) * plane).reshape(n_batch, n_chan, 1, 1, 1)
    flat = np.bincount((base + arg).ravel(), weights=g.ravel(), minlength=n_batch * n_chan * plane)
    return flat.reshape(padded_shape)
