"""Fast attention paths: global pooling attention and (shifted) window attention.

Both run the same pipeline.  Queries, keys and values are projected, split
into heads and pooled on the whole grid; window kinds then cut each pooled
grid into windows (global attention is the one-window layout).  Scores are
``(Q K^T + E_rel) / sqrt(d)``, padded or cross-region keys are masked, and
the pooled query is added back before the output projection.
"""

import math
from contextlib import contextmanager
from contextvars import ContextVar

import numpy as np

from ..tensor import DimensionError, ops
from .pooling import check_grid, pool
from .relpos import relpos_extended_terms, shared_coords
from .types import SpecError
from .windows import WindowLayout, AxisWindows, window_layout

FAULTS = ("relpos_sign", "drop_residual", "unmask_windows")

_active_fault: ContextVar = ContextVar("mvit_mechanics_attention_fault", default=None)
_shape_log: ContextVar = ContextVar("mvit_mechanics_attention_shapes", default=None)


@contextmanager
def record_shapes():
    """Collect the pooled grids and window counts of every attention call in this context."""
    log = []
    token = _shape_log.set(log)
    try:
        yield log
    finally:
        _shape_log.reset(token)


@contextmanager
def inject_fault(name="relpos_sign"):
    """Deliberately corrupt the fast path inside this context (for self-tests).

    ``relpos_sign`` flips the sign of the relative-position logits,
    ``drop_residual`` skips the pooled-query residual, ``unmask_windows``
    lets queries see padded and wrapped-around keys.
    """
    if name not in FAULTS:
        raise ValueError(f"unknown fault {name!r}; choose from {FAULTS}")
    token = _active_fault.set(name)
    try:
        yield
    finally:
        _active_fault.reset(token)


def active_fault():
    return _active_fault.get()


def _linear(x, w, b):
    out = ops.matmul(x, w)
    return out if b is None else ops.add(out, b)


def _split_heads(t, heads):
    """(B, L, heads * d) -> (B, heads, L, d)."""
    b, n, c = t.shape
    return ops.permute(ops.reshape(t, (b, n, heads, c // heads)), (0, 2, 1, 3))


def _pool_heads(t, grid, which, params, spec):
    """Pool (B, heads, L, d) over the grid, heads sharing one kernel, then normalise."""
    tag = "q" if which == "q" else "kv"
    if not spec.pools(tag):
        return t, tuple(grid)
    stride = spec.q_stride if tag == "q" else spec.kv_stride
    b, h, n, d = t.shape
    flat = ops.reshape(t, (b * h, n, d))
    pooled, out_grid = pool(flat, grid, stride, spec.pool_mode,
                            kernel=params.pool.get(which), kernel_size=spec.pool_kernel)
    if which in params.norm:
        gamma, beta = params.norm[which]
        pooled = ops.layer_norm(pooled, gamma, beta, spec.norm_eps)
    return ops.reshape(pooled, (b, h, pooled.shape[1], d)), out_grid


def _window_coords(layout, grid, shared):
    """Shared-scale coordinates of every window slot; padding slots are clamped to the edge."""
    pos = np.minimum(layout.positions(), np.asarray(grid) - 1)
    return (pos * np.asarray(shared)) // np.asarray(grid)


def _global_layout(grid):
    return WindowLayout(tuple(AxisWindows(extent=g, window=g, count=1) for g in grid))


def _layouts(spec, grid, grid_q, grid_k):
    if not spec.windowed:
        return _global_layout(grid_q), _global_layout(grid_k)
    shift = spec.shift if spec.kind == "shifted_window" else None
    lq = window_layout(grid, spec.window, shift, spec.q_stride if spec.pools("q") else None, grid_q)
    lk = window_layout(grid, spec.window, shift, spec.kv_stride if spec.pools("kv") else None, grid_k)
    if lq.num_windows != lk.num_windows:
        raise DimensionError(f"query and key window counts differ: {lq.num_windows} vs {lk.num_windows}")
    return lq, lk


def _window_mask(layout_q, layout_k):
    if layout_q.trivial and layout_k.trivial:
        return None
    valid_k = layout_k.valid()
    same_region = layout_q.regions()[:, :, None] == layout_k.regions()[:, None, :]
    mask = valid_k[:, None, :] & same_region
    return None if mask.all() else mask


def _validate(x, grid, params, spec):
    if len(grid) != spec.rank:
        raise DimensionError(f"grid {tuple(grid)} has rank {len(grid)} but the spec has rank {spec.rank}")
    check_grid(x, grid)
    if x.shape[-1] != params.w_q.shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} != W_Q rows {params.w_q.shape[0]}")
    if params.w_q.shape[1] != spec.dim:
        raise DimensionError(f"W_Q has {params.w_q.shape[1]} columns, spec needs heads*d = {spec.dim}")
    if spec.pool_mode == "depthwise_conv":
        for which, tag in (("q", "q"), ("k", "kv"), ("v", "kv")):
            if spec.pools(tag) and which not in params.pool:
                raise SpecError(f"missing pooling kernel for {which}")


def _attend(x, grid, params, spec):
    fault = _active_fault.get()
    batched = x.ndim == 3
    xb = x if batched else ops.reshape(x, (1,) + x.shape)
    heads, d = spec.heads, spec.head_dim

    q = _split_heads(_linear(xb, params.w_q, params.b_q), heads)
    k = _split_heads(_linear(xb, params.w_k, params.b_k), heads)
    v = _split_heads(_linear(xb, params.w_v, params.b_v), heads)
    q, grid_q = _pool_heads(q, grid, "q", params, spec)
    k, grid_k = _pool_heads(k, grid, "k", params, spec)
    v, _ = _pool_heads(v, grid, "v", params, spec)

    layout_q, layout_k = _layouts(spec, grid, grid_q, grid_k)
    log = _shape_log.get()
    if log is not None:
        log.append({"grid_q": tuple(grid_q), "grid_k": tuple(grid_k), "L_q": q.shape[2], "L_k": k.shape[2],
                    "L_v": v.shape[2], "windows": layout_q.num_windows})
    qw = layout_q.partition(q)   # (B, heads, nW, Tq, d)
    kw = layout_k.partition(k)
    vw = layout_k.partition(v)

    kt = ops.permute(kw, (0, 1, 2, 4, 3))
    logits = ops.matmul(qw, kt)
    tables = {t: params.relpos.get(t) for t in ("rel_q", "rel_k", "rel_v")}
    use_rel = spec.relpos_mode in ("joint", "decomposed")
    if use_rel:
        shared = tuple(max(a, b) for a, b in zip(grid_q, grid_k))
        for t in spec.relpos_terms:
            if tables[t] is None:
                raise SpecError(f"relpos term {t} enabled but no tables were given")
            if tables[t].extents != shared:
                raise DimensionError(
                    f"{t} tables cover extents {tables[t].extents} but this input needs {shared}; "
                    "interpolate the tables first")
        coords_q = _window_coords(layout_q, grid_q, shared)
        coords_k = _window_coords(layout_k, grid_k, shared)
        e_q, e_k, _ = relpos_extended_terms(None, qw, kw, tables["rel_q"], tables["rel_k"], None,
                                            coords_q, coords_k, spec.rel_k_index)
        for e in (e_q, e_k):
            if e is not None:
                logits = ops.add(logits, ops.scale(e, -1.0) if fault == "relpos_sign" else e)
    logits = ops.scale(logits, 1.0 / math.sqrt(d))

    mask = None if fault == "unmask_windows" else _window_mask(layout_q, layout_k)
    attn = ops.softmax_lastdim(logits, mask)
    out = ops.matmul(attn, vw)
    if use_rel and tables["rel_v"] is not None:
        _, _, e_v = relpos_extended_terms(attn, None, None, None, None, tables["rel_v"], coords_q, coords_k)
        out = ops.add(out, e_v)
    if spec.residual_pooling and fault != "drop_residual":
        out = ops.add(out, qw)

    z = layout_q.merge(out)   # (B, heads, Lq, d)
    b, _, lq, _ = z.shape
    z = ops.reshape(ops.permute(z, (0, 2, 1, 3)), (b, lq, heads * d))
    z = _linear(z, params.w_out, params.b_out)
    if not batched:
        z = ops.reshape(z, z.shape[1:])
    return z, tuple(grid_q)


def pooling_attention(x, grid, params, spec):
    """Global pooling attention; returns ``(out (L_q, D_out), pooled query grid)``.

    ``x`` is ``(L, D_in)`` or ``(B, L, D_in)`` with ``L = prod(grid)``.
    """
    if spec.kind not in ("pooling", "full"):
        raise SpecError(f"pooling_attention cannot run kind {spec.kind!r}")
    _validate(x, grid, params, spec)
    return _attend(x, grid, params, spec)


def window_attention(x, grid, params, spec):
    """Attention restricted to (optionally shifted) windows of the pooled grids."""
    if not spec.windowed:
        raise SpecError(f"window_attention cannot run kind {spec.kind!r}")
    _validate(x, grid, params, spec)
    return _attend(x, grid, params, spec)


def attention(x, grid, params, spec):
    """Dispatch on ``spec.kind``."""
    if spec.windowed:
        return window_attention(x, grid, params, spec)
    return pooling_attention(x, grid, params, spec)


def relpos_coords(spec, grid):
    """Shared-scale coordinates (query, key) used by global attention on ``grid``."""
    gq, gk = spec.pooled_grid(grid, "q"), spec.pooled_grid(grid, "kv")
    shared = tuple(max(a, b) for a, b in zip(gq, gk))
    return shared_coords(gq, shared), shared_coords(gk, shared)
