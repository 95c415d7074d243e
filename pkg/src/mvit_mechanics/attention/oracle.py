"""Loop-level reference evaluator for every attention kind.

Deliberately slow and independent of the fast path: pooling, layer norm,
window membership, table lookups and softmax are all written out per token
on plain numpy arrays.  Intended for L up to a few thousand tokens.
"""

import itertools
import math

import numpy as np

from ..tensor import DimensionError


def _pool_map(maps, grid, stride, mode, kernel, k):
    """maps: (C, L) on ``grid``; returns (C, L') and the pooled grid."""
    pad = k // 2
    out_grid = tuple((n + 2 * pad - k) // s + 1 for n, s in zip(grid, stride))
    c = maps.shape[0]
    src = maps.reshape((c,) + tuple(grid))
    out = np.zeros((c,) + out_grid)
    taps = list(itertools.product(range(k), repeat=len(grid)))
    for o in itertools.product(*(range(n) for n in out_grid)):
        for ch in range(c):
            best, acc = -math.inf, 0.0
            for t in taps:
                p = tuple(oi * s - pad + ti for oi, s, ti in zip(o, stride, t))
                inside = all(0 <= pi < n for pi, n in zip(p, grid))
                if mode == "max":
                    if inside and src[(ch,) + p] > best:
                        best = src[(ch,) + p]
                elif inside:
                    acc += kernel[(ch,) + t] * src[(ch,) + p]
            out[(ch,) + o] = best if mode == "max" else acc
    return out.reshape(c, -1), out_grid


def _norm_rows(x, gamma, beta, eps):
    out = np.empty_like(x)
    for i, row in enumerate(x):
        mu = sum(row) / len(row)
        var = sum((r - mu) ** 2 for r in row) / len(row)
        out[i] = (row - mu) / math.sqrt(var + eps) * gamma + beta
    return out


def _project(x, w, b):
    out = x @ w
    return out if b is None else out + b.data


def _pooled_heads(t, grid, which, params, spec):
    """t: (L, heads*d) -> list over heads of (L', d) plus pooled grid."""
    tag = "q" if which == "q" else "kv"
    stride = spec.q_stride if tag == "q" else spec.kv_stride
    pooled_at_all = max(stride) > 1 or (spec.pool_at_unit_stride and spec.pool_kernel > 1)
    d = spec.head_dim
    per_head, out_grid = [], tuple(grid)
    for h in range(spec.heads):
        part = t[:, h * d:(h + 1) * d]
        if pooled_at_all:
            kernel = params.pool[which].data if spec.pool_mode == "depthwise_conv" else None
            pooled, out_grid = _pool_map(part.T, grid, stride, spec.pool_mode, kernel, spec.pool_kernel)
            part = pooled.T
            if which in params.norm:
                gamma, beta = params.norm[which]
                part = _norm_rows(part, gamma.data, beta.data, spec.norm_eps)
        per_head.append(part)
    return per_head, out_grid


def _axis_window(extent_in, window, shift, stride, pooled_extent):
    """(slots per window, slot shift, padded extent) of one axis on a pooled grid."""
    w = min(window, extent_in)
    s = shift if window < extent_in else 0
    count = -(-extent_in // w)
    slots = -(-w // stride)
    return slots, s // stride, count * slots


def _membership(pos, axes):
    """(window id, region id) of a pooled position given per-axis window geometry."""
    wid, region = [], []
    for p, (slots, s, padded) in zip(pos, axes):
        rolled = (p - s) % padded
        wid.append(rolled // slots)
        if s == 0 or rolled < padded - slots:
            region.append(0)
        elif rolled < padded - s:
            region.append(1)
        else:
            region.append(2)
    return tuple(wid), tuple(region)


def _rel_row(tables, ci, cj):
    """R_{p(i),p(j)} by explicit row lookups (summed per axis when decomposed)."""
    ext = tables.extents
    if tables.mode == "decomposed":
        vec = 0.0
        for (_, table), a, b, e in zip(tables.tables.items(), ci, cj, ext):
            vec = vec + table.data[a - b + e - 1]
        return vec
    row = 0
    for a, b, e in zip(ci, cj, ext):
        row = row * (2 * e - 1) + (a - b + e - 1)
    return tables.tables["joint"].data[row]


def attention_oracle(x, grid, params, spec):
    """Naive evaluation of ``spec`` on one sample ``x`` (L, D_in); returns (out, pooled query grid)."""
    x = np.asarray(x.data if hasattr(x, "data") else x, dtype=np.float64)
    grid = tuple(int(g) for g in grid)
    if x.ndim != 2 or x.shape[0] != math.prod(grid):
        raise DimensionError(f"oracle needs (L, D) with L = prod{grid}, got {x.shape}")
    if x.shape[1] != params.w_q.shape[0]:
        raise DimensionError("input width does not match W_Q")
    d = spec.head_dim
    qs, grid_q = _pooled_heads(_project(x, params.w_q.data, params.b_q), grid, "q", params, spec)
    ks, grid_k = _pooled_heads(_project(x, params.w_k.data, params.b_k), grid, "k", params, spec)
    vs, _ = _pooled_heads(_project(x, params.w_v.data, params.b_v), grid, "v", params, spec)

    pos_q = list(itertools.product(*(range(n) for n in grid_q)))
    pos_k = list(itertools.product(*(range(n) for n in grid_k)))
    shared = tuple(max(a, b) for a, b in zip(grid_q, grid_k))
    coord = lambda p, g: tuple(pi * s // gi for pi, s, gi in zip(p, shared, g))  # noqa: E731

    if spec.windowed:
        shift = spec.shift if spec.kind == "shifted_window" else (0,) * len(grid)
        pooled_q = max(spec.q_stride) > 1 or (spec.pool_at_unit_stride and spec.pool_kernel > 1)
        pooled_k = max(spec.kv_stride) > 1 or (spec.pool_at_unit_stride and spec.pool_kernel > 1)
        axes_q = [_axis_window(n, w, s, st if pooled_q else 1, g)
                  for n, w, s, st, g in zip(grid, spec.window, shift, spec.q_stride, grid_q)]
        axes_k = [_axis_window(n, w, s, st if pooled_k else 1, g)
                  for n, w, s, st, g in zip(grid, spec.window, shift, spec.kv_stride, grid_k)]
        mem_q = [_membership(p, axes_q) for p in pos_q]
        mem_k = [_membership(p, axes_k) for p in pos_k]
    else:
        mem_q = [None] * len(pos_q)
        mem_k = [None] * len(pos_k)

    rel = spec.relpos_mode in ("joint", "decomposed")
    tq = params.relpos.get("rel_q") if rel else None
    tk = params.relpos.get("rel_k") if rel else None
    tv = params.relpos.get("rel_v") if rel else None
    z = np.zeros((len(pos_q), spec.heads * d))
    for h in range(spec.heads):
        q, k, v = qs[h], ks[h], vs[h]
        for i, pi in enumerate(pos_q):
            ci = coord(pi, grid_q)
            keys = [j for j in range(len(pos_k)) if mem_q[i] == mem_k[j]]
            logits = []
            for j in keys:
                cj = coord(pos_k[j], grid_k)
                s = float(np.dot(q[i], k[j]))
                if tq is not None:
                    s += float(np.dot(q[i], _rel_row(tq, ci, cj)))
                if tk is not None:
                    kk = k[j] if spec.rel_k_index == "j" else k[i]
                    s += float(np.dot(_rel_row(tk, ci, cj), kk))
                logits.append(s / math.sqrt(d))
            row = np.zeros(d)
            if keys:
                top = max(logits)
                weights = [math.exp(s - top) for s in logits]
                total = sum(weights)
                for j, wgt in zip(keys, weights):
                    contrib = v[j]
                    if tv is not None:
                        contrib = contrib + _rel_row(tv, ci, coord(pos_k[j], grid_k))
                    row += (wgt / total) * contrib
            if spec.residual_pooling:
                row = row + q[i]
            z[i, h * d:(h + 1) * d] = row
    return _project(z, params.w_out.data, params.b_out), grid_q
