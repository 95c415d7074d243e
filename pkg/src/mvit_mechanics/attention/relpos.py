"""Relative positional terms added to attention logits and outputs.

Each table row is dotted with every query (or key) once, then the
per-pair scores are gathered by coordinate offset.  Decomposed tables are
handled one axis at a time and summed, so the joint ``O(THW)`` table is
never formed.
"""

import numpy as np

from ..tensor import ops


def shared_coords(grid, shared):
    """Integer coordinates of every token of ``grid`` on the ``shared`` scale, shape (L, rank).

    A pooled position ``p`` on an axis of extent ``G`` maps to
    ``floor(p * S / G)``, i.e. it is multiplied by the stride ratio and
    rounded down.
    """
    axes = [(np.arange(g, dtype=np.int64) * s) // g for g, s in zip(grid, shared)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=-1)


def _transpose_last(t):
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return ops.permute(t, axes)


def _table_scores(x, tables, idx_list):
    """``sum_a take(x @ R_a^T, idx_a)``: per-pair dot products with the offset rows."""
    total = None
    for table, idx in zip(tables.tables.values(), idx_list):
        per_row = ops.matmul(x, _transpose_last(table))
        term = ops.take_along_last(per_row, idx)
        total = term if total is None else ops.add(total, term)
    return total


def relpos_bias(q, tables, coords_q, coords_k):
    """``E[..., i, j] = Q_i . R_{p(i), p(j)}`` for queries ``q`` (..., Lq, d).

    ``coords_q`` (..., Lq, rank) and ``coords_k`` (..., Lk, rank) are integer
    positions on the shared scale; their leading axes broadcast against the
    leading axes of ``q`` (e.g. heads).
    """
    if q.shape[-1] != tables.dim:
        raise ValueError(f"query width {q.shape[-1]} != table width {tables.dim}")
    return _table_scores(q, tables, tables.offsets(coords_q, coords_k))


def relpos_key_bias(k, tables, coords_q, coords_k):
    """``E[..., i, j] = R_{p(i), p(j)} . K_j`` for keys ``k`` (..., Lk, d)."""
    idx_t = [np.swapaxes(i, -1, -2) for i in tables.offsets(coords_q, coords_k)]
    return _transpose_last(_table_scores(k, tables, idx_t))


def relpos_value_term(attn, tables, coords_q, coords_k):
    """``out[..., i, :] = sum_j A_ij R_{p(i), p(j)}`` for attention weights (..., Lq, Lk)."""
    total = None
    for table, idx, rows in zip(tables.tables.values(), tables.offsets(coords_q, coords_k), tables.axis_rows()):
        binned = ops.bin_sum(attn, idx, rows)
        term = ops.matmul(binned, table)
        total = term if total is None else ops.add(total, term)
    return total


def relpos_extended_terms(attn, q, k, tables_q, tables_k, tables_v, coords_q, coords_k, rel_k_index="j"):
    """The three relative terms; any whose tables are ``None`` comes back as ``None``.

    Returns ``(E_rel_q, E_rel_k, value_contribution)``.  ``rel_k_index='i'``
    dots the key table with ``K_i`` instead of ``K_j`` and needs ``Lq == Lk``.
    """
    e_q = relpos_bias(q, tables_q, coords_q, coords_k) if tables_q is not None else None
    e_k = None
    if tables_k is not None:
        if rel_k_index == "j":
            e_k = relpos_key_bias(k, tables_k, coords_q, coords_k)
        else:
            if k.shape[-2] != q.shape[-2]:
                raise ValueError("rel_k indexed by i needs equal query and key lengths")
            e_k = relpos_bias(k, tables_k, coords_q, coords_k)
    e_v = None
    if tables_v is not None:
        if attn is None:
            raise ValueError("rel_v needs the attention weights")
        e_v = relpos_value_term(attn, tables_v, coords_q, coords_k)
    return e_q, e_k, e_v
