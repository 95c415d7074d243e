"""Closed-form parameter, FLOP and activation accounting.

Nothing here touches tensors: every count is derived from the config and the
window geometry.  The FLOP model follows the instrumented forward op for op
(one multiply-accumulate per contraction term, 5 per element for softmax and
layer norm, everything else free), so ``count_flops`` and a counted forward
agree exactly.
"""

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

from .attention.windows import window_layout
from .model.config import ModelConfig

SCHEMA = "mvit_mechanics.cost_report"
SCHEMA_VERSION = 1
ELEMENTWISE_FLOPS = 5
BYTES_PER_VALUE = 8
CSV_COLUMNS = ("block", "stage", "kind", "L_q", "L_k", "params", "flops", "act_bytes")


def relpos_table_size(mode, t, h, w, d):
    """Learned scalars in relative tables for shared extents ``t x h x w`` and width ``d``."""
    if min(t, h, w, d) < 1:
        raise ValueError("extents and width must be >= 1")
    if mode == "decomposed":
        return ((2 * t - 1) + (2 * h - 1) + (2 * w - 1)) * d
    if mode == "joint":
        return (2 * t - 1) * (2 * h - 1) * (2 * w - 1) * d
    raise ValueError(f"unknown table mode {mode!r}")


def linear_params(d_in, d_out, bias=True):
    return d_in * d_out + (d_out if bias else 0)


def matmul_macs(m, k, n):
    """Multiply-accumulates of an ``(m, k) @ (k, n)`` product."""
    return m * k * n


def _table_rows(mode, extents):
    if mode == "decomposed":
        return [2 * e - 1 for e in extents]
    return [math.prod(2 * e - 1 for e in extents)]


def score_layout(spec, grid):
    """(num_windows, query slots per window, key slots per window)."""
    gq, gk = spec.pooled_grid(grid, "q"), spec.pooled_grid(grid, "kv")
    if not spec.windowed:
        return 1, math.prod(gq), math.prod(gk)
    shift = spec.shift if spec.kind == "shifted_window" else None
    lq = window_layout(grid, spec.window, shift, spec.q_stride if spec.pools("q") else None, gq)
    lk = window_layout(grid, spec.window, shift, spec.kv_stride if spec.pools("kv") else None, gk)
    return lq.num_windows, lq.tokens_per_window, lk.tokens_per_window


def attention_memory_estimate(spec, grid, heads=None, d=None):
    """Bytes of the float64 score matrix: ``heads * windows * L_q * L_k * 8``.

    Key length shrinks with the pooling stride, and windows restrict each
    query to the keys of its own window.
    """
    heads = spec.heads if heads is None else heads
    n_win, tq, tk = score_layout(spec, tuple(grid))
    return heads * n_win * tq * tk * BYTES_PER_VALUE


def attention_params(spec, d_in, grid):
    """Learned scalars of one attention layer."""
    dim, d = spec.dim, spec.head_dim
    n = 3 * linear_params(d_in, dim) + linear_params(dim, dim)
    if spec.pool_mode == "depthwise_conv":
        pooled = sum(1 for tag in ("q", "kv", "kv") if spec.pools(tag))
        n += pooled * (d * spec.pool_kernel ** spec.rank + 2 * d)
    if spec.relpos_mode in ("joint", "decomposed"):
        extents = spec.shared_extents(grid)
        n += len(spec.relpos_terms) * sum(_table_rows(spec.relpos_mode, extents)) * d
    return n


def attention_costs(spec, d_in, grid):
    """(macs, elementwise) of one attention layer on a single sample."""
    grid = tuple(grid)
    l_in = math.prod(grid)
    gq, gk = spec.pooled_grid(grid, "q"), spec.pooled_grid(grid, "kv")
    dim, d, h = spec.dim, spec.head_dim, spec.heads
    macs = 3 * matmul_macs(l_in, d_in, dim)
    elem = 0
    for tag, g in (("q", gq), ("kv", gk), ("kv", gk)):
        if spec.pools(tag) and spec.pool_mode == "depthwise_conv":
            macs += h * d * math.prod(g) * spec.pool_kernel ** spec.rank
            elem += ELEMENTWISE_FLOPS * h * math.prod(g) * d
    n_win, tq, tk = score_layout(spec, grid)
    scores = h * n_win * tq * tk
    macs += 2 * scores * d                       # Q K^T and A V
    elem += ELEMENTWISE_FLOPS * scores           # softmax
    if spec.relpos_mode in ("joint", "decomposed"):
        rows = sum(_table_rows(spec.relpos_mode, spec.shared_extents(grid)))
        for term in spec.relpos_terms:
            slots = tk if term == "rel_k" and spec.rel_k_index == "j" else tq
            macs += h * n_win * slots * rows * d
    macs += matmul_macs(math.prod(gq), dim, dim)  # output projection
    return macs, elem


@dataclass
class CostRecord:
    name: str
    block: int
    stage: int
    kind: str
    L_q: int
    L_k: int
    params: int
    macs: int
    elementwise: int
    flops: int
    act_bytes: int


@dataclass
class CostReport:
    variant: str
    task: str
    input_shape: tuple
    mac_weight: int
    records: list = field(default_factory=list)

    @property
    def total_params(self):
        return sum(r.params for r in self.records)

    @property
    def total_flops(self):
        return sum(r.flops for r in self.records)

    @property
    def total_macs(self):
        return sum(r.macs for r in self.records)

    @property
    def total_elementwise(self):
        return sum(r.elementwise for r in self.records)

    @property
    def peak_act_bytes(self):
        return max((r.act_bytes for r in self.records), default=0)

    def block(self, i):
        return next(r for r in self.records if r.block == i)

    def to_dict(self):
        return {
            "schema": SCHEMA, "version": SCHEMA_VERSION,
            "meta": {"variant": self.variant, "task": self.task, "input_shape": list(self.input_shape),
                     "convention": {"mac_weight": self.mac_weight, "softmax_per_element": ELEMENTWISE_FLOPS,
                                    "layer_norm_per_element": ELEMENTWISE_FLOPS,
                                    "bytes_per_value": BYTES_PER_VALUE}},
            "totals": {"params": self.total_params, "flops": self.total_flops, "macs": self.total_macs,
                       "elementwise": self.total_elementwise, "peak_act_bytes": self.peak_act_bytes},
            "records": [asdict(r) for r in self.records],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.records:
            writer.writerow([r.name if r.block < 0 else r.block, r.stage, r.kind, r.L_q, r.L_k,
                             r.params, r.flops, r.act_bytes])
        writer.writerow(["total", "", "", "", "", self.total_params, self.total_flops, self.peak_act_bytes])
        return buf.getvalue()


def _report(config, mac_weight, input_shape):
    if input_shape is not None and tuple(input_shape) != tuple(config.input_shape):
        config = config.with_(input_shape=tuple(input_shape))
    if mac_weight not in (1, 2):
        raise ValueError("mac_weight must be 1 or 2")
    report = CostReport(config.name, config.task, tuple(config.input_shape), mac_weight)
    stem = config.stem
    grid = config.stem_grid
    l0 = math.prod(grid)
    kvol = stem.in_channels * math.prod(stem.kernel)
    stem_params = stem.out_channels * kvol + stem.out_channels
    if config.absolute_pos:
        stem_params += l0 * stem.out_channels
    stem_macs = l0 * stem.out_channels * kvol
    report.records.append(_record("stem", -1, 0, "stem", l0, 0, stem_params, stem_macs, 0,
                                  BYTES_PER_VALUE * l0 * stem.out_channels, mac_weight))
    for blk in config.blocks():
        spec = blk.attn
        l_in = math.prod(blk.grid_in)
        l_q = math.prod(blk.grid_out)
        hidden = int(blk.d_out * config.mlp_ratio)
        params = 2 * blk.d_in + attention_params(spec, blk.d_in, blk.grid_in) + 2 * blk.d_out
        params += linear_params(blk.d_out, hidden) + linear_params(hidden, blk.d_out)
        a_macs, a_elem = attention_costs(spec, blk.d_in, blk.grid_in)
        macs = a_macs + 2 * matmul_macs(l_q, blk.d_out, hidden)
        elem = a_elem + ELEMENTWISE_FLOPS * (l_in * blk.d_in + l_q * blk.d_out)
        if blk.needs_projection:
            params += linear_params(blk.d_in, blk.d_out)
            macs += matmul_macs(l_in, blk.d_in, blk.d_out)
        act = attention_memory_estimate(spec, blk.grid_in) + BYTES_PER_VALUE * l_q * hidden
        kind = "global" if spec.kind in ("pooling", "full") else spec.kind
        report.records.append(_record(f"block{blk.index}", blk.index, blk.stage, kind, l_q,
                                      math.prod(blk.kv_grid), params, macs, elem, act, mac_weight))
    last = config.blocks()[-1] if config.depth else None
    c = config.stages[-1].channels
    l_last = math.prod(last.grid_out) if last else l0
    head_params = 2 * c + linear_params(c, config.num_classes)
    report.records.append(_record("head", config.depth, len(config.stages) + 1, "head", l_last, 0, head_params,
                                  matmul_macs(1, c, config.num_classes), ELEMENTWISE_FLOPS * l_last * c,
                                  BYTES_PER_VALUE * l_last * c, mac_weight))
    return report


def _record(name, block, stage, kind, l_q, l_k, params, macs, elem, act, mac_weight):
    return CostRecord(name, block, stage, kind, l_q, l_k, params, macs, elem, macs * mac_weight + elem, act)


def count_params(config: ModelConfig):
    """CostReport whose records carry exact parameter counts (FLOPs at the config's input)."""
    return _report(config, 1, None)


def count_flops(config: ModelConfig, input_shape=None, mac_weight=1):
    """CostReport at ``input_shape`` (defaults to the config's own input).

    ``mac_weight`` is the FLOP value of one multiply-accumulate: 1 counts
    multiply-adds (the convention of most published model tables), 2 counts
    the multiply and the add separately.
    """
    return _report(config, mac_weight, input_shape)
