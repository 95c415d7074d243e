"""Wall-clock and score-memory comparison of attention kinds, and of kernel backends.

Trials run strictly one after another so timings do not contend.  Inputs come
from the seed; only the timing fields vary between runs.
"""

import math
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from .attention import AttentionParams, AttentionSpec, attention
from .cost import attention_memory_estimate, score_layout
from .tensor import Tensor, kernels, ops

SCHEMA = "mvit_mechanics.bench_report"
SCHEMA_VERSION = 1
MAX_TOKENS = 4096
BENCH_KINDS = ("full", "pooling", "window", "swin", "hwin")
_KIND_NAMES = {"full": "full", "pooling": "pooling", "window": "fixed_window",
               "swin": "shifted_window", "hwin": "hybrid_window_member"}


@dataclass
class BenchRow:
    kind: str
    tokens: int
    L_k: int   # keys visible to each query
    trials: int
    median_s: float
    tokens_per_s: float
    score_bytes: int
    score_bytes_per_token: float


def bench_spec(kind, grid, heads=1, head_dim=32, kv_stride=4, window=7):
    """Spec for one of the command-line attention names on ``grid``."""
    rank = len(grid)
    name = _KIND_NAMES[kind]
    kw = dict(kind=name, heads=heads, head_dim=head_dim, q_stride=(1,) * rank, relpos_mode="decomposed",
              relpos_terms=("rel_q",))
    if name == "full":
        kw.update(kv_stride=(1,) * rank, pool_at_unit_stride=False)
    elif name == "pooling":
        kw.update(kv_stride=(kv_stride,) * rank)
    else:
        kw.update(kv_stride=(1,) * rank, pool_at_unit_stride=False, window=(window,) * rank)
        if name == "shifted_window":
            kw["shift"] = (window // 2,) * rank
    return AttentionSpec(**kw)


def time_call(fn, trials):
    fn()  # warm-up (numba compilation, allocator)
    samples = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def bench_attention(grid, kinds=BENCH_KINDS, trials=5, seed=0, heads=1, head_dim=32, kv_stride=4, window=7):
    grid = tuple(int(g) for g in grid)
    tokens = math.prod(grid)
    if tokens > MAX_TOKENS:
        raise ValueError(f"{tokens} tokens exceeds the benchmark cap of {MAX_TOKENS}")
    if trials < 5:
        raise ValueError("at least 5 trials are required for a median")
    rows = []
    for kind in kinds:
        spec = bench_spec(kind, grid, heads, head_dim, kv_stride, window)
        rng = np.random.default_rng(seed)
        d_in = spec.dim
        params = AttentionParams.init(spec, d_in, grid, rng)
        x = Tensor(rng.standard_normal((tokens, d_in)))
        median = time_call(lambda: attention(x, grid, params, spec), trials)
        score = attention_memory_estimate(spec, grid)
        keys_per_query = score_layout(spec, grid)[2]
        rows.append(BenchRow(kind, tokens, keys_per_query, trials, median,
                             tokens / median if median > 0 else math.inf, score, score / tokens))
    return rows


def bench_kernels(grid=(56, 56), channels=96, trials=5, seed=0):
    """Median forward time of depthwise conv and max pooling for each available backend."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((1, channels) + tuple(grid)))
    k = Tensor(rng.standard_normal((channels,) + (3,) * len(grid)))
    ones, twos = (1,) * len(grid), (2,) * len(grid)
    cases = {
        "dwconv_s1": lambda: ops.conv_nd_depthwise(x, k, ones, ones),
        "dwconv_s2": lambda: ops.conv_nd_depthwise(x, k, twos, ones),
        "maxpool_s2": lambda: ops.max_pool_nd(x, (3,) * len(grid), twos, ones),
    }
    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    out = []
    for name, fn in cases.items():
        row = {"op": name, "grid": list(grid), "channels": channels}
        for backend in backends:
            with kernels.use_backend(backend):
                row[f"{backend}_median_s"] = time_call(fn, trials)
        out.append(row)
    return out


def report_dict(rows, grid, seed):
    return {"schema": SCHEMA, "version": SCHEMA_VERSION, "meta": {"grid": list(grid), "seed": seed},
            "rows": [asdict(r) for r in rows]}
