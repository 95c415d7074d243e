"""Self-check suite: oracle equivalence, gradients, invariances and accounting.

Each property returns its worst measured error and a threshold.  The report
contains no timings, so identical settings give byte-identical JSON.
"""

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from contextvars import copy_context
from dataclasses import asdict, dataclass

import numpy as np

from . import cases
from .attention import (
    RelPosTables,
    attention,
    attention_oracle,
    inject_fault,
    relpos_bias,
    window_layout,
)
from .cost import count_flops, count_params, relpos_table_size
from .model import MViT, tiny_config
from .model.oracle import model_oracle
from .tensor import Tensor, grad_check
from .tensor import count_flops as counted

SCHEMA = "mvit_mechanics.verify_report"
SCHEMA_VERSION = 1


@dataclass
class PropertyResult:
    name: str
    cases: int
    max_error: float
    threshold: float
    passed: bool
    detail: str = ""


def _result(name, n, err, threshold, detail=""):
    err = float(err)
    return PropertyResult(name, n, err, threshold, bool(err <= threshold), detail)


def worker_count():
    raw = os.environ.get("MVIT_MECHANICS_THREADS", "")
    cap = int(raw) if raw.strip().isdigit() and int(raw) > 0 else (os.cpu_count() or 1)
    return max(1, cap)


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------


def oracle_equivalence(n_cases, max_tokens, seed):
    worst, where = 0.0, ""
    for i in range(n_cases):
        case = cases.random_case(seed * 100003 + i, max_tokens)
        fast, grid_fast = attention(Tensor(case.x), case.grid, case.params, case.spec)
        ref, grid_ref = attention_oracle(case.x, case.grid, case.params, case.spec)
        err = math.inf if tuple(grid_fast) != tuple(grid_ref) else float(np.abs(fast.data - ref).max())
        if err > worst:
            worst, where = err, f"case {i}: {case.spec.kind} on {case.grid}"
    return _result("oracle_equivalence", n_cases, worst, 1e-10, where)


def gradient_check(n_seeds, seed):
    """Input and every parameter of a pooling block with all relative terms."""
    worst = 0.0
    checked = 0
    for s in range(n_seeds):
        case = cases.gradcheck_case(seed * 7919 + s)
        params, spec, grid = case.params, case.spec, case.grid
        probe = np.random.default_rng(seed + s).standard_normal(
            (math.prod(spec.pooled_grid(grid, "q")), spec.dim))

        def loss_of_x(t):
            out, _ = attention(t, grid, params, spec)
            return (out * Tensor(probe)).sum()

        worst = max(worst, grad_check(loss_of_x, case.x, eps=1e-5))
        checked += 1
        x = Tensor(case.x)
        for name, tensor in params.named_tensors().items():
            original = tensor

            def loss_of_param(t, name=name):
                params.set_tensor(name, t)
                try:
                    out, _ = attention(x, grid, params, spec)
                finally:
                    params.set_tensor(name, original)
                return (out * Tensor(probe)).sum()

            worst = max(worst, grad_check(loss_of_param, original.data, eps=1e-5))
            checked += 1
    return _result("gradient_check", checked, worst, 1e-4, "max relative error over input and parameters")


def relpos_shift_invariance(n_cases, seed):
    rng = np.random.default_rng(seed)
    mismatches = 0
    for i in range(n_cases):
        mode = ("decomposed", "joint")[i % 2]
        rank = int(rng.choice([2, 3]))
        extents = tuple(int(e) for e in rng.integers(2, 7, size=rank))
        d = int(rng.integers(1, 5))
        tables = RelPosTables.build(mode, extents, d, rng, std=1.0)
        lq, lk = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        cq = np.stack([rng.integers(0, e, size=lq) for e in extents], axis=-1)
        ck = np.stack([rng.integers(0, e, size=lk) for e in extents], axis=-1)
        offset = rng.integers(-50, 51, size=rank)
        q = Tensor(rng.standard_normal((2, lq, d)))
        before = relpos_bias(q, tables, cq, ck).data
        after = relpos_bias(q, tables, cq + offset, ck + offset).data
        mismatches += int(not np.array_equal(before, after))
    return _result("relpos_shift_invariance", n_cases, mismatches, 0, "count of non-identical biases")


def window_roundtrip(n_cases, seed):
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n_cases):
        rank = int(rng.choice([2, 3]))
        grid = tuple(int(g) for g in rng.integers(1, 9, size=rank))
        window = tuple(int(rng.integers(1, g + 3)) for g in grid)
        shift = tuple(int(rng.integers(0, w)) for w in window)
        layout = window_layout(grid, window, shift)
        x = Tensor(rng.standard_normal((2, math.prod(grid), 3)))
        parts = layout.partition(x)
        back = layout.merge(parts)
        ok = np.array_equal(back.data, x.data)
        # every valid slot holds the token at its recorded original position
        pos = layout.positions()
        valid = layout.valid()
        flat = np.ravel_multi_index(tuple(np.minimum(pos, np.asarray(grid) - 1).reshape(-1, rank).T), grid)
        expect = x.data[:, flat].reshape(parts.shape)
        ok &= np.array_equal(parts.data[:, valid], expect[:, valid]) and not parts.data[:, ~valid].any()
        mismatches += int(not ok)
    return _result("window_roundtrip", n_cases, mismatches, 0, "count of inexact partition/merge round trips")


def table_size_law():
    worst = 0
    n = 0
    for t, h, w, d in [(1, 56, 56, 1), (8, 7, 7, 3), (2, 3, 5, 4), (1, 1, 1, 1), (4, 14, 14, 96)]:
        for mode in ("decomposed", "joint"):
            tables = RelPosTables.build(mode, (t, h, w), d)
            worst = max(worst, abs(tables.stored_rows() * d - relpos_table_size(mode, t, h, w, d)))
            n += 1
    ratio = relpos_table_size("joint", 1, 56, 56, 1) / relpos_table_size("decomposed", 1, 56, 56, 1)
    worst = max(worst, abs(ratio - 12321 / 223))
    return _result("table_size_law", n + 1, worst, 0, f"joint/decomposed rows at 1x56x56 = {ratio:.4f}")


def decomposition_identity(n_cases, seed):
    """An additive joint table reproduces the decomposed bias."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        extents = tuple(int(e) for e in rng.integers(1, 6, size=int(rng.choice([2, 3]))))
        d = int(rng.integers(1, 4))
        dec = RelPosTables.build("decomposed", extents, d, rng, std=1.0)
        parts = [t.data for t in dec.tables.values()]
        joint = parts[0]
        for p in parts[1:]:
            joint = (joint[..., None, :] + p[None, ...]).reshape(-1, d)
        jt = RelPosTables("joint", extents, {"joint": Tensor(joint)})
        lq = int(rng.integers(1, 7))
        cq = np.stack([rng.integers(0, e, size=lq) for e in extents], axis=-1)
        ck = np.stack([rng.integers(0, e, size=lq + 1) for e in extents], axis=-1)
        q = Tensor(rng.standard_normal((lq, d)))
        worst = max(worst, float(np.abs(relpos_bias(q, dec, cq, ck).data - relpos_bias(q, jt, cq, ck).data).max()))
    return _result("decomposition_identity", n_cases, worst, 1e-12)


def _tiny_configs():
    out = []
    for attn in ("pooling", "full", "window", "swin", "hwin"):
        for rank in (2, 3):
            out.append(tiny_config(rank=rank, input_size=16 if rank == 2 else 8, attn=attn, blocks=(2, 2),
                                   relpos_terms=("rel_q", "rel_k", "rel_v")))
    return out


def accounting_agreement():
    worst = 0
    configs = _tiny_configs()
    for cfg in configs:
        model = MViT(cfg, seed=1)
        with counted() as tally:
            model.forward(np.zeros(cfg.input_shape + (3,)))
        report = count_flops(cfg)
        worst = max(worst, abs(tally.macs - report.total_macs), abs(tally.elementwise - report.total_elementwise),
                    abs(model.num_params() - count_params(cfg).total_params))
    return _result("accounting_agreement", len(configs), worst, 0, "largest integer mismatch in MACs/params")


def model_oracle_equivalence(seed):
    rng = np.random.default_rng(seed)
    worst = 0.0
    configs = _tiny_configs()
    for i, cfg in enumerate(configs):
        model = MViT(cfg, seed=seed + i, std=0.3, randomize_all=True)
        x = rng.standard_normal(cfg.input_shape + (3,))
        worst = max(worst, float(np.abs(model.forward(x)[0].data[0] - model_oracle(model, x)).max()))
    return _result("model_oracle_equivalence", len(configs), worst, 1e-10)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def _plan(quick, seed):
    if quick:
        return [
            lambda: oracle_equivalence(30, 64, seed),
            lambda: gradient_check(2, seed),
            lambda: relpos_shift_invariance(200, seed),
            lambda: window_roundtrip(100, seed),
            table_size_law,
            lambda: decomposition_identity(50, seed),
            accounting_agreement,
            lambda: model_oracle_equivalence(seed),
        ]
    return [
        lambda: oracle_equivalence(100, 256, seed),
        lambda: gradient_check(20, seed),
        lambda: relpos_shift_invariance(1000, seed),
        lambda: window_roundtrip(500, seed),
        table_size_law,
        lambda: decomposition_identity(200, seed),
        accounting_agreement,
        lambda: model_oracle_equivalence(seed),
    ]


def run_suite(quick=False, seed=0, threads=None, fault=None):
    """Run every property; returns a list of :class:`PropertyResult` in a fixed order.

    ``fault`` names a deliberate corruption of the attention fast path
    (see :func:`inject_fault`), used to prove the suite can fail.
    """
    plan = _plan(quick, seed)
    threads = min(worker_count() if threads is None else max(1, int(threads)), len(plan))

    def run_all():
        if threads == 1:
            return [task() for task in plan]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(copy_context().run, task) for task in plan]
            return [f.result() for f in futures]

    if fault:
        with inject_fault(fault):
            return run_all()
    return run_all()


def report_dict(results, quick, seed, fault=None):
    return {
        "schema": SCHEMA, "version": SCHEMA_VERSION,
        "settings": {"quick": bool(quick), "seed": int(seed), "fault": fault},
        "passed": all(r.passed for r in results),
        "properties": [asdict(r) for r in results],
    }


def report_json(results, quick, seed, fault=None):
    return json.dumps(report_dict(results, quick, seed, fault), indent=2, sort_keys=True) + "\n"
