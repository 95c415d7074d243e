"""Acceptance suite: one test per criterion, each printing a single pass/fail line.

The summary section at the end of the pytest run repeats every line in
criterion order.
"""

import subprocess
import sys
import time

import numpy as np
import pytest

from mvit_mechanics import cases, verify
from mvit_mechanics.attention import KINDS, relpos_bias
from mvit_mechanics.cost import count_flops, count_params, relpos_table_size
from mvit_mechanics.model import (
    DETECT_WINDOWS,
    MViT,
    build_variant,
    inflate_2d_to_3d,
    inflate_model,
    patchify_stem,
    shape_trace,
    tiny_config,
    vit_b_config,
)
from mvit_mechanics.tensor import Tensor
from mvit_mechanics.tensor import count_flops as counted

PARAMS_M = {"T": 24, "S": 35, "B": 52, "L": 218, "H": 667}
GFLOPS = {"T": 4.7, "S": 7.0, "B": 10.2, "L": 39.6, "H": 120.6}


def rel(value, target):
    return abs(value / target - 1)


def test_criterion_01_parameter_counts(acceptance):
    parts, ok = [], True
    for name, target in PARAMS_M.items():
        start = time.perf_counter()
        total = count_params(build_variant(name)).total_params
        elapsed = time.perf_counter() - start
        good = rel(total, target * 1e6) <= 0.05 and elapsed < 1.0
        ok &= good
        parts.append(f"{name} {total / 1e6:.2f}M ({rel(total, target * 1e6):+.1%} of {target}M, {elapsed * 1e3:.0f} ms)")
    assert acceptance(1, "parameter counts within 5%", ok, "; ".join(parts))


def test_criterion_02_flop_counts(acceptance):
    parts, ok = [], True
    for name, target in GFLOPS.items():
        flops = count_flops(build_variant(name), (224, 224)).total_flops
        ok &= rel(flops, target * 1e9) <= 0.10
        parts.append(f"{name} {flops / 1e9:.2f}G ({rel(flops, target * 1e9):.1%})")
    for name in ("T", "S"):
        cfg = build_variant(name)
        model = MViT(cfg, seed=0)
        start = time.perf_counter()
        with counted() as tally:
            model(np.zeros(cfg.input_shape + (3,)))
        elapsed = time.perf_counter() - start
        report = count_flops(cfg)
        exact = (tally.macs, tally.elementwise) == (report.total_macs, report.total_elementwise)
        ok &= exact and elapsed < 120
        parts.append(f"{name} instrumented {'==' if exact else '!='} analytic ({elapsed:.1f} s)")
    assert acceptance(2, "FLOPs within 10% at 224, instrumented equals analytic", ok, "; ".join(parts))


def test_criterion_03_pooling_vs_full_ratio(acceptance):
    # the 17.5 / 10.9 row: the same 12-block, width-768 network with key/value pooling (stride 2)
    full = count_flops(vit_b_config("full")).total_flops
    pooled = count_flops(vit_b_config("pooling", kv_stride=2)).total_flops
    target = 17.5 / 10.9
    ratio = full / pooled
    ok = rel(ratio, target) <= 0.10
    detail = (f"full {full / 1e9:.2f}G, pooling {pooled / 1e9:.2f}G, ratio {ratio:.3f} vs {target:.3f} "
              f"({rel(ratio, target):.1%} off)")
    assert acceptance(3, "pooling vs full FLOP ratio within 10%", ok, detail)


def test_criterion_04_stage_grids(acceptance):
    want = [(56, 56), (28, 28), (14, 14), (7, 7)]
    bad = []
    for name in PARAMS_M:
        for task in ("classify", "detect"):
            cfg = build_variant(name, task, input_shape=(224, 224))
            traced = []
            for row in shape_trace(cfg):
                if row["index_in_stage"] == 0:
                    traced.append(tuple(row["grid"]))
            if cfg.stage_grids() != want or traced != want:
                bad.append(f"{name}/{task}")
    ok = not bad
    assert acceptance(4, "stage grids 56/28/14/7 at 224", ok,
                      "all variants and tasks match" if ok else f"mismatch in {bad}")


def test_criterion_05_oracle_equivalence(acceptance):
    seen = {"kinds": set(), "strides": set(), "modes": set(), "residual": set(), "terms": set()}
    for i in range(100):
        spec = cases.random_case(i, 256).spec
        seen["kinds"].add(spec.kind)
        seen["strides"] |= set(spec.q_stride) | set(spec.kv_stride)
        seen["modes"].add(spec.relpos_mode)
        seen["residual"].add(spec.residual_pooling)
        seen["terms"].add(spec.relpos_terms)
    covered = (seen["kinds"] == set(KINDS) and seen["strides"] == {1, 2, 4}
               and seen["modes"] == {"none", "decomposed", "joint"} and seen["residual"] == {True, False}
               and len(seen["terms"]) > 4)
    start = time.perf_counter()
    result = verify.oracle_equivalence(100, 256, seed=0)
    elapsed = time.perf_counter() - start
    ok = result.passed and covered and elapsed < 300
    detail = (f"{result.cases} cases, max abs error {result.max_error:.2e} (<= 1e-10), "
              f"{len(seen['terms'])} term subsets, {elapsed:.1f} s")
    assert acceptance(5, "fast path equals naive oracle", ok, detail)


def test_criterion_06_gradient_check(acceptance):
    result = verify.gradient_check(20, seed=0)
    detail = f"20 seeds, {result.cases} tensors, max relative error {result.max_error:.2e} (<= 1e-4)"
    assert acceptance(6, "pooling block gradients", result.passed, detail)


def test_criterion_07_shift_invariance(acceptance):
    # the property alternates decomposed and joint tables: 2000 pairs is 1000 per mode
    result = verify.relpos_shift_invariance(2000, seed=0)
    ok = result.passed and result.max_error == 0
    detail = f"{result.cases} translated pairs, {int(result.max_error)} non-identical biases"
    assert acceptance(7, "relative bias is translation invariant", ok, detail)


def test_criterion_08_table_size_law(acceptance):
    ok = True
    for t in (1, 2, 8):
        for h in (1, 7, 56):
            for w in (1, 14, 56):
                for d in (1, 96):
                    ok &= relpos_table_size("decomposed", t, h, w, d) == (2 * t - 1 + 2 * h - 1 + 2 * w - 1) * d
                    ok &= relpos_table_size("joint", t, h, w, d) == (2 * t - 1) * (2 * h - 1) * (2 * w - 1) * d
    joint, dec = relpos_table_size("joint", 1, 56, 56, 1), relpos_table_size("decomposed", 1, 56, 56, 1)
    ok &= (joint, dec) == (12321, 223)
    assert acceptance(8, "relative table sizes", ok, f"closed forms hold; 56x56 rows joint {joint} / decomposed {dec}")


def test_criterion_09_hwin_structure(acceptance):
    problems = []
    for name in PARAMS_M:
        cfg = build_variant(name, "detect")
        if [s.window for s in cfg.stages] != [(w, w) for w in DETECT_WINDOWS] or list(DETECT_WINDOWS) != [56, 28, 14, 7]:
            problems.append(f"{name}: windows")
        for s, stage in enumerate(cfg.stages, start=1):
            if s == 1:
                continue
            for b, kind in enumerate(stage.kinds):
                windowed = kind == "hybrid_window_member"
                if windowed == (b == stage.blocks - 1):
                    problems.append(f"{name}: stage {s} block {b}")
        rows = [r for r in shape_trace(cfg) if r["stage"] > 1]
        if any((r["window"] is None) != (r["kind"] == "global") for r in rows):
            problems.append(f"{name}: trace")
    ok = not problems
    assert acceptance(9, "hybrid window layout for detection", ok,
                      "last block of stages 2-4 global, others windowed, windows [56, 28, 14, 7]"
                      if ok else "; ".join(problems))


def test_criterion_10_inflation(acceptance):
    rng = np.random.default_rng(10)
    w, b = Tensor(rng.standard_normal((8, 3, 7, 7))), Tensor(rng.standard_normal(8))
    img = rng.standard_normal((1, 3, 32, 32))
    tokens2d, grid2d = patchify_stem(Tensor(img), w, b, (4, 4), (3, 3))
    clip = np.repeat(img[:, :, None], 4, axis=2)
    tokens3d, grid3d = patchify_stem(Tensor(clip), inflate_2d_to_3d(w, 3), b, (2, 4, 4), (1, 3, 3))
    frames = tokens3d.data.reshape((1, grid3d[0], -1, 8))
    stem_err = max(float(np.abs(frames[0, t] - tokens2d.data[0]).max()) for t in range(grid3d[0]))

    cfg2 = tiny_config(rank=2, input_size=8, blocks=(1, 2), relpos_terms=("rel_q", "rel_k"))
    cfg3 = tiny_config(rank=3, input_size=8, blocks=(1, 2), relpos_terms=("rel_q", "rel_k"))
    model2 = MViT(cfg2, seed=11, std=0.3, randomize_all=True)
    video = inflate_model(model2, cfg3)
    zero_t, bias_err = True, 0.0
    for blk2, blk3 in zip(model2.blocks, video.blocks):
        for term, t3 in blk3.attn.relpos.items():
            zero_t &= not t3.tables["t"].data.any()
            t2 = blk2.attn.relpos[term]
            frames_n, h, w_ = t3.extents
            c2 = np.stack(np.meshgrid(np.arange(h), np.arange(w_), indexing="ij"), -1).reshape(-1, 2)
            c3 = np.concatenate([np.repeat(np.arange(frames_n), h * w_)[:, None], np.tile(c2, (frames_n, 1))], 1)
            q = rng.standard_normal((2, len(c3), t3.dim))
            e3 = relpos_bias(Tensor(q), t3, c3, c3).data
            e2 = relpos_bias(Tensor(q), t2, c3[:, 1:], c3[:, 1:]).data
            bias_err = max(bias_err, float(np.abs(e3 - e2).max()))
    ok = stem_err <= 1e-12 and zero_t and bias_err <= 1e-12
    detail = f"stem per-frame error {stem_err:.1e}, temporal tables zero: {zero_t}, bias error {bias_err:.1e}"
    assert acceptance(10, "2-d to 3-d inflation", ok, detail)


def _cli(*argv):
    proc = subprocess.run([sys.executable, "-m", "mvit_mechanics.cli", *argv], capture_output=True, check=False)
    return proc.returncode, proc.stdout


@pytest.mark.slow
def test_criterion_11_determinism(acceptance):
    runs = {}
    for label, argv in {"verify": ("verify", "--seed", "3"), "cost": ("cost", "--variant", "B", "--seed", "3"),
                        "cost csv": ("cost", "--variant", "S", "--task", "detect", "--format", "csv")}.items():
        runs[label] = [_cli(*argv) for _ in range(2)]
    same = {label: a == b and a[0] == 0 and bool(a[1]) for label, (a, b) in runs.items()}
    ok = all(same.values())
    detail = ", ".join(f"{label} {'identical' if v else 'differs'}" for label, v in same.items())
    assert acceptance(11, "byte-identical reruns", ok, detail)
