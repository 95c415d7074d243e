import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvit_mechanics.attention import RelPosTables, SpecError, relpos_bias
from mvit_mechanics.model import (
    DETECT_WINDOWS,
    VARIANTS,
    FPNParams,
    ModelConfig,
    MViT,
    build_variant,
    fpn_taps,
    inflate_2d_to_3d,
    inflate_model,
    inflate_relpos,
    interpolate_relpos,
    load_weights,
    observed_trace,
    parse_input,
    patchify_stem,
    resize_model,
    save_weights,
    shape_trace,
    tiny_config,
    upsample_nearest,
)
from mvit_mechanics.model.oracle import model_oracle
from mvit_mechanics.tensor import DimensionError, Tensor

TABLE_ROWS = {
    "T": ([96, 192, 384, 768], [1, 2, 5, 2], [1, 2, 4, 8]),
    "S": ([96, 192, 384, 768], [1, 2, 11, 2], [1, 2, 4, 8]),
    "B": ([96, 192, 384, 768], [2, 3, 16, 3], [1, 2, 4, 8]),
    "L": ([144, 288, 576, 1152], [2, 6, 36, 4], [2, 4, 8, 16]),
    "H": ([192, 384, 768, 1536], [4, 8, 60, 8], [3, 6, 12, 24]),
}
ATTNS = ("pooling", "full", "window", "swin", "hwin")


def stem_weights(c_out, kernel, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal((c_out, 3) + kernel)), Tensor(rng.standard_normal(c_out))


# --- configuration -------------------------------------------------------------


def test_tiny_variant_third_stage_has_five_blocks():
    assert build_variant("T", "classify").stages[2].blocks == 5


def test_large_variant_starts_at_144_channels():
    assert build_variant("L", "classify").stages[0].channels == 144


def test_detect_stage_two_window_is_28():
    assert build_variant("S", "detect").stages[1].window == (28, 28)


@pytest.mark.parametrize("name", sorted(VARIANTS))
@pytest.mark.parametrize("task", ["classify", "detect"])
def test_variants_follow_table_rows_and_resolutions(name, task):
    cfg = build_variant(name, task)
    channels, blocks, heads = TABLE_ROWS[name]
    assert [s.channels for s in cfg.stages] == channels
    assert [s.blocks for s in cfg.stages] == blocks
    assert [s.heads for s in cfg.stages] == heads
    assert cfg.stage_grids() == [(56, 56), (28, 28), (14, 14), (7, 7)]


def test_video_grids_keep_eight_frames():
    cfg = build_variant("S", "video")
    assert cfg.stage_grids() == [(8, 56, 56), (8, 28, 28), (8, 14, 14), (8, 7, 7)]


def test_kv_strides_halve_per_stage():
    assert [s.kv_stride for s in build_variant("B").stages] == [(4, 4), (2, 2), (1, 1), (1, 1)]


@pytest.mark.parametrize("name", sorted(VARIANTS))
def test_detect_has_global_last_blocks_only(name):
    cfg = build_variant(name, "detect")
    for s, stage in enumerate(cfg.stages, start=1):
        for b, kind in enumerate(stage.kinds):
            expect = "pooling" if s == 1 or b == stage.blocks - 1 else "hybrid_window_member"
            assert kind == expect
    assert [s.window for s in cfg.stages] == [(w, w) for w in DETECT_WINDOWS]


def test_channel_expansion_happens_in_attention():
    cfg = tiny_config(channels=(4, 8), blocks=(1, 2))
    model = MViT(cfg)
    first = model.blocks[1]
    assert first.attn.w_q.shape == (4, 8)
    assert first.fc1[0].shape == (8, 32) and first.fc2[0].shape == (32, 8)
    for blk in model.blocks:
        assert blk.fc1[0].shape[0] == blk.fc2[0].shape[1]


@pytest.mark.parametrize("text,task,shape", [("224", "classify", (224, 224)), ("224x192", "detect", (224, 192)),
                                             ("224x224x16", "video", (16, 224, 224)), ("112", "video", (16, 112, 112))])
def test_parse_input(text, task, shape):
    assert parse_input(text, task) == shape


@pytest.mark.parametrize("text", ["0", "1x2x3x4", "-5"])
def test_parse_input_rejects(text):
    with pytest.raises((SpecError, ValueError)):
        parse_input(text)


def test_unknown_variant_and_task():
    with pytest.raises(SpecError):
        build_variant("XL")
    with pytest.raises(SpecError):
        build_variant("T", "segment")


def test_config_json_roundtrip():
    cfg = build_variant("S", "detect", relpos="joint")
    assert ModelConfig.from_json(cfg.to_json()) == cfg


def test_config_json_rejects_foreign_schema():
    doc = json.loads(build_variant("T").to_json())
    doc["schema"] = "other"
    with pytest.raises(SpecError):
        ModelConfig.from_dict(doc)


# --- stem ----------------------------------------------------------------------


def test_stem_224_gives_56_grid():
    w, b = stem_weights(2, (7, 7))
    tokens, grid = patchify_stem(Tensor(np.zeros((1, 3, 224, 224))), w, b, (4, 4), (3, 3))
    assert grid == (56, 56) and tokens.shape == (1, 3136, 2)


def test_stem_448_gives_112_grid():
    w, b = stem_weights(1, (7, 7))
    _, grid = patchify_stem(Tensor(np.zeros((1, 3, 448, 448))), w, b, (4, 4), (3, 3))
    assert grid == (112, 112)


def test_stem_sixteen_frames_give_eight():
    w, b = stem_weights(1, (3, 7, 7))
    _, grid = patchify_stem(Tensor(np.zeros((1, 3, 16, 32, 32))), w, b, (2, 4, 4), (1, 3, 3))
    assert grid == (8, 8, 8)


def test_stem_rejects_small_inputs():
    w, b = stem_weights(1, (7, 7))
    with pytest.raises(DimensionError):
        patchify_stem(Tensor(np.zeros((1, 3, 5, 5))), w, b, (4, 4), (3, 3))


# --- forward -------------------------------------------------------------------


def test_zero_head_gives_zero_logits():
    model = MViT(tiny_config(), seed=1, std=0.3, randomize_all=True)
    model.set_tensor("head.w", Tensor(np.zeros(model.head[0].shape)))
    model.set_tensor("head.b", Tensor(np.zeros(model.head[1].shape)))
    logits, _ = model(np.random.default_rng(0).standard_normal((16, 16, 3)))
    assert not logits.data.any()


@settings(max_examples=10)
@given(attn=st.sampled_from(ATTNS), rank=st.sampled_from([2, 3]), seed=st.integers(0, 2**31))
def test_forward_equals_block_oracle(attn, rank, seed):
    cfg = tiny_config(rank=rank, input_size=12 if rank == 2 else 6, attn=attn, blocks=(2, 2),
                      relpos_terms=("rel_q", "rel_k", "rel_v"))
    model = MViT(cfg, seed=seed % 1000, std=0.3, randomize_all=True)
    x = np.random.default_rng(seed).standard_normal(cfg.input_shape + (3,))
    logits, _ = model(x)
    assert np.abs(logits.data[0] - model_oracle(model, x)).max() <= 1e-10


def test_pyramid_levels_follow_stage_grids():
    cfg = tiny_config(channels=(4, 8, 8, 16), heads=(1, 1, 2, 2), blocks=(1, 1, 1, 1), input_size=32)
    _, pyramid = MViT(cfg)(np.zeros((2, 32, 32, 3)))
    assert pyramid.grids == cfg.stage_grids()
    assert pyramid.channels == [4, 8, 8, 16]
    assert pyramid[0].as_map().shape == (2, 4, 16, 16)


def test_forward_rejects_wrong_input():
    with pytest.raises(DimensionError):
        MViT(tiny_config())(np.zeros((16, 16, 4)))


def test_batched_forward_matches_single():
    model = MViT(tiny_config(attn="swin", blocks=(2, 2)), seed=3, std=0.3, randomize_all=True)
    xs = np.random.default_rng(1).standard_normal((2, 16, 16, 3))
    batch = model(xs)[0].data
    for i in range(2):
        np.testing.assert_allclose(batch[i], model(xs[i])[0].data[0], rtol=0, atol=1e-13)


# --- shape trace -----------------------------------------------------------------


def test_trace_first_block_kv_grid():
    row = shape_trace(build_variant("T"))[0]
    assert row["kv_grid"] == [14, 14] and row["L_k"] == 196


def test_trace_last_stage():
    row = shape_trace(build_variant("T"))[-1]
    assert row["grid"] == [7, 7] and row["channels"] == 768


def test_trace_detect_last_block_is_global():
    rows = shape_trace(build_variant("S", "detect"))
    assert rows[-1]["kind"] == "global" and rows[-2]["kind"] == "hybrid_window_member"


def test_trace_112_input_ends_at_4():
    rows = shape_trace(build_variant("T"), (112, 112))
    assert len(rows) == 10 and rows[-1]["grid"] == [4, 4]


@pytest.mark.parametrize("attn", ATTNS)
@pytest.mark.parametrize("rank", [2, 3])
def test_trace_equals_observed_shapes(attn, rank):
    cfg = tiny_config(rank=rank, input_size=16 if rank == 2 else 8, attn=attn, blocks=(2, 2))
    model = MViT(cfg)
    predicted = shape_trace(cfg)
    observed = observed_trace(model, np.zeros(cfg.input_shape + (3,)))
    keys = ("grid_in", "grid", "kv_grid", "channels", "L_q", "L_k", "L_v")
    assert [{k: r[k] for k in keys} for r in predicted] == [{k: r[k] for k in keys} for r in observed]


# --- table interpolation ---------------------------------------------------------


def test_interpolate_same_grid_is_bit_identical():
    t = RelPosTables.build("decomposed", (5, 7), 3, np.random.default_rng(0), std=1.0)
    out = interpolate_relpos(t, (5, 7), (5, 7))
    for k in t.tables:
        np.testing.assert_array_equal(out.tables[k].data, t.tables[k].data)
        assert out.tables[k] is not t.tables[k]


def test_interpolate_keeps_linear_ramp():
    ramp = np.arange(3.0)[:, None] * np.array([[1.0, -2.0]]) + 0.5
    t = RelPosTables("decomposed", (2, 2), {"h": Tensor(ramp), "w": Tensor(ramp.copy())})
    out = interpolate_relpos(t, (2, 2), (3, 3))
    expect = np.linspace(0, 2, 5)[:, None] * np.array([[1.0, -2.0]]) + 0.5
    np.testing.assert_allclose(out.tables["h"].data, expect, atol=1e-15)


def test_interpolate_56_to_64_rows():
    t = RelPosTables.build("decomposed", (56, 56), 2, np.random.default_rng(1))
    out = interpolate_relpos(t, (56, 56), (64, 64))
    assert [v.shape[0] for v in t.tables.values()] == [111, 111]
    assert [v.shape[0] for v in out.tables.values()] == [127, 127]


def test_interpolate_joint_is_separable():
    rng = np.random.default_rng(2)
    dec = RelPosTables.build("decomposed", (3, 3), 1, rng, std=1.0)
    joint = RelPosTables("joint", (3, 3), {"joint": Tensor(
        (dec.tables["h"].data[:, None] + dec.tables["w"].data[None]).reshape(-1, 1))})
    a, b = interpolate_relpos(dec, (3, 3), (5, 4)), interpolate_relpos(joint, (3, 3), (5, 4))
    c = np.stack(np.meshgrid(np.arange(5), np.arange(4), indexing="ij"), -1).reshape(-1, 2)
    q = Tensor(rng.standard_normal((20, 1)))
    np.testing.assert_allclose(relpos_bias(q, a, c, c).data, relpos_bias(q, b, c, c).data, atol=1e-14)


def test_resized_model_runs_at_new_size():
    cfg = tiny_config(input_size=16)
    model = MViT(cfg, seed=2)
    bigger = resize_model(model, (24, 24))
    logits, pyramid = bigger(np.zeros((24, 24, 3)))
    assert logits.shape == (1, 5) and pyramid.grids[0] == (12, 12)
    with pytest.raises(DimensionError, match="configured"):
        model(np.zeros((24, 24, 3)))


# --- inflation -------------------------------------------------------------------


def test_inflate_extent_one_keeps_weights():
    w = np.random.default_rng(0).standard_normal((4, 3, 7, 7))
    np.testing.assert_array_equal(inflate_2d_to_3d(w, 1).data[:, :, 0], w)


def test_inflate_rejects_even_extent():
    with pytest.raises(ValueError):
        inflate_2d_to_3d(np.zeros((1, 1, 3, 3)), 2)


def test_inflated_stem_on_replicated_frames():
    w, b = stem_weights(4, (7, 7), seed=3)
    img = np.random.default_rng(4).standard_normal((1, 3, 32, 32))
    tokens2d, grid2d = patchify_stem(Tensor(img), w, b, (4, 4), (3, 3))
    clip = np.repeat(img[:, :, None], 6, axis=2)
    tokens3d, grid3d = patchify_stem(Tensor(clip), inflate_2d_to_3d(w, 3), b, (1, 4, 4), (1, 3, 3))
    assert grid3d == (6,) + grid2d
    per_frame = tokens3d.data.reshape(1, 6, -1, 4)
    for t in range(6):
        assert np.abs(per_frame[0, t] - tokens2d.data[0]).max() <= 1e-12


@pytest.mark.parametrize("mode", ["decomposed", "joint"])
def test_inflated_tables_are_spatial_only(mode):
    rng = np.random.default_rng(5)
    t2 = RelPosTables.build(mode, (3, 3), 2, rng, std=1.0)
    t3 = inflate_relpos(t2, 4)
    if mode == "decomposed":
        assert not t3.tables["t"].data.any()
    c2 = np.stack(np.meshgrid(np.arange(3), np.arange(3), indexing="ij"), -1).reshape(-1, 2)
    c3 = np.stack(np.meshgrid(np.arange(4), np.arange(3), np.arange(3), indexing="ij"), -1).reshape(-1, 3)
    q = rng.standard_normal((36, 2))
    e3 = relpos_bias(Tensor(q), t3, c3, c3).data
    for i in range(36):
        e2 = relpos_bias(Tensor(q[i:i + 1]), t2, c2[i % 9][None], c2).data[0]
        np.testing.assert_allclose(e3[i], np.tile(e2, 4), atol=1e-14)


def test_inflated_network_reproduces_image_logits_on_static_clip():
    cfg2 = tiny_config(rank=2, input_size=8, blocks=(1, 2), relpos_terms=("rel_q", "rel_v"))
    cfg3 = tiny_config(rank=3, input_size=8, blocks=(1, 2), relpos_terms=("rel_q", "rel_v"))
    model2 = MViT(cfg2, seed=6, std=0.3, randomize_all=True)
    video = inflate_model(model2, cfg3)
    img = np.random.default_rng(7).standard_normal((8, 8, 3))
    clip = np.repeat(img[None], 8, axis=0)
    np.testing.assert_allclose(video(clip)[0].data, model2(img)[0].data, rtol=0, atol=1e-10)


# --- feature pyramid -------------------------------------------------------------


def pyramid_and_params(seed=0):
    cfg = tiny_config(channels=(4, 8, 8, 16), heads=(1, 1, 2, 2), blocks=(1, 1, 1, 1), input_size=32)
    _, pyramid = MViT(cfg, seed=seed, std=0.3)(np.random.default_rng(seed).standard_normal((32, 32, 3)))
    return pyramid, FPNParams.init(pyramid.channels, 3, np.random.default_rng(seed + 1), std=0.5)


def test_fpn_zero_laterals_copy_top_level_down():
    pyramid, params = pyramid_and_params()
    for w, b in params.laterals[:-1]:
        w.data[:] = 0.0
    outs = fpn_taps(pyramid, params)
    for lvl in range(3):
        np.testing.assert_array_equal(outs[lvl].data, upsample_nearest(outs[3], outs[lvl].shape[2:]).data)


def test_fpn_without_top_down_signal_is_lateral_projection():
    pyramid, params = pyramid_and_params()
    for w, b in params.laterals[1:]:
        w.data[:] = 0.0
    outs = fpn_taps(pyramid, params)
    w, b = params.laterals[0]
    lateral = (pyramid[0].tokens.data @ w.data + b.data).transpose(0, 2, 1).reshape(outs[0].shape)
    np.testing.assert_allclose(outs[0].data, lateral, atol=1e-15)


def test_fpn_matches_recursive_definition():
    pyramid, params = pyramid_and_params(3)

    def nearest(a, grid):
        idx = [np.arange(g) * a.shape[2 + i] // g for i, g in enumerate(grid)]
        return a[:, :, idx[0]][:, :, :, idx[1]]

    def level(i):
        w, b = params.laterals[i]
        lat = (pyramid[i].tokens.data @ w.data + b.data).transpose(0, 2, 1)
        lat = lat.reshape(lat.shape[:2] + tuple(pyramid[i].grid))
        return lat if i == 3 else lat + nearest(level(i + 1), pyramid[i].grid)

    for i, out in enumerate(fpn_taps(pyramid, params)):
        np.testing.assert_allclose(out.data, level(i), atol=1e-14)


def test_fpn_rejects_channel_mismatch():
    pyramid, _ = pyramid_and_params()
    with pytest.raises(DimensionError):
        fpn_taps(pyramid, FPNParams.init([4, 8, 8, 8], 3, np.random.default_rng(0)))


# --- serialisation ---------------------------------------------------------------


def test_weights_roundtrip_bit_exact(tmp_path):
    model = MViT(tiny_config(attn="swin", relpos_mode="joint"), seed=4, std=0.3, randomize_all=True)
    path = tmp_path / "tiny"
    save_weights(model, path)
    loaded = load_weights(path)
    assert loaded.config == model.config
    for name, t in model.named_tensors().items():
        np.testing.assert_array_equal(loaded.named_tensors()[name].data, t.data)
    manifest = json.loads((tmp_path / "tiny.json").read_text())
    assert manifest["schema"] == "mvit_mechanics.weights" and manifest["version"] == 1
    total = sum(math.prod(t["shape"]) for t in manifest["tensors"])
    assert (tmp_path / "tiny.bin").stat().st_size == 8 * total


def test_initial_weights_are_small_and_biases_zero():
    model = MViT(tiny_config(), seed=0)
    for name, t in model.named_tensors().items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("b", "beta") or leaf.startswith("b_"):
            assert not t.data.any(), name
    assert np.abs(model.blocks[0].attn.w_q.data).max() <= 0.04 + 1e-12
