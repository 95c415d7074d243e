"""Task adapters: patch stem, table resizing, 2-d to 3-d inflation and pyramid taps."""

import copy
import math
from dataclasses import dataclass

import numpy as np

from ..attention import RelPosTables, SpecError, truncated_normal
from ..tensor import DimensionError, Tensor, ops


def patchify_stem(x, weight, bias, stride, padding):
    """Strided convolution from pixels to tokens.

    ``x`` is ``(B, C_in, *spatial)``; returns ``(tokens (B, L, C), grid)``.
    """
    kernel = weight.shape[2:]
    if any(n < k for n, k in zip(x.shape[2:], kernel)):
        raise DimensionError(f"input {x.shape[2:]} is smaller than the stem kernel {kernel}")
    maps = ops.conv_nd(x, weight, bias, stride, padding)
    b, c = maps.shape[:2]
    grid = tuple(maps.shape[2:])
    return ops.permute(ops.reshape(maps, (b, c, math.prod(grid))), (0, 2, 1)), grid


# ---------------------------------------------------------------------------
# relative-position table resizing
# ---------------------------------------------------------------------------


def _interp_matrix(n_old, n_new):
    """(n_new, n_old) linear interpolation matrix with both end rows pinned."""
    if n_old == n_new:
        return np.eye(n_new)
    m = np.zeros((n_new, n_old))
    pos = np.linspace(0.0, n_old - 1, n_new) if n_new > 1 else np.array([(n_old - 1) / 2.0])
    lo = np.clip(np.floor(pos).astype(np.int64), 0, max(n_old - 2, 0))
    frac = pos - lo
    rows = np.arange(n_new)
    if n_old == 1:
        m[:, 0] = 1.0
        return m
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def interpolate_relpos(tables, from_grid, to_grid):
    """Resample ``tables`` from shared extents ``from_grid`` to ``to_grid``.

    Every offset axis of ``2 S - 1`` rows is linearly resampled to
    ``2 S' - 1`` rows (end points kept).  Equal grids return an exact copy.
    """
    from_grid, to_grid = tuple(int(g) for g in from_grid), tuple(int(g) for g in to_grid)
    if min(from_grid + to_grid) < 1:
        raise SpecError(f"extents must be >= 1, got {from_grid} -> {to_grid}")
    if from_grid != tuple(tables.extents):
        raise DimensionError(f"tables hold extents {tables.extents}, not {from_grid}")
    if len(to_grid) != len(from_grid):
        raise DimensionError("source and target grids differ in rank")
    if from_grid == to_grid:
        return tables.copy()
    if tables.mode == "decomposed":
        new = {}
        for (name, t), a, b in zip(tables.tables.items(), from_grid, to_grid):
            new[name] = Tensor(_interp_matrix(2 * a - 1, 2 * b - 1) @ t.data)
        return RelPosTables("decomposed", to_grid, new)
    d = tables.dim
    block = tables.tables["joint"].data.reshape(tuple(2 * a - 1 for a in from_grid) + (d,))
    for axis, (a, b) in enumerate(zip(from_grid, to_grid)):
        block = np.moveaxis(np.tensordot(_interp_matrix(2 * a - 1, 2 * b - 1), block, axes=(1, axis)), 0, axis)
    return RelPosTables("joint", to_grid, {"joint": Tensor(block.reshape(-1, d))})


def resize_model(model, input_shape):
    """Copy of ``model`` for a new input size, with every table interpolated to fit."""
    new_cfg = model.config.with_(input_shape=tuple(input_shape))
    out = copy.copy(model)
    out.config = new_cfg
    out.block_specs = new_cfg.blocks()
    out.blocks = []
    for old_spec, new_spec, blk in zip(model.block_specs, out.block_specs, model.blocks):
        blk = copy.copy(blk)
        blk.attn = copy.copy(blk.attn)
        src = old_spec.attn.shared_extents(old_spec.grid_in)
        dst = new_spec.attn.shared_extents(new_spec.grid_in)
        blk.attn.relpos = {k: interpolate_relpos(t, src, dst) for k, t in blk.attn.relpos.items()}
        out.blocks.append(blk)
    if model.pos_embed is not None:
        raise SpecError("absolute embeddings are tied to one input size")
    return out


# ---------------------------------------------------------------------------
# 2-d -> 3-d inflation
# ---------------------------------------------------------------------------


def inflate_2d_to_3d(weights2d, temporal_extent):
    """Place a 2-d conv kernel ``(C_out, C_in, kh, kw)`` at the temporal centre of a 3-d one.

    All other temporal taps are zero.
    """
    w = np.asarray(weights2d.data if isinstance(weights2d, Tensor) else weights2d, dtype=np.float64)
    if temporal_extent < 1 or temporal_extent % 2 == 0:
        raise ValueError(f"temporal extent must be a positive odd integer, got {temporal_extent}")
    if w.ndim != 4:
        raise DimensionError(f"expected (C_out, C_in, kh, kw) weights, got {w.shape}")
    out = np.zeros(w.shape[:2] + (temporal_extent,) + w.shape[2:])
    out[:, :, temporal_extent // 2] = w
    return Tensor(out)


def inflate_relpos(tables, temporal_extent):
    """Spatial tables -> spatiotemporal tables whose temporal part is zero.

    Decomposed tables gain a zero ``t`` table.  A joint table is repeated
    over every temporal offset, so lookups stay purely spatial either way.
    """
    if temporal_extent < 1:
        raise SpecError("temporal extent must be >= 1")
    rows_t = 2 * temporal_extent - 1
    extents = (temporal_extent,) + tuple(tables.extents)
    if tables.mode == "decomposed":
        new = {"t": Tensor(np.zeros((rows_t, tables.dim)))}
        new.update({k: Tensor(v.data.copy()) for k, v in tables.tables.items()})
        return RelPosTables("decomposed", extents, new)
    joint = np.tile(tables.tables["joint"].data, (rows_t, 1))
    return RelPosTables("joint", extents, {"joint": Tensor(joint)})


def inflate_model(model2d, video_config, seed=0):
    """Video network whose weights come from the image network ``model2d``.

    The stem is inflated to the video stem's temporal extent and every
    relative table gains a zero temporal part; all other tensors are copied.
    """
    from .network import MViT

    video = MViT(video_config, seed=seed)
    if len(video.blocks) != len(model2d.blocks):
        raise SpecError("image and video networks differ in depth")
    video.stem_w = inflate_2d_to_3d(model2d.stem_w, video_config.stem.kernel[0])
    video.stem_b = Tensor(model2d.stem_b.data.copy())
    for spec, blk2, blk3 in zip(video.block_specs, model2d.blocks, video.blocks):
        for name, t in blk2.named_tensors().items():
            if name.startswith("attn.rel_") or name.startswith("attn.pool_"):
                continue
            dst = blk3.named_tensors()[name]
            if dst.shape != t.shape:
                raise DimensionError(f"{name}: {t.shape} cannot seed {dst.shape}")
            dst.data = t.data.copy()
        for which, kernel in blk2.attn.pool.items():
            blk3.attn.pool[which] = _inflate_depthwise(kernel.data, blk3.attn.pool[which].shape[1])
        t_extent = spec.attn.shared_extents(spec.grid_in)[0]
        for term, tables in blk2.attn.relpos.items():
            inflated = inflate_relpos(tables, t_extent)
            want = blk3.attn.relpos[term].extents
            blk3.attn.relpos[term] = interpolate_relpos(inflated, inflated.extents, want)
    video.norm = tuple(Tensor(t.data.copy()) for t in model2d.norm)
    if video.head[0].shape == model2d.head[0].shape:
        video.head = tuple(Tensor(t.data.copy()) for t in model2d.head)
    return video


def _inflate_depthwise(kernel2d, temporal_extent):
    out = np.zeros((kernel2d.shape[0], temporal_extent) + kernel2d.shape[1:])
    out[:, temporal_extent // 2] = kernel2d
    return Tensor(out)


# ---------------------------------------------------------------------------
# feature pyramid
# ---------------------------------------------------------------------------


@dataclass
class FPNParams:
    laterals: list   # one (W (C_i, out), b (out,)) per level

    @classmethod
    def init(cls, channels, out_channels, rng, std=0.02):
        return cls([(Tensor(truncated_normal(rng, (c, out_channels), std)), Tensor(np.zeros(out_channels)))
                    for c in channels])

    @property
    def out_channels(self):
        return self.laterals[0][0].shape[1]


def upsample_nearest(maps, grid_to):
    """Nearest-neighbour resize of ``(B, C, *grid)`` maps to ``grid_to``."""
    out = maps
    for a, (g_from, g_to) in enumerate(zip(maps.shape[2:], grid_to)):
        if g_from != g_to:
            out = ops.take(out, (np.arange(g_to) * g_from) // g_to, 2 + a)
    return out


def fpn_taps(pyramid, params):
    """Top-down pyramid: 1x1 lateral projections plus nearest upsample-and-add.

    Returns one ``(B, out_channels, *grid)`` map per level, finest first.
    """
    if len(pyramid) != len(params.laterals):
        raise DimensionError(f"{len(pyramid)} levels but {len(params.laterals)} lateral projections")
    lateral_maps = []
    for level, (w, b) in zip(pyramid.levels, params.laterals):
        if level.channels != w.shape[0]:
            raise DimensionError(f"level with {level.channels} channels meets a lateral expecting {w.shape[0]}")
        proj = ops.add(ops.matmul(level.tokens, w), b)
        n = proj.shape[0]
        lateral_maps.append(ops.reshape(ops.permute(proj, (0, 2, 1)), (n, w.shape[1]) + tuple(level.grid)))
    outputs = [None] * len(lateral_maps)
    outputs[-1] = lateral_maps[-1]
    for i in range(len(lateral_maps) - 2, -1, -1):
        outputs[i] = ops.add(lateral_maps[i], upsample_nearest(outputs[i + 1], lateral_maps[i].shape[2:]))
    return outputs
