"""Weights and forward pass of a multiscale vision transformer."""

import math
from dataclasses import dataclass, field

import numpy as np

from ..attention import AttentionParams, attention, record_shapes, truncated_normal
from ..tensor import DimensionError, Tensor, ops
from .adapters import patchify_stem
from .config import ModelConfig


@dataclass
class StageFeature:
    tokens: Tensor   # (B, L, C)
    grid: tuple
    channels: int

    def as_map(self):
        """(B, C, *grid) view of the tokens."""
        b = self.tokens.shape[0]
        return ops.reshape(ops.permute(self.tokens, (0, 2, 1)), (b, self.channels) + self.grid)


@dataclass
class FeaturePyramid:
    levels: list = field(default_factory=list)

    @property
    def grids(self):
        return [lv.grid for lv in self.levels]

    @property
    def channels(self):
        return [lv.channels for lv in self.levels]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


@dataclass
class BlockParams:
    norm1: tuple
    attn: AttentionParams
    norm2: tuple
    fc1: tuple
    fc2: tuple
    skip: tuple = None   # (W, b) channel projection when the width changes

    def named_tensors(self):
        out = {"norm1.gamma": self.norm1[0], "norm1.beta": self.norm1[1]}
        if self.skip is not None:
            out["skip.w"], out["skip.b"] = self.skip
        out.update({f"attn.{k}": v for k, v in self.attn.named_tensors().items()})
        out["norm2.gamma"], out["norm2.beta"] = self.norm2
        out["fc1.w"], out["fc1.b"] = self.fc1
        out["fc2.w"], out["fc2.b"] = self.fc2
        return out


def _norm(n, rng=None):
    if rng is None:
        return Tensor(np.ones(n)), Tensor(np.zeros(n))
    return Tensor(1.0 + 0.1 * rng.standard_normal(n)), Tensor(0.1 * rng.standard_normal(n))


def _linear_params(rng, d_in, d_out, std, randomize_bias):
    w = Tensor(truncated_normal(rng, (d_in, d_out), std))
    b = Tensor(truncated_normal(rng, (d_out,), std) if randomize_bias else np.zeros(d_out))
    return w, b


class MViT:
    """A built network: config plus weights.

    Weights are created from ``seed`` (truncated normal, std 0.02; zero
    biases; identity norms).  ``randomize_all`` also draws biases and norm
    affines at random, which makes oracle comparisons more searching.
    """

    def __init__(self, config: ModelConfig, seed=0, std=0.02, randomize_all=False):
        self.config = config
        rng = np.random.default_rng(seed)
        self.block_specs = config.blocks()
        c0, cin = config.embed_dim, config.stem.in_channels
        self.stem_w = Tensor(truncated_normal(rng, (c0, cin) + tuple(config.stem.kernel), std))
        self.stem_b = Tensor(truncated_normal(rng, (c0,), std) if randomize_all else np.zeros(c0))
        self.pos_embed = None
        if config.absolute_pos:
            self.pos_embed = Tensor(truncated_normal(rng, (math.prod(config.stem_grid), c0), std))
        self.blocks = []
        extra = rng if randomize_all else None
        for spec in self.block_specs:
            d_in, d_out = spec.d_in, spec.d_out
            hidden = int(d_out * config.mlp_ratio)
            attn = AttentionParams.init(spec.attn, d_in, spec.grid_in, rng, std=std, randomize_all=randomize_all)
            skip = _linear_params(rng, d_in, d_out, std, randomize_all) if spec.needs_projection else None
            self.blocks.append(BlockParams(
                norm1=_norm(d_in, extra), attn=attn, norm2=_norm(d_out, extra),
                fc1=_linear_params(rng, d_out, hidden, std, randomize_all),
                fc2=_linear_params(rng, hidden, d_out, std, randomize_all), skip=skip))
        c_last = config.stages[-1].channels
        self.norm = _norm(c_last, extra)
        self.head = _linear_params(rng, c_last, config.num_classes, std, randomize_all)

    # parameters ---------------------------------------------------------
    def named_tensors(self):
        out = {"stem.w": self.stem_w, "stem.b": self.stem_b}
        if self.pos_embed is not None:
            out["pos_embed"] = self.pos_embed
        for i, blk in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": v for k, v in blk.named_tensors().items()})
        out["norm.gamma"], out["norm.beta"] = self.norm
        out["head.w"], out["head.b"] = self.head
        return out

    def num_params(self):
        return sum(t.size for t in self.named_tensors().values())

    def set_tensor(self, name, tensor):
        """Replace a named tensor (shape must be unchanged)."""
        current = self.named_tensors()
        if name not in current:
            raise KeyError(name)
        if current[name].shape != tensor.shape:
            raise DimensionError(f"{name}: expected shape {current[name].shape}, got {tensor.shape}")
        current[name].data = tensor.data
        return self

    # forward ------------------------------------------------------------
    def _prepare_input(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        rank = self.config.rank
        if x.ndim == rank + 1:
            x = ops.reshape(x, (1,) + x.shape)
        if x.ndim != rank + 2 or x.shape[-1] != self.config.stem.in_channels:
            raise DimensionError(
                f"expected input (B?, {'T, ' if rank == 3 else ''}H, W, {self.config.stem.in_channels}), got {x.shape}")
        axes = (0, rank + 1) + tuple(range(1, rank + 1))
        return ops.permute(x, axes)

    def stem(self, x):
        """Pixels (B, C_in, *spatial) -> tokens (B, L, C) and the token grid."""
        s = self.config.stem
        tokens, grid = patchify_stem(x, self.stem_w, self.stem_b, s.stride, s.padding)
        if self.pos_embed is not None:
            if self.pos_embed.shape[0] != tokens.shape[1]:
                raise DimensionError(f"absolute embedding covers {self.pos_embed.shape[0]} tokens, input has {tokens.shape[1]}")
            tokens = ops.add(tokens, self.pos_embed)
        return tokens, grid

    def block_forward(self, i, x, grid):
        spec, p = self.block_specs[i], self.blocks[i]
        if tuple(grid) != tuple(spec.grid_in):
            raise DimensionError(f"block {i}: input grid {tuple(grid)} != configured {tuple(spec.grid_in)}")
        if x.shape[-1] != spec.d_in:
            raise DimensionError(f"block {i}: input width {x.shape[-1]} != {spec.d_in}")
        eps = self.config.norm_eps
        xn = ops.layer_norm(x, *p.norm1, eps)
        shortcut = x
        if p.skip is not None:
            shortcut = ops.add(ops.matmul(xn, p.skip[0]), p.skip[1])
        if spec.skip_pool:
            shortcut = _max_pool_tokens(shortcut, grid, spec.attn.q_stride, spec.attn.pool_kernel)
        y, grid_out = attention(xn, grid, p.attn, spec.attn)
        x = ops.add(shortcut, y)
        h = ops.layer_norm(x, *p.norm2, eps)
        h = ops.gelu(ops.add(ops.matmul(h, p.fc1[0]), p.fc1[1]))
        h = ops.add(ops.matmul(h, p.fc2[0]), p.fc2[1])
        return ops.add(x, h), grid_out

    def forward_features(self, x):
        tokens, grid = self.stem(self._prepare_input(x))
        pyramid = FeaturePyramid()
        for i, spec in enumerate(self.block_specs):
            try:
                tokens, grid = self.block_forward(i, tokens, grid)
            except DimensionError as err:
                if str(err).startswith(f"block {i}:"):
                    raise
                raise DimensionError(f"block {i}: {err}") from err
            if spec.index_in_stage == self.config.stages[spec.stage - 1].blocks - 1:
                pyramid.levels.append(StageFeature(tokens, tuple(grid), spec.d_out))
        return tokens, grid, pyramid

    def forward(self, x):
        """Returns ``(logits (B, classes), FeaturePyramid)``."""
        tokens, _, pyramid = self.forward_features(x)
        pooled = ops.mean(ops.layer_norm(tokens, *self.norm, self.config.norm_eps), axis=1)
        logits = ops.add(ops.matmul(pooled, self.head[0]), self.head[1])
        return logits, pyramid

    __call__ = forward


def _max_pool_tokens(x, grid, stride, kernel):
    b, n, c = x.shape
    maps = ops.reshape(ops.permute(x, (0, 2, 1)), (b, c) + tuple(grid))
    k = (kernel,) * len(grid)
    pooled = ops.max_pool_nd(maps, k, stride, tuple(kk // 2 for kk in k))
    return ops.permute(ops.reshape(pooled, (b, c, math.prod(pooled.shape[2:]))), (0, 2, 1))


def shape_trace(config, input_shape=None):
    """Per-block shapes implied by ``config`` (no arithmetic on tensors).

    Each record holds the block's grids, width, heads, query/key/value
    lengths and attention kind.
    """
    if input_shape is not None and tuple(input_shape) != tuple(config.input_shape):
        config = config.with_(input_shape=tuple(input_shape))
    rows = []
    for blk in config.blocks():
        a = blk.attn
        rows.append({
            "block": blk.index, "stage": blk.stage, "index_in_stage": blk.index_in_stage,
            "kind": "global" if a.kind in ("pooling", "full") else a.kind,
            "attn_kind": a.kind,
            "grid_in": list(blk.grid_in), "grid": list(blk.grid_out), "kv_grid": list(blk.kv_grid),
            "channels_in": blk.d_in, "channels": blk.d_out, "heads": a.heads, "head_dim": a.head_dim,
            "L_q": math.prod(blk.grid_out), "L_k": math.prod(blk.kv_grid), "L_v": math.prod(blk.kv_grid),
            "q_stride": list(a.q_stride), "kv_stride": list(a.kv_stride),
            "window": list(a.window) if a.window else None,
            "stage_window": list(config.stages[blk.stage - 1].window) if a.window else None,
            "shift": list(a.shift) if a.shift else None,
        })
    return rows


def observed_trace(model, x):
    """Shapes seen during a real forward of ``model`` on ``x`` (one record per block)."""
    tokens, grid = model.stem(model._prepare_input(x))
    rows = []
    for i, spec in enumerate(model.block_specs):
        grid_in = grid
        with record_shapes() as log:
            tokens, grid = model.block_forward(i, tokens, grid)
        rows.append({"block": i, "grid_in": list(grid_in), "grid": list(grid), "kv_grid": list(log[0]["grid_k"]),
                     "channels": tokens.shape[-1], "L_q": log[0]["L_q"], "L_k": log[0]["L_k"],
                     "L_v": log[0]["L_v"]})
    return rows
