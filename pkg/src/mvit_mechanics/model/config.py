"""Network descriptions: variants, stage layout and per-block attention specs."""

import json
from dataclasses import asdict, dataclass, field, replace

from ..attention import AttentionSpec, SpecError, hwin_schedule
from ..tensor.kernels import out_extent

SCHEMA = "mvit_mechanics.model_config"
SCHEMA_VERSION = 1

VARIANTS = {
    "T": dict(channels=(96, 192, 384, 768), blocks=(1, 2, 5, 2), heads=(1, 2, 4, 8)),
    "S": dict(channels=(96, 192, 384, 768), blocks=(1, 2, 11, 2), heads=(1, 2, 4, 8)),
    "B": dict(channels=(96, 192, 384, 768), blocks=(2, 3, 16, 3), heads=(1, 2, 4, 8)),
    "L": dict(channels=(144, 288, 576, 1152), blocks=(2, 6, 36, 4), heads=(2, 4, 8, 16)),
    "H": dict(channels=(192, 384, 768, 1536), blocks=(4, 8, 60, 8), heads=(3, 6, 12, 24)),
}
TASKS = ("classify", "detect", "video")
ATTN_OVERRIDES = ("pooling", "full", "window", "swin", "hwin")
DETECT_WINDOWS = (56, 28, 14, 7)
KV_STRIDE = 4
DEFAULT_INPUT = {"classify": (224, 224), "detect": (224, 224), "video": (16, 224, 224)}
NUM_CLASSES = {"classify": 1000, "detect": 1000, "video": 400}


@dataclass(frozen=True)
class StemSpec:
    kernel: tuple
    stride: tuple
    padding: tuple
    out_channels: int
    in_channels: int = 3

    def out_grid(self, input_shape):
        input_shape = tuple(input_shape)
        if len(input_shape) != len(self.kernel):
            raise SpecError(f"input {input_shape} does not match a rank-{len(self.kernel)} stem")
        if any(n < k for n, k in zip(input_shape, self.kernel)):
            raise SpecError(f"input {input_shape} is smaller than the stem kernel {self.kernel}")
        return tuple(out_extent(n, k, s, p) for n, k, s, p in zip(input_shape, self.kernel, self.stride, self.padding))


@dataclass(frozen=True)
class StageSpec:
    """One stage.  ``grid`` is the stage resolution (after the entry query pooling).

    ``window`` is measured on the stage resolution; ``kinds`` lists the
    attention kind of every block.
    """

    channels: int
    blocks: int
    heads: int
    grid: tuple
    q_stride: tuple
    kv_stride: tuple
    kinds: tuple
    window: tuple = None

    def __post_init__(self):
        if self.channels % self.heads:
            raise SpecError(f"{self.channels} channels are not divisible by {self.heads} heads")
        if len(self.kinds) != self.blocks:
            raise SpecError("one attention kind per block is required")


@dataclass(frozen=True)
class BlockSpec:
    index: int
    stage: int           # 1-based
    index_in_stage: int
    d_in: int
    d_out: int
    grid_in: tuple
    attn: AttentionSpec

    @property
    def grid_out(self):
        return self.attn.pooled_grid(self.grid_in, "q")

    @property
    def kv_grid(self):
        return self.attn.pooled_grid(self.grid_in, "kv")

    @property
    def needs_projection(self):
        return self.d_in != self.d_out

    @property
    def skip_pool(self):
        return max(self.attn.q_stride) > 1


@dataclass(frozen=True)
class ModelConfig:
    name: str
    task: str
    input_shape: tuple
    stem: StemSpec
    stages: tuple
    mlp_ratio: float = 4.0
    num_classes: int = 1000
    relpos_mode: str = "decomposed"
    relpos_terms: tuple = ("rel_q",)
    rel_k_index: str = "j"
    pool_mode: str = "depthwise_conv"
    pool_at_unit_stride: bool = True
    residual_pooling: bool = True
    norm_eps: float = 1e-6
    overrides: dict = field(default_factory=dict, compare=False)

    @property
    def rank(self):
        return len(self.stem.kernel)

    @property
    def embed_dim(self):
        return self.stem.out_channels

    @property
    def depth(self):
        return sum(s.blocks for s in self.stages)

    @property
    def stem_grid(self):
        return self.stem.out_grid(self.input_shape)

    @property
    def absolute_pos(self):
        return self.relpos_mode == "absolute_only"

    def blocks(self):
        """Per-block specs, walking the stages in order."""
        out, grid, d_in, index = [], self.stem_grid, self.embed_dim, 0
        relpos = self.relpos_mode if self.relpos_mode in ("joint", "decomposed") else "none"
        terms = self.relpos_terms if relpos != "none" else ()
        for s, stage in enumerate(self.stages, start=1):
            for b, kind in enumerate(stage.kinds):
                q_stride = stage.q_stride if b == 0 else (1,) * self.rank
                window = shift = None
                if kind in ("fixed_window", "shifted_window", "hybrid_window_member"):
                    window = tuple(w * qs for w, qs in zip(stage.window, q_stride))
                    if kind == "shifted_window":
                        shift = tuple(w // 2 for w in window) if b % 2 else (0,) * self.rank
                spec = AttentionSpec(
                    kind=kind, heads=stage.heads, head_dim=stage.channels // stage.heads,
                    q_stride=q_stride, kv_stride=stage.kv_stride, pool_mode=self.pool_mode,
                    pool_at_unit_stride=self.pool_at_unit_stride and kind != "full",
                    relpos_mode=relpos, relpos_terms=terms, rel_k_index=self.rel_k_index,
                    residual_pooling=self.residual_pooling, window=window, shift=shift,
                    norm_eps=self.norm_eps)
                blk = BlockSpec(index, s, b, d_in, stage.channels, grid, spec)
                out.append(blk)
                grid, d_in, index = blk.grid_out, stage.channels, index + 1
        return out

    def stage_grids(self):
        """Output grid of every stage (its last block's query grid)."""
        return [blk.grid_out for blk in self.blocks()
                if blk.index_in_stage == self.stages[blk.stage - 1].blocks - 1]

    def with_(self, **changes):
        return replace(self, **changes)

    # serialisation -------------------------------------------------------
    def to_dict(self):
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        return {"schema": SCHEMA, "version": SCHEMA_VERSION, "config": _jsonable(d)}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc):
        if doc.get("schema") != SCHEMA:
            raise SpecError(f"not a model config document (schema {doc.get('schema')!r})")
        if doc.get("version") != SCHEMA_VERSION:
            raise SpecError(f"unsupported config version {doc.get('version')!r}")
        c = dict(doc["config"])
        c["stem"] = StemSpec(**{k: _tup(v) for k, v in c["stem"].items()})
        c["stages"] = tuple(StageSpec(**{k: _tup(v) for k, v in s.items()}) for s in c["stages"])
        c["input_shape"] = tuple(c["input_shape"])
        c["relpos_terms"] = tuple(c["relpos_terms"])
        return cls(**c)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _tup(v):
    return tuple(v) if isinstance(v, list) else v


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def parse_input(text, task="classify"):
    """``"224"`` -> (224, 224); ``"224x192"`` -> (224, 192); video ``"224x224x16"`` -> (16, 224, 224)."""
    parts = [int(p) for p in str(text).lower().split("x")]
    if min(parts) < 1:
        raise SpecError(f"input extents must be positive: {text}")
    if task == "video":
        if len(parts) == 1:
            return (DEFAULT_INPUT["video"][0], parts[0], parts[0])
        if len(parts) == 2:
            return (DEFAULT_INPUT["video"][0],) + tuple(parts)
        if len(parts) == 3:
            return (parts[2], parts[0], parts[1])
    else:
        if len(parts) == 1:
            return (parts[0], parts[0])
        if len(parts) == 2:
            return tuple(parts)
    raise SpecError(f"cannot read input shape {text!r} for task {task}")


def _kinds_for(attn, stage_index, blocks):
    if attn == "pooling":
        return ("pooling",) * blocks
    if attn == "full":
        return ("full",) * blocks
    if attn == "window":
        return ("fixed_window",) * blocks
    if attn == "swin":
        return ("shifted_window",) * blocks
    if attn == "hwin":
        return tuple(hwin_schedule(stage_index, b, blocks) for b in range(blocks))
    raise SpecError(f"unknown attention override {attn!r}; choose from {ATTN_OVERRIDES}")


def build_variant(name, task="classify", input_shape=None, attn=None, kv_stride=None, relpos=None,
                  relpos_terms=None, windows=None, num_classes=None, **extra):
    """Configuration of variant ``name`` (T, S, B, L or H) for ``task``.

    Key/value pooling starts at ``kv_stride`` (4) per spatial axis in stage 1
    and halves at every stage transition, never below 1.  Queries pool with
    stride 2 at the first block of stages 2-4.  The detect task runs hybrid
    window attention with stage windows ``[56, 28, 14, 7]``.
    """
    if name not in VARIANTS:
        raise SpecError(f"unknown variant {name!r}; choose from {tuple(VARIANTS)}")
    if task not in TASKS:
        raise SpecError(f"unknown task {task!r}; choose from {TASKS}")
    table = VARIANTS[name]
    video = task == "video"
    rank = 3 if video else 2
    input_shape = tuple(DEFAULT_INPUT[task] if input_shape is None else input_shape)
    if len(input_shape) != rank:
        raise SpecError(f"task {task} needs a rank-{rank} input, got {input_shape}")
    if video:
        stem = StemSpec((3, 7, 7), (2, 4, 4), (1, 3, 3), table["channels"][0])
    else:
        stem = StemSpec((7, 7), (4, 4), (3, 3), table["channels"][0])
    attn = attn or ("hwin" if task == "detect" else "pooling")
    kv0 = KV_STRIDE if kv_stride is None else int(kv_stride)
    if kv0 < 1:
        raise SpecError("kv_stride must be >= 1")
    if attn == "full":
        kv0 = 1
    windows = tuple(windows or DETECT_WINDOWS)
    if len(windows) != 4:
        raise SpecError("one window per stage is required")

    stages, grid = [], stem.out_grid(input_shape)
    lead = (1,) if video else ()
    for s in range(4):
        q = lead + (2, 2) if s else (1,) * rank
        if s:
            grid = tuple(out_extent(n, 3, st, 1) for n, st in zip(grid, q))
        kv = lead + (max(kv0 // 2 ** s, 1),) * 2
        kinds = _kinds_for(attn, s + 1, table["blocks"][s])
        win = None
        if attn in ("window", "swin", "hwin"):
            # recorded on every stage, even where the blocks attend globally
            win = ((grid[0],) if video else ()) + (windows[s], windows[s])
        stages.append(StageSpec(table["channels"][s], table["blocks"][s], table["heads"][s],
                                grid, q, kv, kinds, win))

    overrides = {k: v for k, v in dict(attn=attn, kv_stride=kv_stride, relpos=relpos).items() if v is not None}
    cfg = dict(name=name, task=task, input_shape=input_shape, stem=stem, stages=tuple(stages),
               num_classes=num_classes or NUM_CLASSES[task], overrides=overrides)
    if relpos is not None:
        cfg["relpos_mode"] = {"abs": "absolute_only"}.get(relpos, relpos)
    if relpos_terms is not None:
        cfg["relpos_terms"] = tuple(relpos_terms)
    cfg.update(extra)
    return ModelConfig(**cfg)


def vit_b_config(attn="pooling", kv_stride=2, input_size=224, patch=16, **extra):
    """A single-stage, ViT-B shaped network (12 blocks, width 768, 12 heads, patch-16 stem)."""
    stem = StemSpec((patch, patch), (patch, patch), (0, 0), 768)
    grid = stem.out_grid((input_size, input_size))
    if attn == "full":
        kv_stride = 1
    stage = StageSpec(768, 12, 12, grid, (1, 1), (kv_stride, kv_stride),
                      ("full" if attn == "full" else "pooling",) * 12)
    cfg = dict(name="ViT-B", task="classify", input_shape=(input_size, input_size), stem=stem,
               stages=(stage,), overrides={"attn": attn, "kv_stride": kv_stride})
    cfg.update(extra)
    return ModelConfig(**cfg)


def tiny_config(rank=2, input_size=16, channels=(4, 8), heads=(1, 2), blocks=(1, 1), kv_stride=2,
                attn="pooling", windows=(2, 2), **extra):
    """A desk-scale multi-stage network for oracle comparisons."""
    stem = StemSpec((3,) * rank, (2,) * rank, (1,) * rank, channels[0], in_channels=3)
    input_shape = (input_size,) * rank
    grid = stem.out_grid(input_shape)
    stages = []
    for s, (c, h, n) in enumerate(zip(channels, heads, blocks)):
        q = (2,) * rank if s else (1,) * rank
        if s:
            grid = tuple(out_extent(g, 3, 2, 1) for g in grid)
        kinds = _kinds_for(attn, min(s + 1, 4), n)
        win = (windows[s],) * rank if any(k not in ("pooling", "full") for k in kinds) else None
        kv = (1,) * rank if attn == "full" else (max(kv_stride // 2 ** s, 1),) * rank
        stages.append(StageSpec(c, n, h, grid, q, kv, kinds, win))
    cfg = dict(name="tiny", task="classify", input_shape=input_shape, stem=stem, stages=tuple(stages),
               num_classes=5)
    cfg.update(extra)
    return ModelConfig(**cfg)


def param_table_row(config):
    """(channels, blocks, heads) lists as they appear in a variant table."""
    return ([s.channels for s in config.stages], [s.blocks for s in config.stages],
            [s.heads for s in config.stages])
