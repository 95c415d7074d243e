"""Network configurations, weights, forward pass and task adapters."""

from .config import (
    DETECT_WINDOWS,
    TASKS,
    VARIANTS,
    BlockSpec,
    ModelConfig,
    StageSpec,
    StemSpec,
    build_variant,
    parse_input,
    tiny_config,
    vit_b_config,
)
from .network import FeaturePyramid, MViT, StageFeature, observed_trace, shape_trace
from .adapters import (
    FPNParams,
    inflate_2d_to_3d,
    inflate_model,
    inflate_relpos,
    interpolate_relpos,
    patchify_stem,
    resize_model,
    upsample_nearest,
    fpn_taps,
)
from .io import load_weights, save_weights
