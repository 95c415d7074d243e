"""Seeded generators of random attention problems for self-checks and tests."""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .attention import RELPOS_TERMS, AttentionParams, AttentionSpec
from .attention.types import out_extent

KIND_CHOICES = ("full", "fixed_window", "shifted_window", "hybrid_window_member", "pooling")


@dataclass
class AttentionCase:
    spec: AttentionSpec
    grid: tuple
    params: AttentionParams
    x: np.ndarray

    @property
    def tokens(self):
        return math.prod(self.grid)


def _term_subsets():
    out = []
    for r in range(1, len(RELPOS_TERMS) + 1):
        out.extend(itertools.combinations(RELPOS_TERMS, r))
    return out


TERM_SUBSETS = _term_subsets()


def random_spec(rng, grid, kind=None):
    """A random valid spec for ``grid`` (strides from {1, 2, 4})."""
    rank = len(grid)
    kind = kind or KIND_CHOICES[rng.integers(len(KIND_CHOICES))]
    q_stride = tuple(int(rng.choice([1, 1, 2, 4])) for _ in range(rank))
    kv_stride = (1,) * rank if kind == "full" else tuple(int(rng.choice([1, 2, 4])) for _ in range(rank))
    mode = ("none", "decomposed", "joint")[rng.integers(3)]
    terms = TERM_SUBSETS[rng.integers(len(TERM_SUBSETS))] if mode != "none" else ()
    kw = {}
    if kind in ("fixed_window", "shifted_window", "hybrid_window_member"):
        kw["window"] = tuple(int(rng.integers(1, g + 2)) for g in grid)
        if kind == "shifted_window":
            kw["shift"] = tuple(int(rng.integers(0, w)) for w in kw["window"])
    pool_mode = "depthwise_conv" if rng.random() < 0.75 else "max"
    unit = bool(rng.random() < 0.7)
    # rel_k indexed by i needs equal query and key lengths
    gq = tuple(out_extent(n, 3, s, 1) if (max(q_stride) > 1 or unit) else n for n, s in zip(grid, q_stride))
    gk = tuple(out_extent(n, 3, s, 1) if (max(kv_stride) > 1 or unit) else n for n, s in zip(grid, kv_stride))
    rel_k_index = "i" if "rel_k" in terms and gq == gk and not kw and rng.random() < 0.3 else "j"
    return AttentionSpec(kind=kind, heads=int(rng.integers(1, 4)), head_dim=int(rng.integers(1, 5)),
                         q_stride=q_stride, kv_stride=kv_stride, pool_mode=pool_mode,
                         pool_at_unit_stride=unit, relpos_mode=mode, relpos_terms=terms,
                         rel_k_index=rel_k_index, residual_pooling=bool(rng.random() < 0.7), **kw)


def random_grid(rng, max_tokens=256):
    rank = 3 if rng.random() < 0.25 else 2
    while True:
        hi = 6 if rank == 3 else 17
        grid = tuple(int(rng.integers(1, hi)) for _ in range(rank))
        if math.prod(grid) <= max_tokens:
            return grid


def random_case(seed, max_tokens=256, kind=None):
    """Spec, parameters (biases and norms randomised too) and an input for ``seed``."""
    rng = np.random.default_rng(seed)
    grid = random_grid(rng, max_tokens)
    spec = random_spec(rng, grid, kind)
    d_in = int(rng.integers(1, 6))
    params = AttentionParams.init(spec, d_in, grid, rng, std=0.5, randomize_all=True)
    x = rng.standard_normal((math.prod(grid), d_in))
    return AttentionCase(spec, grid, params, x)


def gradcheck_case(seed, grid=(4, 4), d_in=3):
    """Pooling attention with decomposed rel-pos on every term, residual pooling on."""
    rng = np.random.default_rng(seed)
    spec = AttentionSpec(kind="pooling", heads=2, head_dim=2, q_stride=(2, 2), kv_stride=(2, 2),
                         relpos_mode="decomposed", relpos_terms=RELPOS_TERMS, residual_pooling=True)
    params = AttentionParams.init(spec, d_in, grid, rng, std=0.5, randomize_all=True)
    x = rng.standard_normal((math.prod(grid), d_in))
    return AttentionCase(spec, grid, params, x)
