"""Block-by-block reference forward built on the loop-level attention oracle."""

import itertools
import math

import numpy as np
from scipy.special import erf

from ..attention import attention_oracle


def _stem(img, weight, bias, stride, padding):
    """img: (C_in, *S) -> (L, C_out) by direct summation over every output site."""
    kernel = weight.shape[2:]
    spatial = img.shape[1:]
    out_grid = tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(spatial, kernel, stride, padding))
    out = np.zeros((math.prod(out_grid), weight.shape[0]))
    for row, o in enumerate(itertools.product(*(range(n) for n in out_grid))):
        acc = bias.copy()
        for t in itertools.product(*(range(k) for k in kernel)):
            p = tuple(oi * s - pad + ti for oi, s, pad, ti in zip(o, stride, padding, t))
            if all(0 <= pi < n for pi, n in zip(p, spatial)):
                acc = acc + weight[(slice(None), slice(None)) + t] @ img[(slice(None),) + p]
        out[row] = acc
    return out, out_grid


def _norm(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def _max_pool(x, grid, stride, k):
    pad = k // 2
    out_grid = tuple((n + 2 * pad - k) // s + 1 for n, s in zip(grid, stride))
    src = x.reshape(tuple(grid) + (x.shape[-1],))
    out = np.full(tuple(out_grid) + (x.shape[-1],), -np.inf)
    for o in itertools.product(*(range(n) for n in out_grid)):
        for t in itertools.product(range(k), repeat=len(grid)):
            p = tuple(oi * s - pad + ti for oi, s, ti in zip(o, stride, t))
            if all(0 <= pi < n for pi, n in zip(p, grid)):
                out[o] = np.maximum(out[o], src[p])
    return out.reshape(-1, x.shape[-1])


def model_oracle(model, image):
    """Logits of ``model`` for one unbatched input, recomputed without the tensor engine."""
    cfg = model.config
    img = np.moveaxis(np.asarray(image, dtype=np.float64), -1, 0)
    tokens, grid = _stem(img, model.stem_w.data, model.stem_b.data, cfg.stem.stride, cfg.stem.padding)
    if model.pos_embed is not None:
        tokens = tokens + model.pos_embed.data
    eps = cfg.norm_eps
    for spec, p in zip(model.block_specs, model.blocks):
        xn = _norm(tokens, p.norm1[0].data, p.norm1[1].data, eps)
        shortcut = tokens if p.skip is None else xn @ p.skip[0].data + p.skip[1].data
        if max(spec.attn.q_stride) > 1:
            shortcut = _max_pool(shortcut, grid, spec.attn.q_stride, spec.attn.pool_kernel)
        y, grid = attention_oracle(xn, grid, p.attn, spec.attn)
        tokens = shortcut + y
        h = _norm(tokens, p.norm2[0].data, p.norm2[1].data, eps) @ p.fc1[0].data + p.fc1[1].data
        h = 0.5 * h * (1.0 + erf(h / math.sqrt(2.0)))
        tokens = tokens + h @ p.fc2[0].data + p.fc2[1].data
    pooled = _norm(tokens, model.norm[0].data, model.norm[1].data, eps).mean(axis=0)
    return pooled @ model.head[0].data + model.head[1].data
