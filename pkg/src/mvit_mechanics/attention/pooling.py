import math

from ..tensor import DimensionError, ops


def check_grid(x, grid):
    if x.ndim < 2 or math.prod(grid) != x.shape[-2]:
        raise DimensionError(f"grid {tuple(grid)} does not hold the {x.shape[-2] if x.ndim >= 2 else '?'} tokens of {x.shape}")


def pool(x, grid, stride, mode="depthwise_conv", kernel=None, kernel_size=3, padding=None):
    """Pool a token sequence laid out on a 2-d or 3-d grid.

    ``x`` is ``(L, C)`` or ``(B, L, C)`` with ``L = prod(grid)``.  In
    ``depthwise_conv`` mode ``kernel`` is a ``(C, k, ...)`` tensor; in ``max``
    mode ``kernel_size`` gives the window.  Padding defaults to ``k // 2``,
    which with odd ``k`` yields ``ceil(extent / stride)`` per axis.

    Returns ``(pooled, pooled_grid)``.
    """
    grid = tuple(int(g) for g in grid)
    check_grid(x, grid)
    batched = x.ndim == 3
    if x.ndim not in (2, 3):
        raise DimensionError(f"pool expects (L, C) or (B, L, C), got {x.shape}")
    if len(stride) != len(grid):
        raise DimensionError(f"stride {tuple(stride)} does not match grid {grid}")
    xb = x if batched else ops.reshape(x, (1,) + x.shape)
    b, _, c = xb.shape
    maps = ops.reshape(ops.permute(xb, (0, 2, 1)), (b, c) + grid)
    if mode == "depthwise_conv":
        if kernel is None:
            raise ValueError("depthwise_conv pooling needs a kernel tensor")
        k = kernel.shape[1:]
        pad = tuple(n // 2 for n in k) if padding is None else padding
        pooled = ops.conv_nd_depthwise(maps, kernel, stride, pad)
    elif mode == "max":
        k = (kernel_size,) * len(grid) if isinstance(kernel_size, int) else tuple(kernel_size)
        pad = tuple(n // 2 for n in k) if padding is None else padding
        pooled = ops.max_pool_nd(maps, k, stride, pad)
    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    out_grid = pooled.shape[2:]
    out = ops.permute(ops.reshape(pooled, (b, c, math.prod(out_grid))), (0, 2, 1))
    if not batched:
        out = ops.reshape(out, out.shape[1:])
    return out, tuple(out_grid)
