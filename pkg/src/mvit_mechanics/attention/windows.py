"""Non-overlapping (optionally cyclically shifted) window layouts.

A layout pads each grid axis at the end up to ``count * window``, rolls it
left by ``shift`` and cuts it into ``count`` windows.  The padded-then-rolled
position ``p'`` holds the token originally at ``(p' + shift) mod padded``.
Shifted layouts also label each position with a region (0, 1 or 2, the
usual three slices ``[0, P - w)``, ``[P - w, P - s)``, ``[P - s, P)``) so that
tokens wrapped around the border do not attend to each other.
"""

import math
from dataclasses import dataclass

import numpy as np

from ..tensor import DimensionError, ops
from .types import SpecError


@dataclass(frozen=True)
class AxisWindows:
    extent: int
    window: int
    count: int
    shift: int = 0

    def __post_init__(self):
        if self.window < 1 or self.count < 1:
            raise SpecError("window extent and count must be >= 1")
        if not 0 <= self.shift < self.window:
            raise SpecError(f"shift {self.shift} must lie in [0, {self.window})")
        if self.count * self.window < self.extent:
            raise DimensionError(f"{self.count} windows of {self.window} cannot cover extent {self.extent}")

    @property
    def padded(self):
        return self.count * self.window

    def rolled_positions(self):
        return np.arange(self.padded, dtype=np.int64).reshape(self.count, self.window)

    def original(self):
        """Original position held by each (window, offset) slot; ``>= extent`` means padding."""
        return (self.rolled_positions() + self.shift) % self.padded

    def region(self):
        p = self.rolled_positions()
        if self.shift == 0:
            return np.zeros_like(p)
        return np.where(p < self.padded - self.window, 0, np.where(p < self.padded - self.shift, 1, 2))


@dataclass(frozen=True)
class WindowLayout:
    axes: tuple

    @property
    def grid(self):
        return tuple(a.extent for a in self.axes)

    @property
    def num_windows(self):
        return math.prod(a.count for a in self.axes)

    @property
    def tokens_per_window(self):
        return math.prod(a.window for a in self.axes)

    @property
    def trivial(self):
        return all(a.count == 1 and a.padded == a.extent and a.shift == 0 for a in self.axes)

    @property
    def shifted(self):
        return any(a.shift for a in self.axes)

    def _per_token(self, arrays):
        """Broadcast per-axis (count, window) arrays to (num_windows, tokens, rank)."""
        rank = len(self.axes)
        out = []
        for a, arr in enumerate(arrays):
            shape = [1] * (2 * rank)
            shape[a], shape[rank + a] = arr.shape
            full = np.broadcast_to(arr.reshape(shape), [x.count for x in self.axes] + [x.window for x in self.axes])
            out.append(full.reshape(self.num_windows, self.tokens_per_window))
        return np.stack(out, axis=-1)

    def positions(self):
        """Original grid position of every window slot, shape (num_windows, tokens, rank)."""
        return self._per_token([a.original() for a in self.axes])

    def valid(self):
        pos = self.positions()
        return np.all(pos < np.asarray(self.grid), axis=-1)

    def regions(self):
        """Combined region label per slot, shape (num_windows, tokens)."""
        labels = self._per_token([a.region() for a in self.axes])
        flat = np.zeros(labels.shape[:-1], dtype=np.int64)
        for a in range(labels.shape[-1]):
            flat = flat * 3 + labels[..., a]
        return flat

    def partition(self, x):
        """``(..., L, D)`` tokens -> ``(..., num_windows, tokens_per_window, D)``."""
        rank = len(self.axes)
        lead = x.shape[:-2]
        nl = len(lead)
        if x.shape[-2] != math.prod(self.grid):
            raise DimensionError(f"{x.shape[-2]} tokens do not fill grid {self.grid}")
        if self.trivial:
            return ops.reshape(x, lead + (1,) + x.shape[-2:])
        t = ops.reshape(x, lead + self.grid + x.shape[-1:])
        widths = [(0, 0)] * t.ndim
        for a, ax in enumerate(self.axes):
            widths[nl + a] = (0, ax.padded - ax.extent)
        if any(w != (0, 0) for w in widths):
            t = ops.pad(t, widths)
        for a, ax in enumerate(self.axes):
            if ax.shift:
                t = ops.take(t, (np.arange(ax.padded) + ax.shift) % ax.padded, nl + a)
        split = lead + tuple(v for ax in self.axes for v in (ax.count, ax.window)) + x.shape[-1:]
        t = ops.reshape(t, split)
        order = (list(range(nl)) + [nl + 2 * a for a in range(rank)]
                 + [nl + 2 * a + 1 for a in range(rank)] + [nl + 2 * rank])
        t = ops.permute(t, order)
        return ops.reshape(t, lead + (self.num_windows, self.tokens_per_window, x.shape[-1]))

    def merge(self, w):
        """Inverse of :meth:`partition` (padding slots are dropped)."""
        rank = len(self.axes)
        lead = w.shape[:-3]
        nl = len(lead)
        d = w.shape[-1]
        if w.shape[-3:-1] != (self.num_windows, self.tokens_per_window):
            raise DimensionError(f"windows {w.shape} do not match layout {self}")
        if self.trivial:
            return ops.reshape(w, lead + w.shape[-2:])
        t = ops.reshape(w, lead + tuple(a.count for a in self.axes) + tuple(a.window for a in self.axes) + (d,))
        order = list(range(nl))
        for a in range(rank):
            order += [nl + a, nl + rank + a]
        t = ops.permute(t, order + [nl + 2 * rank])
        t = ops.reshape(t, lead + tuple(a.padded for a in self.axes) + (d,))
        for a, ax in enumerate(self.axes):
            if ax.shift or ax.padded != ax.extent:
                t = ops.take(t, (np.arange(ax.extent) - ax.shift) % ax.padded, nl + a)
        return ops.reshape(t, lead + (math.prod(self.grid), d))


def effective_window(grid, window, shift):
    """Clamp windows to the grid; a clamped axis is never shifted."""
    if len(window) != len(grid):
        raise SpecError(f"window {window} does not match grid {grid}")
    shift = (0,) * len(grid) if shift is None else tuple(shift)
    if min(window) < 1:
        raise SpecError(f"window extents must be >= 1, got {window}")
    eff, eff_shift = [], []
    for n, w, s in zip(grid, window, shift):
        if w >= n:
            eff.append(n)
            eff_shift.append(0)
        else:
            if not 0 <= s < w:
                raise SpecError(f"shift {s} must lie in [0, {w})")
            eff.append(w)
            eff_shift.append(s)
    return tuple(eff), tuple(eff_shift)


def window_layout(grid, window, shift=None, stride=None, pooled_grid=None):
    """Layout for a ``grid``-shaped block input, optionally seen through a pooling stride.

    Window counts come from the input grid; on a pooled grid of stride ``s``
    each window spans ``ceil(w / s)`` slots and shifts by ``floor(shift / s)``.
    """
    grid = tuple(int(g) for g in grid)
    win, sh = effective_window(grid, tuple(window), shift)
    stride = (1,) * len(grid) if stride is None else tuple(stride)
    pooled_grid = grid if pooled_grid is None else tuple(pooled_grid)
    axes = []
    for n, w, s, st, g in zip(grid, win, sh, stride, pooled_grid):
        count = -(-n // w)
        axes.append(AxisWindows(extent=g, window=-(-w // st), count=count, shift=s // st))
    return WindowLayout(tuple(axes))


def window_partition(x, grid, window, shift=None):
    """Split ``(..., L, D)`` tokens into windows; returns ``(windows, layout)``.

    ``layout.merge(windows)`` restores the input exactly.
    """
    layout = window_layout(grid, window, shift)
    return layout.partition(x), layout


def window_merge(windows, layout):
    return layout.merge(windows)


def hwin_schedule(stage_index, block_index, blocks_in_stage):
    """Attention kind of a block under hybrid window attention.

    Stages are numbered 1..4.  Stage 1 keeps global pooling attention; in
    stages 2-4 every block is windowed except the stage's last one.
    """
    if stage_index not in (1, 2, 3, 4):
        raise ValueError(f"stage_index must be in 1..4, got {stage_index}")
    if not 0 <= block_index < blocks_in_stage:
        raise ValueError(f"block_index {block_index} outside a stage of {blocks_in_stage} blocks")
    if stage_index == 1 or block_index == blocks_in_stage - 1:
        return "pooling"
    return "hybrid_window_member"
