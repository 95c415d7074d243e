"""Attention configuration and parameter containers."""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..tensor import Tensor
from ..tensor.kernels import out_extent

KINDS = ("full", "fixed_window", "shifted_window", "hybrid_window_member", "pooling")
WINDOW_KINDS = ("fixed_window", "shifted_window", "hybrid_window_member")
POOL_MODES = ("depthwise_conv", "max")
RELPOS_MODES = ("none", "absolute_only", "joint", "decomposed")
RELPOS_TERMS = ("rel_q", "rel_k", "rel_v")


class SpecError(ValueError):
    """An attention or model description is internally inconsistent."""


def _axes_tuple(value, name, minimum):
    if value is None:
        return None
    if np.isscalar(value):
        value = (value,)
    value = tuple(int(v) for v in value)
    if not value or min(value) < minimum:
        raise SpecError(f"{name} must be ints >= {minimum}, got {value}")
    return value


@dataclass(frozen=True)
class AttentionSpec:
    kind: str = "pooling"
    heads: int = 1
    head_dim: int = 8
    q_stride: tuple = (1, 1)
    kv_stride: tuple = (1, 1)
    pool_mode: str = "depthwise_conv"
    pool_kernel: int = 3
    # kernel-3 pooling also runs where the stride is 1 ("full Q pooling")
    pool_at_unit_stride: bool = True
    relpos_mode: str = "decomposed"
    relpos_terms: tuple = ("rel_q",)
    rel_k_index: str = "j"
    residual_pooling: bool = True
    window: tuple = None
    shift: tuple = None
    norm_eps: float = 1e-6

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        if self.kind not in KINDS:
            raise SpecError(f"unknown attention kind {self.kind!r}")
        if self.heads < 1 or self.head_dim < 1:
            raise SpecError("heads and head_dim must be positive")
        set_("q_stride", _axes_tuple(self.q_stride, "q_stride", 1))
        set_("kv_stride", _axes_tuple(self.kv_stride, "kv_stride", 1))
        if len(self.q_stride) != len(self.kv_stride):
            raise SpecError("q_stride and kv_stride must have the same rank")
        if self.pool_mode not in POOL_MODES:
            raise SpecError(f"unknown pool mode {self.pool_mode!r}")
        if self.pool_kernel < 1:
            raise SpecError("pool_kernel must be >= 1")
        if self.relpos_mode not in RELPOS_MODES:
            raise SpecError(f"unknown relpos mode {self.relpos_mode!r}")
        terms = tuple(t for t in RELPOS_TERMS if t in set(self.relpos_terms or ()))
        if len(terms) != len(set(self.relpos_terms or ())):
            raise SpecError(f"unknown relpos terms in {self.relpos_terms!r}")
        if self.relpos_mode in ("joint", "decomposed"):
            if not terms:
                raise SpecError(f"relpos mode {self.relpos_mode} needs at least one term")
        elif terms:
            raise SpecError(f"relpos terms given but relpos mode is {self.relpos_mode}")
        set_("relpos_terms", terms)
        if self.rel_k_index not in ("i", "j"):
            raise SpecError("rel_k_index must be 'i' or 'j'")
        if self.kind == "full" and max(self.kv_stride) > 1:
            raise SpecError("full attention does not pool keys/values; use kind='pooling'")
        if self.kind in WINDOW_KINDS:
            set_("window", _axes_tuple(self.window, "window", 1))
            if self.window is None:
                raise SpecError(f"{self.kind} needs a window")
            if len(self.window) != self.rank:
                raise SpecError("window rank does not match the stride rank")
            shift = self.shift if self.shift is not None else (0,) * self.rank
            set_("shift", _axes_tuple(shift, "shift", 0))
            if len(self.shift) != self.rank:
                raise SpecError("shift rank does not match the stride rank")
            if self.kind != "shifted_window" and any(self.shift):
                raise SpecError(f"{self.kind} does not shift its windows")
        elif self.window is not None or self.shift is not None:
            raise SpecError(f"{self.kind} attention takes no window/shift")
        if not self.norm_eps > 0:
            raise SpecError("norm_eps must be positive")

    @property
    def rank(self):
        return len(self.q_stride)

    @property
    def dim(self):
        return self.heads * self.head_dim

    @property
    def windowed(self):
        return self.kind in WINDOW_KINDS

    def pools(self, which):
        stride = self.q_stride if which == "q" else self.kv_stride
        return max(stride) > 1 or (self.pool_at_unit_stride and self.pool_kernel > 1)

    def pooled_grid(self, grid, which):
        stride = self.q_stride if which == "q" else self.kv_stride
        if not self.pools(which):
            return tuple(grid)
        k = self.pool_kernel
        return tuple(out_extent(n, k, s, k // 2) for n, s in zip(grid, stride))

    def shared_extents(self, grid):
        gq, gk = self.pooled_grid(grid, "q"), self.pooled_grid(grid, "kv")
        return tuple(max(a, b) for a, b in zip(gq, gk))

    def with_(self, **changes):
        return replace(self, **changes)


def axis_names(rank):
    return ("h", "w") if rank == 2 else ("t", "h", "w")


def truncated_normal(rng, shape, std=0.02):
    """Normal(0, std) resampled outside +-2 std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


@dataclass
class RelPosTables:
    """Learned relative-offset embeddings on a shared coordinate scale.

    ``extents`` is the shared-scale extent per axis (axis order t, h, w for
    3-d grids, h, w for 2-d).  Decomposed mode holds one ``(2S - 1, d)`` table
    per axis; joint mode one ``(prod(2S - 1), d)`` table.
    """

    mode: str
    extents: tuple
    tables: dict

    def __post_init__(self):
        if self.mode not in ("joint", "decomposed"):
            raise SpecError(f"relpos tables cannot be built in mode {self.mode!r}")
        self.extents = tuple(int(e) for e in self.extents)
        if min(self.extents) < 1:
            raise SpecError("relpos extents must be >= 1")
        names = axis_names(len(self.extents))
        want = {"joint": ("joint",), "decomposed": names}[self.mode]
        if tuple(self.tables) != want:
            raise SpecError(f"{self.mode} tables must be keyed {want}, got {tuple(self.tables)}")
        for name, rows in zip(want, self.axis_rows()):
            if self.tables[name].shape[0] != rows:
                raise SpecError(f"table {name} has {self.tables[name].shape[0]} rows, expected {rows}")

    @classmethod
    def build(cls, mode, extents, dim, rng=None, std=0.02):
        extents = tuple(int(e) for e in extents)
        names = axis_names(len(extents)) if mode == "decomposed" else ("joint",)
        rows = [2 * e - 1 for e in extents] if mode == "decomposed" else [math.prod(2 * e - 1 for e in extents)]
        tables = {}
        for name, n in zip(names, rows):
            data = np.zeros((n, dim)) if rng is None else truncated_normal(rng, (n, dim), std)
            tables[name] = Tensor(data)
        return cls(mode, extents, tables)

    @property
    def dim(self):
        return next(iter(self.tables.values())).shape[1]

    def axis_rows(self):
        if self.mode == "decomposed":
            return [2 * e - 1 for e in self.extents]
        return [math.prod(2 * e - 1 for e in self.extents)]

    def stored_rows(self):
        return sum(self.axis_rows())

    def offsets(self, coords_q, coords_k):
        """Table row indices for every (query, key) pair: a list with one array per table."""
        coords_q = np.asarray(coords_q, dtype=np.int64)
        coords_k = np.asarray(coords_k, dtype=np.int64)
        rank = len(self.extents)
        if coords_q.shape[-1] != rank or coords_k.shape[-1] != rank:
            raise IndexError(f"coordinates must have {rank} columns")
        diff = coords_q[..., :, None, :] - coords_k[..., None, :, :]
        ext = np.asarray(self.extents)
        if diff.size and (np.abs(diff) > ext - 1).any():
            raise IndexError(f"coordinate offset outside tables for extents {self.extents}")
        shifted = diff + (ext - 1)
        if self.mode == "decomposed":
            return [shifted[..., a] for a in range(rank)]
        flat = np.zeros(shifted.shape[:-1], dtype=np.int64)
        for a in range(rank):
            flat = flat * (2 * self.extents[a] - 1) + shifted[..., a]
        return [flat]

    def lookup(self, coord_q, coord_k):
        """``R_{p(i), p(j)}`` for a single pair, as a d-vector."""
        idx = self.offsets(np.asarray(coord_q)[None], np.asarray(coord_k)[None])
        return sum(t.data[i[0, 0]] for t, i in zip(self.tables.values(), idx))

    def copy(self):
        return RelPosTables(self.mode, self.extents, {k: Tensor(v.data.copy()) for k, v in self.tables.items()})


@dataclass
class AttentionParams:
    """Weights of one attention layer.

    Projections are ``D_in x D_out`` with ``D_out = heads * head_dim``.
    Pooling kernels are depthwise over the head dimension and shared by all
    heads, shape ``(head_dim, k, ...)``; each is followed by a layer norm.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_out: Tensor
    b_q: Tensor = None
    b_k: Tensor = None
    b_v: Tensor = None
    b_out: Tensor = None
    pool: dict = field(default_factory=dict)   # "q"/"k"/"v" -> kernel
    norm: dict = field(default_factory=dict)   # "q"/"k"/"v" -> (gamma, beta)
    relpos: dict = field(default_factory=dict)  # "rel_q"/"rel_k"/"rel_v" -> RelPosTables

    @property
    def d_in(self):
        return self.w_q.shape[0]

    @classmethod
    def init(cls, spec, d_in, grid, rng, std=0.02, bias=True, randomize_all=False):
        """Random parameters for ``spec`` acting on a ``grid``-shaped input of width ``d_in``.

        By default biases start at zero and norms at the identity affine;
        ``randomize_all`` perturbs those too (useful for oracle tests).
        """
        if len(grid) != spec.rank:
            raise SpecError(f"grid {grid} does not match stride rank {spec.rank}")
        d_out, d = spec.dim, spec.head_dim
        lin = lambda *shape: Tensor(truncated_normal(rng, shape, std))  # noqa: E731
        params = cls(w_q=lin(d_in, d_out), w_k=lin(d_in, d_out), w_v=lin(d_in, d_out), w_out=lin(d_out, d_out))
        if bias:
            for name in ("b_q", "b_k", "b_v", "b_out"):
                data = truncated_normal(rng, (d_out,), std) if randomize_all else np.zeros(d_out)
                setattr(params, name, Tensor(data))
        if spec.pool_mode == "depthwise_conv":
            kshape = (d,) + (spec.pool_kernel,) * spec.rank
            for which, tag in (("q", "q"), ("k", "kv"), ("v", "kv")):
                if spec.pools(tag):
                    params.pool[which] = lin(*kshape)
                    gamma, beta = np.ones(d), np.zeros(d)
                    if randomize_all:
                        gamma = gamma + 0.1 * rng.standard_normal(d)
                        beta = 0.1 * rng.standard_normal(d)
                    params.norm[which] = (Tensor(gamma), Tensor(beta))
        if spec.relpos_mode in ("joint", "decomposed"):
            extents = spec.shared_extents(grid)
            for term in spec.relpos_terms:
                params.relpos[term] = RelPosTables.build(spec.relpos_mode, extents, d, rng, std)
        return params

    def named_tensors(self):
        out = {}
        for name in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_out", "b_out"):
            t = getattr(self, name)
            if t is not None:
                out[name] = t
        for which in ("q", "k", "v"):
            if which in self.pool:
                out[f"pool_{which}"] = self.pool[which]
            if which in self.norm:
                out[f"norm_{which}.gamma"], out[f"norm_{which}.beta"] = self.norm[which]
        for term, tables in self.relpos.items():
            for axis, t in tables.tables.items():
                out[f"{term}.{axis}"] = t
        return out

    def num_params(self):
        return sum(t.size for t in self.named_tensors().values())

    def set_tensor(self, name, tensor):
        """Replace the tensor registered under ``name`` (as listed by :meth:`named_tensors`)."""
        if name in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_out", "b_out"):
            setattr(self, name, tensor)
        elif name.startswith("pool_"):
            self.pool[name[5:]] = tensor
        elif name.startswith("norm_"):
            which, part = name[5], name.split(".")[1]
            gamma, beta = self.norm[which]
            self.norm[which] = (tensor, beta) if part == "gamma" else (gamma, tensor)
        else:
            term, axis = name.split(".")
            self.relpos[term].tables[axis] = tensor
        return self

    def requires_grad_(self, flag=True):
        for t in self.named_tensors().values():
            t.requires_grad = flag
            t.grad = None
        return self
