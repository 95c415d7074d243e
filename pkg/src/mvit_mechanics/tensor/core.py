"""Dense float64 tensors with a per-output reverse-mode tape."""

from collections import Counter
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


# ---------------------------------------------------------------------------
# FLOP instrumentation
# ---------------------------------------------------------------------------


@dataclass
class FlopTally:
    """Running count of multiply-accumulates and 5-FLOP elementwise passes.

    ``macs`` is bumped by contractions (matmul, einsum, convolutions),
    ``elementwise`` by softmax and layer norm at 5 FLOPs per element.
    Everything else (adds, GELU, pooling maxima, gathers) is free.
    """

    macs: int = 0
    elementwise: int = 0
    by_op: Counter = field(default_factory=Counter)

    def flops(self, mac_weight=1):
        return self.macs * mac_weight + self.elementwise


_tally: ContextVar = ContextVar("mvit_mechanics_flop_tally", default=None)


@contextmanager
def count_flops():
    """Count FLOPs of every tensor op executed inside the block (this context only)."""
    tally = FlopTally()
    token = _tally.set(tally)
    try:
        yield tally
    finally:
        _tally.reset(token)


def record_flops(op, macs=0, elementwise=0):
    tally = _tally.get()
    if tally is not None:
        tally.macs += int(macs)
        tally.elementwise += int(elementwise)
        tally.by_op[op] += int(macs) + int(elementwise)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """Contiguous row-major float64 array that can take part in differentiation.

    Non-leaf tensors keep a reference to the op that produced them (parents
    plus an adjoint closure); the graph reachable from an output is its tape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_adjoint", "op")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._adjoint = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return ops.scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def permute(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def backward(self, seed=None):
        if seed is None and self.data.size != 1:
            raise DimensionError(f"backward needs a scalar output, got shape {self.shape}")
        Tape(self).backward(seed)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data, parents, adjoint, op):
    """Wrap ``data`` as the output of ``op``; record the adjoint only when needed."""
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._adjoint = adjoint
    return out


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Tape:
    """Topologically ordered record of the ops that produced ``output``.

    Built on demand from the output's parent links, so every forward
    invocation owns its tape; nothing is shared between invocations.
    """

    def __init__(self, output):
        if not output.requires_grad:
            raise ValueError("output does not depend on any tensor that requires grad")
        self.output = output
        self.nodes = self._toposort(output)

    @staticmethod
    def _toposort(root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def __len__(self):
        return len(self.nodes)

    def backward(self, seed=None):
        out = self.output
        g0 = np.ones_like(out.data) if seed is None else np.broadcast_to(
            np.asarray(seed, dtype=np.float64), out.shape).copy()
        grads = {id(out): g0}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._adjoint is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._adjoint(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise DimensionError(
                        f"adjoint of {node.op} returned {pg.shape} for input {parent.shape}")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
