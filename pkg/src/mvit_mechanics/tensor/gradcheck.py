import numpy as np

from .core import Tensor


class GradCheckError(RuntimeError):
    """The checked function raised while evaluating a perturbed input."""

    def __init__(self, index, cause):
        super().__init__(f"function raised at coordinate {index}: {cause!r}")
        self.index = index


def numerical_gradient(f, x, eps=1e-5):
    """Central differences ``(f(x + eps e) - f(x - eps e)) / 2 eps`` for every coordinate."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    probe = base.copy()
    for index in np.ndindex(*base.shape):
        orig = probe[index]
        try:
            probe[index] = orig + eps
            hi = f(Tensor(probe.copy())).item()
            probe[index] = orig - eps
            lo = f(Tensor(probe.copy())).item()
        except Exception as exc:
            raise GradCheckError(index, exc) from exc
        probe[index] = orig
        grad[index] = (hi - lo) / (2.0 * eps)
    return grad


def analytic_gradient(f, x):
    leaf = Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=True)
    out = f(leaf)
    out.backward()
    return np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad


def grad_check(f, x, eps=1e-5):
    """Largest ``|analytic - numeric| / max(1, |analytic|)`` over the coordinates of ``x``.

    ``f`` maps a tensor shaped like ``x`` to a scalar tensor and must be
    deterministic.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    analytic = analytic_gradient(f, x)
    numeric = numerical_gradient(f, x, eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
