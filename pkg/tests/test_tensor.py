import itertools

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvit_mechanics.tensor import (
    DimensionError,
    NonFiniteError,
    Tensor,
    count_flops,
    grad_check,
    kernels,
    ops,
)

mpmath.mp.dps = 50


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def naive_depthwise(x, k, stride, pad):
    """Sliding-window correlation, taps accumulated in kernel C-order from 0.0."""
    n, c = x.shape[:2]
    spatial = x.shape[2:]
    ks = k.shape[1:]
    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in pad])
    out_sp = tuple((s + 2 * p - kk) // st_ + 1 for s, p, kk, st_ in zip(spatial, pad, ks, stride))
    out = np.zeros((n, c) + out_sp)
    for b, ch in itertools.product(range(n), range(c)):
        for o in itertools.product(*(range(e) for e in out_sp)):
            acc = 0.0
            for t in itertools.product(*(range(e) for e in ks)):
                acc += xp[(b, ch) + tuple(oi * s + ti for oi, s, ti in zip(o, stride, t))] * k[(ch,) + t]
            out[(b, ch) + o] = acc
    return out


# --- matmul -----------------------------------------------------------------


def test_matmul_identity_right():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ops.matmul(a, Tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_matmul_identity_left():
    np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(2)), Tensor([[5.0], [7.0]])).data, [[5], [7]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    np.testing.assert_allclose(ops.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=0, atol=1e-14)


def test_matmul_rejects_mismatched_inner_extent():
    with pytest.raises(DimensionError):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_matmul_associative(m, n, k, p, seed):
    rng = np.random.default_rng(seed)
    a, b, c = (Tensor(rng.standard_normal(s)) for s in ((m, n), (n, k), (k, p)))
    left = ops.matmul(ops.matmul(a, b), c).data
    right = ops.matmul(a, ops.matmul(b, c)).data
    assert np.abs(left - right).max() <= 1e-10 * max(1.0, np.abs(left).max())


# --- softmax ----------------------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_array_equal(ops.softmax_lastdim(Tensor(np.zeros(4))).data, [0.25] * 4)


def test_softmax_large_logit_does_not_overflow():
    out = ops.softmax_lastdim(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], rtol=0, atol=1e-12)


def test_softmax_matches_extended_precision():
    xs = [1, 2, 3]
    total = mpmath.fsum(mpmath.exp(v) for v in xs)
    ref = [float(mpmath.exp(v) / total) for v in xs]
    np.testing.assert_allclose(ops.softmax_lastdim(Tensor(np.array(xs, float))).data, ref, rtol=1e-15, atol=0)


def test_softmax_mask_excludes_entries():
    out = ops.softmax_lastdim(Tensor([1.0, 5.0, 1.0]), mask=np.array([True, False, True])).data
    np.testing.assert_array_equal(out, [0.5, 0.0, 0.5])


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_ignore_offsets(row, c):
    x = np.array(row)
    p = ops.softmax_lastdim(Tensor(x)).data
    assert abs(p.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(ops.softmax_lastdim(Tensor(x + c)).data, p, rtol=0, atol=1e-12)


# --- depthwise convolution --------------------------------------------------


def test_depthwise_unit_kernel_is_identity():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 2, 3, 4)))
    out = ops.conv_nd_depthwise(x, Tensor(np.ones((2, 1, 1))), (1, 1), (0, 0))
    np.testing.assert_array_equal(out.data, x.data)


def test_depthwise_zero_kernel_gives_zeros():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 2, 4, 4)))
    out = ops.conv_nd_depthwise(x, Tensor(np.zeros((2, 3, 3))), (1, 1), (1, 1))
    assert not out.data.any()


def test_depthwise_ramp_stride2_matches_sliding_window():
    x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    k = np.arange(9, dtype=float).reshape(1, 3, 3) - 4.0
    out = ops.conv_nd_depthwise(Tensor(x), Tensor(k), (2, 2), (1, 1)).data
    np.testing.assert_array_equal(out, naive_depthwise(x, k, (2, 2), (1, 1)))
    assert out.shape == (1, 1, 2, 2)


@pytest.mark.parametrize("backend", ["numpy", "numba"])
@given(rank=st.sampled_from([2, 3]), stride=st.integers(1, 3), size=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_depthwise_equals_naive_exactly(backend, rank, stride, size, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3) + (size,) * rank)
    k = rng.standard_normal((3,) + (3,) * rank)
    with kernels.use_backend(backend):
        out = ops.conv_nd_depthwise(Tensor(x), Tensor(k), (stride,) * rank, (1,) * rank).data
    np.testing.assert_array_equal(out, naive_depthwise(x, k, (stride,) * rank, (1,) * rank))


@given(rank=st.sampled_from([2, 3]), stride=st.integers(1, 3), size=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_kernel_backends_agree_bitwise(rank, stride, size, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((1, 2) + (size,) * rank))
    k = Tensor(rng.standard_normal((2,) + (3,) * rank))
    results = []
    for backend in ("numpy", "numba"):
        with kernels.use_backend(backend):
            results.append((ops.conv_nd_depthwise(x, k, (stride,) * rank, (1,) * rank).data,
                            ops.max_pool_nd(x, 3, (stride,) * rank, 1).data))
    for a, b in zip(*results):
        np.testing.assert_array_equal(a, b)


def test_backend_env_flag_selects_numpy(monkeypatch):
    monkeypatch.setenv("MVIT_MECHANICS_NUMBA", "0")
    assert kernels._env_backend() == "numpy"


def test_depthwise_records_macs():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with count_flops() as tally:
        ops.conv_nd_depthwise(x, Tensor(np.zeros((2, 3, 3))), (2, 2), (1, 1))
    assert tally.macs == 2 * 2 * 2 * 9


# --- elementwise ------------------------------------------------------------


def test_layer_norm_of_constant_is_zero():
    out = ops.layer_norm(Tensor(np.full((2, 5), 3.25)))
    assert not out.data.any()


def test_layer_norm_standardises():
    x = np.random.default_rng(1).standard_normal((3, 16)) * 4 + 2
    out = ops.layer_norm(Tensor(x), eps=1e-12).data
    np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-14)
    np.testing.assert_allclose(out.var(axis=-1), 1, atol=1e-12)


def test_gelu_zero():
    assert ops.gelu(Tensor([0.0])).data[0] == 0.0


def test_gelu_one_matches_erf_reference():
    ref = float(mpmath.mpf(1) * (1 + mpmath.erf(1 / mpmath.sqrt(2))) / 2)
    assert abs(ops.gelu(Tensor([1.0])).data[0] - ref) <= 1e-15


# --- reverse mode -----------------------------------------------------------


def test_backward_of_sum_is_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3)), requires_grad=True)
    ops.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_of_sum_of_squares_is_twice_x():
    data = np.random.default_rng(0).standard_normal((4,))
    x = Tensor(data, requires_grad=True)
    ops.sum(ops.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, 2 * data)


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DimensionError):
        ops.mul(x, x).backward()


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_op_producing_nan_raises():
    with pytest.raises(NonFiniteError):
        ops.mul(Tensor([np.inf]), Tensor([0.0]))


def test_grad_check_linear_is_exact():
    w = np.random.default_rng(2).standard_normal((3, 2))
    err = grad_check(lambda t: ops.sum(ops.matmul(t, Tensor(w))), np.random.default_rng(3).standard_normal((4, 3)))
    assert err <= 1e-10


def test_grad_check_softmax_composite():
    probe = Tensor(np.random.default_rng(4).standard_normal((3, 5)))
    err = grad_check(lambda t: ops.sum(ops.mul(ops.softmax_lastdim(t), probe)),
                     np.random.default_rng(5).standard_normal((3, 5)), eps=1e-5)
    assert err <= 1e-6


@pytest.mark.parametrize("eps", [1e-8, 1e-2])
def test_grad_check_rejects_eps_out_of_range(eps):
    with pytest.raises(ValueError):
        grad_check(lambda t: ops.sum(t), np.ones(2), eps=eps)


COMPOSITIONS = {
    "gelu_norm": lambda t, aux: ops.layer_norm(ops.gelu(t), aux["g"], aux["b"]),
    "softmax_matmul": lambda t, aux: ops.matmul(ops.softmax_lastdim(t), aux["m"]),
    "scale_sub_mul": lambda t, aux: ops.mul(ops.sub(ops.scale(t, 1.7), aux["c"]), t),
    "conv_pool": lambda t, aux: ops.max_pool_nd(
        ops.conv_nd_depthwise(ops.reshape(t, (1, 1, 3, 4)), aux["k"], (1, 1), (1, 1)), 3, (2, 2), 1),
    "permute_take_pad": lambda t, aux: ops.pad(ops.take(ops.permute(t, (1, 0)), np.array([0, 2, 2]), 1),
                                               [(1, 0), (0, 2)]),
    "mean_add": lambda t, aux: ops.add(ops.mean(t, axis=0, keepdims=True), t),
}


@pytest.mark.parametrize("name", sorted(COMPOSITIONS))
@given(seed=st.integers(0, 2**31))
def test_backward_matches_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    aux = {"g": Tensor(rng.standard_normal(4)), "b": Tensor(rng.standard_normal(4)),
           "m": Tensor(rng.standard_normal((4, 2))), "c": Tensor(rng.standard_normal((3, 4))),
           "k": Tensor(rng.standard_normal((1, 3, 3)))}
    fn = COMPOSITIONS[name]
    probe_shape = fn(Tensor(np.zeros((3, 4))), aux).shape
    probe = Tensor(rng.standard_normal(probe_shape))
    err = grad_check(lambda t: ops.sum(ops.mul(fn(t, aux), probe)), rng.standard_normal((3, 4)), eps=1e-5)
    assert err <= 1e-4


def test_flop_counter_matmul():
    with count_flops() as tally:
        ops.matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))
    assert tally.macs == 8
    assert tally.flops(mac_weight=2) == 16
