import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cspdet.errors import InvalidArgument
from cspdet.gradsuite import COMPOSED, PRIMITIVES, run_case
from cspdet.tensor import core as C
from cspdet.tensor import functional as F
from cspdet.tensor import profiler
from cspdet.tensor.core import Tensor, no_grad
from cspdet.tensor.nn import BatchNorm2d, Conv2d, manual_seed

from oracles import bilinear_resize, naive_conv2d, naive_matmul, naive_pool


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- forward values against loop oracles ---------------------------------------------------

@pytest.mark.parametrize("stride,padding,groups,k", [
    (1, 0, 1, 1), (1, 1, 1, 3), (2, 1, 1, 3), (2, 2, 1, 5), (1, 1, 2, 3), (1, 1, 4, 3), (2, 2, 4, 5), (2, 0, 1, 1),
])
def test_conv2d_matches_loops(rng, stride, padding, groups, k):
    x = rng.normal(size=(2, 4, 9, 8))
    cout = 4 if groups == 4 else 6
    w = rng.normal(size=(cout, 4 // groups, k, k))
    b = rng.normal(size=cout)
    got = F.conv2d(t64(x), t64(w), t64(b), stride, padding, groups).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, b, stride, padding, groups), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.sampled_from([1, 3, 5]), stride=st.sampled_from([1, 2]),
       depthwise=st.booleans(), size=st.integers(5, 11))
def test_conv2d_random_shapes(seed, k, stride, depthwise, size):
    r = np.random.default_rng(seed)
    c = 3
    groups = c if depthwise else 1
    cout = c if depthwise else 2
    x = r.normal(size=(1, c, size, size + 1))
    w = r.normal(size=(cout, c // groups, k, k))
    got = F.conv2d(t64(x), t64(w), None, stride, k // 2, groups).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, None, stride, k // 2, groups), atol=1e-10)


def test_conv2d_float32_close_to_float64(rng):
    x = rng.normal(size=(1, 8, 12, 12)).astype(np.float32)
    w = rng.normal(size=(8, 1, 3, 3)).astype(np.float32)
    got = F.conv2d(Tensor(x), Tensor(w), None, 1, 1, 8).data
    assert got.dtype == np.float32
    np.testing.assert_allclose(got, naive_conv2d(x, w, None, 1, 1, 8), atol=1e-5)


def test_conv2d_rejects_bad_shapes():
    with pytest.raises(InvalidArgument):
        F.conv2d(Tensor(np.zeros((1, 3, 4))), Tensor(np.zeros((2, 3, 1, 1))))


def test_conv_transpose_scatters_kernel(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    w = rng.normal(size=(2, 3, 2, 2))
    got = F.conv_transpose2d(t64(x), t64(w), None, 2).data
    ref = np.zeros((1, 3, 6, 6))
    for c in range(2):
        for i in range(3):
            for j in range(3):
                ref[0, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2] += x[0, c, i, j] * w[c]
    np.testing.assert_allclose(got, ref, atol=1e-12)


@pytest.mark.parametrize("kind", ["max", "avg"])
@pytest.mark.parametrize("k,s", [(2, 2), (3, 1), (3, 2)])
def test_pool_matches_sliding_window(rng, kind, k, s):
    x = rng.normal(size=(2, 3, 7, 8))
    np.testing.assert_allclose(F.pool(t64(x), kind, k, s).data, naive_pool(x, kind, k, s), atol=1e-12)


def test_global_pools(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    np.testing.assert_allclose(F.pool(t64(x), "global_avg").data[..., 0, 0], x.mean(axis=(2, 3)))
    np.testing.assert_allclose(F.pool(t64(x), "global_max").data[..., 0, 0], x.max(axis=(2, 3)))


@pytest.mark.parametrize("src,dst", [((3, 4), (5, 7)), ((4, 4), (8, 8)), ((6, 5), (3, 2)), ((1, 1), (3, 3))])
def test_bilinear_matches_closed_form(rng, src, dst):
    x = rng.normal(size=(1, 2, *src))
    np.testing.assert_allclose(F.interpolate(t64(x), dst, "bilinear").data, bilinear_resize(x, *dst), atol=1e-12)


def test_nearest_integer_upsample_repeats(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    got = F.interpolate(t64(x), (6, 9), "nearest").data
    np.testing.assert_array_equal(got, x.repeat(2, axis=2).repeat(3, axis=3))


def test_area_downsample_is_block_mean(rng):
    x = rng.normal(size=(1, 1, 4, 4))
    got = F.interpolate(t64(x), (2, 2), "area").data
    np.testing.assert_allclose(got, x.reshape(1, 1, 2, 2, 2, 2).mean(axis=(3, 5)))


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose((t64(a) @ t64(b)).data, naive_matmul(a, b), atol=1e-12)


# -- autodiff mechanics -----------------------------------------------------------------------

def test_broadcast_gradient_is_summed():
    a = t64(np.ones((3, 4)), grad=True)
    b = t64(np.ones(4), grad=True)
    (a * b).sum().backward()
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))
    np.testing.assert_array_equal(a.grad, np.ones((3, 4)))


def test_reused_tensor_accumulates_gradient():
    x = t64([2.0, -1.0], grad=True)
    (x * x + x).sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data + 1)


def test_no_grad_records_nothing():
    x = t64([1.0, 2.0], grad=True)
    with no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad


def test_split_concat_round_trip(rng):
    a = t64(rng.normal(size=(1, 5, 2, 2)))
    left, right = C.split(a, 2, axis=1)
    assert left.shape == (1, 2, 2, 2) and right.shape == (1, 3, 2, 2)
    np.testing.assert_array_equal(C.concat([left, right], axis=1).data, a.data)


def test_sigmoid_saturates_without_overflow():
    x = t64([-1000.0, 0.0, 1000.0])
    np.testing.assert_allclose(F.apply_activation(x, "sigmoid").data, [0.0, 0.5, 1.0])
    np.testing.assert_allclose(F.apply_activation(x, "swish").data, [0.0, 0.0, 1000.0])


# -- layers and losses --------------------------------------------------------------------------

def test_batch_norm_train_normalizes_and_tracks_stats(rng):
    bn = BatchNorm2d(3).astype(np.float64)
    x = rng.normal(loc=2.0, scale=3.0, size=(4, 3, 5, 5))
    y = bn(t64(x)).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)
    m = 4 * 5 * 5
    np.testing.assert_allclose(bn.stats.mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(bn.stats.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_batch_norm_eval_uses_running_stats(rng):
    bn = BatchNorm2d(2).astype(np.float64).eval()
    bn.stats.mean[...] = [1.0, -1.0]
    bn.stats.var[...] = [4.0, 0.25]
    x = rng.normal(size=(1, 2, 3, 3))
    expect = (x - np.array([1.0, -1.0])[None, :, None, None]) / np.sqrt(np.array([4.0, 0.25]) + 1e-5)[None, :, None, None]
    np.testing.assert_allclose(bn(t64(x)).data, expect)


def test_cross_entropy_matches_log_softmax(rng):
    logits = rng.normal(size=(5, 4))
    labels = np.array([0, 3, 1, 1, 2])
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    assert F.cross_entropy(t64(logits), labels).data == pytest.approx(-logp[np.arange(5), labels].mean())


def test_bce_with_logits_is_stable_for_large_logits():
    out = F.bce_with_logits(t64([800.0, -800.0]), np.array([0.0, 1.0]), reduction="none").data
    np.testing.assert_allclose(out, [800.0, 800.0])


@pytest.mark.parametrize("d,beta,expect", [(0.05, 0.1, 0.5 * 0.05**2 / 0.1), (0.3, 0.1, 0.3 - 0.05), (-2.0, 1.0, 1.5),
                                           (0.4, 0.0, 0.4)])
def test_smooth_l1_branches(d, beta, expect):
    assert F.smooth_l1(t64([d]), np.zeros(1), beta).data == pytest.approx(expect)


def test_profiler_counts_conv_macs():
    manual_seed(0)
    conv = Conv2d(4, 6, 3, stride=2)
    with profiler.count_macs() as counter:
        conv(Tensor(np.zeros((1, 4, 8, 8), np.float32)))
    assert counter.total == 6 * 4 * 3 * 3 * 4 * 4


def test_astype_casts_parameters_and_buffers():
    manual_seed(0)
    bn = BatchNorm2d(3).astype(np.float64)
    assert all(p.dtype == np.float64 for p in bn.parameters())
    assert all(b.dtype == np.float64 for _, b in bn.named_buffers())


# -- finite-difference suite ------------------------------------------------------------------

@pytest.mark.parametrize("case", PRIMITIVES + COMPOSED, ids=lambda c: c.name)
def test_gradients_match_finite_differences(case):
    outcome = run_case(case)
    assert outcome.passed, f"{case.name}: relative error {outcome.error:.2e} >= {case.tol:g}"
