import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fingernet import functional as F
from fingernet.errors import ShapeError
from fingernet.gradcheck import finite_difference_check, reference_check
from fingernet.tensor import Tensor, no_grad

from oracles import conv2d_loops, maxpool_loops


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------- tensor basics


def test_tensor_rejects_zero_extent():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 0)))


def test_tensor_default_dtype_is_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32


def test_no_grad_does_not_record_graph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with no_grad():
        y = F.sum(F.mul(x, x))
    assert y.node is None and not y.requires_grad


def test_requires_grad_false_never_accumulates():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0])
    F.sum(F.mul(a, b)).backward()
    assert b.grad is None
    np.testing.assert_array_equal(a.grad, [3.0, 4.0])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        F.relu(x).backward()


def test_backward_relu_mask_example():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    F.sum(F.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_backward_quadratic_example():
    x = Tensor([3.0], requires_grad=True)
    F.sum(F.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [6.0])


def test_backward_twice_doubles_leaf_gradient():
    rng = np.random.default_rng(0)
    x = t64(rng.standard_normal((2, 3, 5, 5)), grad=True)
    w = t64(rng.standard_normal((4, 3, 3, 3)), grad=True)
    loss = F.sum(F.relu(F.conv2d(x, w, padding=1)))
    loss.backward()
    once = w.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(w.grad, 2 * once)


def test_shared_subexpression_gradients_sum():
    x = t64([1.5, -2.0], grad=True)
    y = F.mul(x, x)
    F.sum(F.add(y, y)).backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


# ----------------------------------------------------------------------- conv2d


def test_conv2d_scaling_kernel_example():
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor([[[[2.0]]]]))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv2d_trace_kernel_example():
    x = Tensor(np.array([[1, 2], [3, 4]], dtype=np.float32).reshape(1, 1, 2, 2))
    w = Tensor(np.array([[1, 0], [0, 1]], dtype=np.float32).reshape(1, 1, 2, 2))
    np.testing.assert_array_equal(F.conv2d(x, w).data, [[[[5.0]]]])


def test_conv2d_matches_nested_loops_strided_padded():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = F.conv2d(t64(x), t64(w), t64(b), stride=2, padding=1).data
    np.testing.assert_allclose(got, conv2d_loops(x, w, b, 2, 1), atol=1e-5, rtol=0)


def test_conv2d_channel_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        F.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    assert "(1, 2, 4, 4)" in str(err.value) and "(1, 3, 3, 3)" in str(err.value)


def test_conv2d_rejects_zero_stride():
    with pytest.raises(ValueError):
        F.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=0)


def test_conv2d_rejects_kernel_larger_than_padded_input():
    with pytest.raises(ShapeError):
        F.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))), padding=1)


@pytest.mark.parametrize("stride", [1, 2, 3])
@pytest.mark.parametrize("padding", [0, 1, 2])
def test_conv2d_output_extent_floor_law(stride, padding):
    for h in range(1, 13):
        for k in range(1, h + 1):
            out = F.conv2d(Tensor(np.zeros((1, 1, h, h))), Tensor(np.zeros((1, 1, k, k))), stride=stride, padding=padding)
            expect = (h + 2 * padding - k) // stride + 1
            assert out.shape == (1, 1, expect, expect)


# -------------------------------------------------------------------- batchnorm


def _bn(x, gamma, beta, training, rm=None, rv=None):
    c = x.shape[1]
    rm = np.zeros(c) if rm is None else rm
    rv = np.ones(c) if rv is None else rv
    return F.batchnorm2d(t64(x), t64(gamma), t64(beta), rm, rv, training)


def test_batchnorm_constant_input_gives_zero():
    out = _bn(np.full((2, 3, 4, 4), 7.0), np.ones(3), np.zeros(3), True)
    np.testing.assert_array_equal(out.data, 0.0)


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_zero_gamma_outputs_beta(training):
    rng = np.random.default_rng(2)
    beta = np.array([0.5, -1.25])
    out = _bn(rng.standard_normal((3, 2, 4, 4)), np.zeros(2), beta, training)
    np.testing.assert_array_equal(out.data, np.broadcast_to(beta.reshape(1, 2, 1, 1), out.shape))


def test_batchnorm_train_statistics_oracle():
    rng = np.random.default_rng(3)
    x = 3 + 2 * rng.standard_normal((4, 2, 3, 3))
    out = _bn(x, np.ones(2), np.zeros(2), True).data
    for c in range(2):
        vals = out[:, c].reshape(-1)
        assert abs(vals.mean()) < 1e-5
        assert abs(vals.var() - 1) < 1e-3


def test_batchnorm_updates_running_stats_with_unbiased_variance():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 1, 3, 3))
    rm, rv = np.zeros(1), np.ones(1)
    _bn(x, np.ones(1), np.zeros(1), True, rm, rv)
    assert rm[0] == pytest.approx(0.1 * x.mean())
    assert rv[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))


def test_batchnorm_eval_uses_running_stats_only():
    x = np.arange(8.0).reshape(2, 1, 2, 2)
    out = _bn(x, np.ones(1), np.zeros(1), False, np.array([1.0]), np.array([4.0])).data
    np.testing.assert_allclose(out, (x - 1) / np.sqrt(4 + 1e-5))


def test_batchnorm_single_value_per_channel_rejected():
    with pytest.raises(ShapeError):
        _bn(np.ones((1, 2, 1, 1)), np.ones(2), np.zeros(2), True)


# -------------------------------------------------------- pointwise and pooling


def test_relu_example():
    np.testing.assert_array_equal(F.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_softmax_example():
    np.testing.assert_array_equal(F.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_maxpool_example_routes_gradient_to_max():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2), requires_grad=True)
    out = F.maxpool2d(x, 2, 2)
    np.testing.assert_array_equal(out.data, [[[[4.0]]]])
    F.sum(out).backward()
    np.testing.assert_array_equal(x.grad.reshape(2, 2), [[0, 0], [0, 1]])


@pytest.mark.parametrize("k,s,p", [(2, 2, 0), (3, 2, 1), (3, 1, 1), (2, 1, 0)])
def test_maxpool_matches_loops(k, s, p):
    x = np.random.default_rng(k * 10 + s + p).standard_normal((2, 2, 7, 6))
    np.testing.assert_array_equal(F.maxpool2d(t64(x), k, s, p).data, maxpool_loops(x, k, s, p))


def test_add_and_mul_reject_mismatched_shapes():
    with pytest.raises(ShapeError):
        F.add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        F.mul(Tensor(np.ones(2)), Tensor(np.ones((2, 1))))


def test_affine_rejects_incompatible_weight():
    with pytest.raises(ShapeError):
        F.affine(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)
# logits spread wide enough to underflow exp() cannot stay strictly positive
moderate = st.floats(-50, 50, allow_nan=False, width=32)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=moderate))
def test_softmax_rows_positive_and_normalised(a):
    s = F.softmax(Tensor(a.astype(np.float64))).data
    assert (s > 0).all()
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.integers(1, 20), elements=finite), st.data())
def test_add_commutes_and_relu_idempotent(a, data):
    b = data.draw(arrays(np.float32, a.shape, elements=finite))
    np.testing.assert_array_equal(F.add(Tensor(a), Tensor(b)).data, F.add(Tensor(b), Tensor(a)).data)
    once = F.relu(Tensor(a))
    np.testing.assert_array_equal(F.relu(once).data, once.data)


# --------------------------------------------------------------- gradient checks


def test_gradcheck_sum_is_exact():
    # integer entries and a power-of-two step keep every difference representable
    assert finite_difference_check(F.sum, t64([1.0, -2.0, 4.0]), h=2.0**-10) == 0.0


def test_gradcheck_sum_of_squares():
    assert finite_difference_check(F.square_sum, t64([1.0, 2.0, 3.0]), h=1e-3) < 1e-6


def test_gradcheck_conv_relu_affine_chain():
    rng = np.random.default_rng(5)
    w = t64(rng.standard_normal((3, 2, 3, 3)))
    fc = t64(rng.standard_normal((3 * 4 * 4, 5)))
    r = t64(rng.standard_normal((2, 5)))

    def f(x):
        h = F.flatten(F.relu(F.conv2d(x, w, padding=1)))
        return F.sum(F.mul(F.affine(h, fc), r))

    assert finite_difference_check(f, t64(rng.standard_normal((2, 2, 4, 4))), h=1e-6) < 1e-4


def test_reference_check_single_precision_conv():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    w32, w64 = Tensor(w, dtype=np.float32), t64(w)
    err = reference_check(
        lambda _: F.square_sum(F.conv2d(Tensor(x, dtype=np.float32), w32, padding=1)),
        w32,
        lambda _: F.square_sum(F.conv2d(t64(x), w64, padding=1)),
        w64,
    )
    assert err < 1e-2
