import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from voxformer.tensor import (AutodiffError, ShapeError, Tensor, add, concat,
                              elementwise, flatten, getitem, leaky_relu, matmul,
                              mul, no_grad, pad3d, reshape, softmax, sub,
                              transpose, tsum)
from voxformer.gradcheck import gradcheck


def randt(shape, seed=0, dtype=np.float64, requires_grad=False):
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal(shape), dtype=dtype, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# construction

def test_rejects_more_than_five_dims():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 2, 2, 2, 2, 2)))


def test_rejects_non_float_dtypes():
    with pytest.raises(TypeError):
        Tensor(np.zeros(3), dtype=np.int32)


def test_rejects_empty():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


# ---------------------------------------------------------------------------
# elementwise

def test_leaky_relu_values():
    out = leaky_relu(Tensor([-1.0, 0.0, 2.0]), k=0.2)
    np.testing.assert_allclose(out.data, [-0.2, 0.0, 2.0])


def test_leaky_relu_slope_domain():
    with pytest.raises(ValueError):
        leaky_relu(Tensor([1.0]), k=1.5)


def test_add_zero_identity():
    a = randt((3, 4), seed=1)
    out = add(a, Tensor(np.zeros((3, 4))))
    np.testing.assert_array_equal(out.data, a.data)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        add(randt((3, 4)), randt((2, 5)))
    assert "(3, 4)" in str(err.value) and "(2, 5)" in str(err.value)


def test_scalar_operand():
    out = mul(Tensor([1.0, 2.0]), 3.0)
    np.testing.assert_allclose(out.data, [3.0, 6.0])


def test_elementwise_dispatch():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 4.0])
    np.testing.assert_allclose(elementwise("sub", a, b).data, [-2.0, -2.0])
    np.testing.assert_allclose(elementwise("leaky_relu", Tensor([-1.0]), k=0.5).data, [-0.5])


def test_leaky_relu_derivative_matches_finite_difference():
    x = Tensor(np.array([-3.0]), dtype=np.float64, requires_grad=True)
    report = gradcheck(lambda t: leaky_relu(t, 0.2).sum(), x, tol=1e-6)
    assert report.passed
    assert x.grad[0] == pytest.approx(0.2)


def test_leaky_relu_subgradient_at_zero_is_one():
    x = Tensor(np.array([0.0]), requires_grad=True)
    leaky_relu(x, 0.2).sum().backward()
    assert x.grad[0] == 1.0


# ---------------------------------------------------------------------------
# matmul

def test_matmul_identity():
    b = randt((3, 7), seed=2)
    out = matmul(Tensor(np.eye(3)), b)
    np.testing.assert_allclose(out.data, b.data)


def test_matmul_hand_case():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_allclose(out.data, [[3.0], [7.0]])


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        matmul(randt((2, 3)), randt((4, 2)))


def test_matmul_gradcheck_random():
    a = randt((4, 5), seed=3, requires_grad=True)
    b = randt((5, 3), seed=4, requires_grad=True)
    assert gradcheck(lambda x, y: matmul(x, y).sum(), [a, b], tol=1e-5).passed


def test_matmul_batched_leading_dim():
    a = randt((2, 4, 5), seed=5, requires_grad=True)
    b = randt((5, 3), seed=6, requires_grad=True)
    out = matmul(a, b)
    assert out.shape == (2, 4, 3)
    assert gradcheck(lambda x, y: matmul(x, y).sum(), [a, b], tol=1e-5).passed


# ---------------------------------------------------------------------------
# layout ops

def test_pad3d_to_multiples_of_50():
    x = Tensor(np.zeros((1, 1, 169, 208, 179), np.float32))
    pads = [((-e) % 50,) * 1 for e in (169, 208, 179)]
    out = pad3d(x, [(0, (-169) % 50), (0, (-208) % 50), (0, (-179) % 50)])
    assert out.shape == (1, 1, 200, 250, 200)


def test_flatten_convnet_tail():
    x = Tensor(np.zeros((1, 512, 2, 2, 2), np.float32))
    assert flatten(x, start_axis=1).shape == (1, 4096)


def test_reshape_count_mismatch():
    with pytest.raises(ShapeError):
        reshape(randt((3, 4)), (5, 3))


def test_concat_unequal_extent_error():
    with pytest.raises(ShapeError):
        concat([randt((2, 3)), randt((3, 3))], axis=1)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-10, 10)))
def test_reshape_inverse_is_identity(arr):
    t = Tensor(arr)
    back = reshape(reshape(t, (-1,)), arr.shape)
    np.testing.assert_array_equal(back.data, arr)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 3), st.integers(0, 3), st.integers(0, 3), st.integers(0, 3))
def test_pad_then_crop_is_identity(b0, a0, b1, a1):
    arr = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(np.float32)
    padded = pad3d(Tensor(arr), ((b0, a0), (b1, a1), (1, 0)))
    crop = padded.data[b0:b0 + 2, b1:b1 + 3, 1:1 + 4]
    np.testing.assert_array_equal(crop, arr)


def test_concat_split_roundtrip_gradients():
    a = randt((2, 3), seed=7, requires_grad=True)
    b = randt((2, 2), seed=8, requires_grad=True)
    out = concat([a, b], axis=1)
    tsum(mul(out, 2.0)).backward()
    np.testing.assert_allclose(a.grad, np.full((2, 3), 2.0))
    np.testing.assert_allclose(b.grad, np.full((2, 2), 2.0))


def test_transpose_backward_routes():
    a = randt((2, 3), seed=9, requires_grad=True)
    g = np.arange(6.0).reshape(3, 2)
    out = transpose(a, (1, 0))
    mul(out, Tensor(g)).sum().backward()
    np.testing.assert_allclose(a.grad, g.T)


# ---------------------------------------------------------------------------
# backward semantics

def test_backward_sum_gives_ones():
    x = randt((2, 3, 2), seed=10, requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 2)))


def test_backward_square():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    mul(x, x).sum().backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_non_scalar_root_rejected():
    x = randt((2, 2), seed=11, requires_grad=True)
    with pytest.raises(AutodiffError):
        mul(x, 2.0).backward()


def test_backward_twice_rejected():
    x = randt((3,), seed=12, requires_grad=True)
    y = x.sum()
    y.backward()
    with pytest.raises(AutodiffError):
        y.backward()


def test_backward_on_detached_rejected():
    with pytest.raises(AutodiffError):
        Tensor([1.0]).backward()


def test_no_grad_disables_recording():
    x = randt((3,), seed=13, requires_grad=True)
    with no_grad():
        y = mul(x, x).sum()
    assert not y.requires_grad
    with pytest.raises(AutodiffError):
        y.backward()


def test_grad_accumulates_across_reuse():
    x = Tensor([2.0], requires_grad=True)
    add(mul(x, x), mul(x, 3.0)).sum().backward()   # d/dx (x^2 + 3x) = 2x + 3
    assert x.grad[0] == pytest.approx(7.0)


def test_getitem_scatters_gradient():
    x = randt((3, 4), seed=14, requires_grad=True)
    x[1:, 2:].sum().backward()
    expected = np.zeros((3, 4))
    expected[1:, 2:] = 1.0
    np.testing.assert_array_equal(x.grad, expected)


# ---------------------------------------------------------------------------
# softmax

def test_softmax_uniform():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_overflow_safe():
    out = softmax(Tensor([1000.0, 0.0]))
    np.testing.assert_allclose(out.data, [1.0, 0.0])
    assert np.all(np.isfinite(out.data))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)),
              elements=st.floats(-30, 30)), st.floats(-50, 50))
def test_softmax_shift_invariant_and_normalized(arr, c):
    base = softmax(Tensor(arr)).data
    shifted = softmax(Tensor(arr + c)).data
    np.testing.assert_allclose(base, shifted, atol=1e-7)
    np.testing.assert_allclose(base.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(base >= 0)


# ---------------------------------------------------------------------------
# determinism

def test_forward_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.standard_normal((4, 5)).astype(np.float32))
        w = Tensor(rng.standard_normal((5, 3)).astype(np.float32))
        return softmax(matmul(leaky_relu(x, 0.2), w)).data.tobytes()

    assert run() == run()


# ---------------------------------------------------------------------------
# gradcheck behavior

def test_gradcheck_constant_function_exactly_zero():
    x = randt((3,), seed=15, requires_grad=True)
    report = gradcheck(lambda t: mul(t, 0.0).sum(), x, tol=1e-6)
    assert report.passed
    assert report.max_rel_err == 0.0
    assert report.max_abs_err == 0.0


def test_gradcheck_requires_float64():
    x = Tensor(np.zeros(3, np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        gradcheck(lambda t: t.sum(), x)


def test_gradcheck_catches_wrong_gradient():
    from voxformer.tensor import _node

    def bad_double(t):
        # forward 2x but backward claims 3x
        return _node(t.data * 2.0, (t,), lambda g: t._accumulate(3.0 * g), "bad")

    x = randt((3,), seed=16, requires_grad=True)
    assert not gradcheck(lambda t: bad_double(t).sum(), x, tol=1e-4).passed
