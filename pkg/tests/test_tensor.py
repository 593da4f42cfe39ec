"""Autodiff engine: op semantics, gradients, optimizers, dtype modes."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptsearch import tensor as T
from promptsearch.tensor import DegenerateInputError, ShapeError, Tensor

from conftest import GRADIENT_CASES, assert_gradients_match, rel_error


@pytest.mark.parametrize("name", sorted(GRADIENT_CASES))
def test_gradient_matches_finite_differences(name, rng):
    make, build = GRADIENT_CASES[name]
    for _ in range(3):
        assert_gradients_match(build, make(rng))


def test_matmul_example():
    a = Tensor([[1.0, 2.0]], requires_grad=True)
    b = Tensor([[3.0], [4.0]], requires_grad=True)
    out = T.matmul(a, b)
    assert out.data.tolist() == [[11.0]]
    T.sum_(out).backward()
    assert a.grad.tolist() == [[3.0, 4.0]]
    assert b.grad.tolist() == [[1.0], [2.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_softmax_symmetry_and_overflow():
    out = T.softmax(Tensor([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5])
    big = T.softmax(Tensor([1000.0, 0.0]))
    assert np.isfinite(big.data).all()
    np.testing.assert_allclose(big.data, [1.0, 0.0], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=8))
def test_softmax_sums_to_one(values):
    out = T.softmax(Tensor(np.array(values)))
    assert abs(out.data.sum() - 1.0) < 1e-9
    assert (out.data >= 0).all()


def test_layer_norm_example():
    gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))
    out = T.layer_norm(Tensor([1.0, 3.0]), gamma, beta, eps=1e-12)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-5)


def test_conv2d_average_kernel():
    img = np.arange(16, dtype=float).reshape(4, 4, 1)
    kernel = np.full((2, 2, 1, 1), 0.25)
    out = T.conv2d(Tensor(img), Tensor(kernel), stride=2)
    expected = img[:, :, 0].reshape(2, 2, 2, 2).mean(axis=(1, 3))
    np.testing.assert_allclose(out.data[:, :, 0], expected)


def test_deconv2d_upsamples_extent():
    x = Tensor(np.ones((3, 3, 2)))
    k = Tensor(np.ones((2, 2, 2, 4)) * 0.1)
    assert T.deconv2d(x, k, stride=2).shape == (6, 6, 4)
    with pytest.raises(ShapeError):
        T.deconv2d(x, Tensor(np.ones((1, 1, 2, 4))), stride=2)


def test_cosine_examples():
    val = T.cosine(Tensor([1.0, 1.0]), Tensor([1.0, 0.0])).item()
    assert abs(val - np.sqrt(0.5)) < 1e-9
    assert abs(T.cosine(Tensor([2.0, 0.0]), Tensor([1.0, 0.0])).item() - 1.0) < 1e-12
    with pytest.raises(DegenerateInputError):
        T.cosine(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


def test_smooth_l1_values():
    out = T.smooth_l1(Tensor([0.0, 2.0]), np.array([1.0, 2.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.0])
    out = T.smooth_l1(Tensor([3.0]), np.array([0.0]))
    np.testing.assert_allclose(out.data, [2.5])


def test_bce_with_logits_matches_reference():
    z = np.array([-3.0, 0.0, 4.0])
    t = np.array([1.0, 0.5, 0.0])
    out = T.bce_with_logits(Tensor(z), t)
    p = 1 / (1 + np.exp(-z))
    ref = -(t * np.log(p) + (1 - t) * np.log(1 - p))
    np.testing.assert_allclose(out.data, ref, rtol=1e-12)


def test_trailing_broadcast_only():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((4, 1))), Tensor(np.zeros((4, 3))))


def test_backward_requires_scalar():
    t = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.mul(t, 2.0).backward()


def test_no_grad_blocks_graph():
    a = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        out = T.mul(a, 2.0)
    assert out._parents == ()
    assert out._backward is None


def test_grad_accumulates_across_uses():
    a = Tensor([2.0], requires_grad=True)
    out = T.sum_(T.add(T.mul(a, a), a))  # a^2 + a -> 2a + 1 = 5
    out.backward()
    np.testing.assert_allclose(a.grad, [5.0])


def test_frozen_parameter_is_bit_identical_under_optimizers():
    frozen = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=False)
    live = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    before = frozen.data.tobytes()
    for opt_cls in (lambda ps: T.SGD(ps, lr=0.1), lambda ps: T.Adam(ps, lr=0.1)):
        opt = opt_cls([frozen, live])
        for _ in range(5):
            opt.zero_grad()
            T.sum_(T.mul(T.add(frozen, live), T.add(frozen, live))).backward()
            opt.step()
    assert frozen.data.tobytes() == before
    assert not np.array_equal(live.data, [1.0, 2.0, 3.0])


def test_float32_mode():
    T.set_default_dtype(np.float32)
    try:
        t = Tensor([1.0, 2.0])
        assert t.data.dtype == np.float32
        assert T.mul(t, 2.0).data.dtype == np.float32
    finally:
        T.set_default_dtype(np.float64)


def test_expand_leading_sums_gradients():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    out = T.sum_(T.expand_leading(a, 4))
    out.backward()
    np.testing.assert_allclose(a.grad, [4.0, 4.0])


def test_adam_skips_frozen_state():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = T.Adam([p], lr=0.1)
    opt.zero_grad()
    T.sum_(T.mul(p, p)).backward()
    opt.step()
    assert p.data[0] != 1.0
