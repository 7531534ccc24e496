import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nudgeforge import autodiff as ad
from nudgeforge.checks import gradcheck_suite


def grads_of(fn, params):
    return ad.value_and_grad(fn, params)[1]


def test_conv1d_identity_kernel():
    W = np.zeros((1, 1, 5))
    W[0, 0, 2] = 1.0
    x = np.array([[[1.0, 2.0, 3.0, 4.0]]])
    out = ad.conv1d_circular(x, W, np.zeros((1, 4)))
    np.testing.assert_array_equal(out, x)


def test_tanh_of_zeros():
    np.testing.assert_array_equal(ad.tanh(np.zeros(3)), np.zeros(3))


def test_conv1d_all_ones_kernel_on_constant():
    c = 1.7
    out = ad.conv1d_circular(np.full((1, 1, 9), c), np.ones((1, 1, 5)))
    np.testing.assert_allclose(out, 5 * c, rtol=1e-15)


def test_shape_error_names_op_and_extents():
    with pytest.raises(ad.ShapeError) as info:
        ad.add(ad.Tensor(np.ones(3), requires_grad=True), ad.Tensor(np.ones(4), requires_grad=True))
    assert info.value.op == "add"
    assert (3,) in info.value.shapes and (4,) in info.value.shapes
    with pytest.raises(ad.ShapeError, match="conv1d_circular"):
        ad.conv1d_circular(np.ones((1, 2, 8)), np.ones((1, 3, 5)))


def test_grad_of_sum_is_ones():
    g = grads_of(lambda p: ad.sum(p["w"]), {"w": np.array([0.3, -1.0, 2.0])})
    np.testing.assert_array_equal(g["w"], np.ones(3))


def test_grad_of_sum_tanh_at_zero():
    g = grads_of(lambda p: ad.sum(ad.tanh(p["w"])), {"w": np.zeros(4)})
    np.testing.assert_array_equal(g["w"], np.ones(4))


def test_conv_weight_grad_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 12))
    W = rng.standard_normal((3, 2, 5))
    rep = ad.gradient_check(lambda p: ad.sum(ad.conv1d_circular(x, p["W"])), {"W": W},
                            tolerance=1e-6)
    assert rep["all_passed"], rep


def test_quadratic_gradient_check():
    rep = ad.gradient_check(lambda p: ad.sum(ad.mul(p["w"], p["w"])), {"w": np.array([1.0, 2.0])},
                            tolerance=1e-9)
    assert rep["all_passed"], rep
    g = grads_of(lambda p: ad.sum(ad.mul(p["w"], p["w"])), {"w": np.array([1.0, 2.0])})
    np.testing.assert_array_equal(g["w"], [2.0, 4.0])


def test_gradient_check_rejects_nondeterministic_function():
    calls = [0]

    def fn(p):
        calls[0] += 1
        return ad.scale(ad.sum(p["w"]), float(calls[0]))

    with pytest.raises(ad.NonDeterministicError):
        ad.gradient_check(fn, {"w": np.ones(2)})


def test_backward_rejects_non_scalar_and_cleared_tape():
    w = ad.Tensor(np.ones(3), requires_grad=True, name="w")
    tape = ad.Tape()
    with tape:
        y = ad.tanh(w)
        s = ad.sum(y)
    with pytest.raises(ad.TapeError):
        ad.backward(tape, y, {"w": w})
    tape.clear()
    with pytest.raises(ad.TapeError):
        ad.backward(tape, s, {"w": w})


def test_unreached_parameter_gets_zero_gradient():
    g = grads_of(lambda p: ad.sum(p["a"]), {"a": np.ones(2), "b": np.ones((2, 3))})
    np.testing.assert_array_equal(g["b"], np.zeros((2, 3)))


def test_every_primitive_dno_and_window_pass_gradient_check():
    results = gradcheck_suite()
    failed = [r for r in results if not r[2]]
    assert not failed, failed
    names = {r[0] for r in results}
    for op in ("matvec", "add", "mul", "scale", "tanh", "sum", "mean", "concat", "reshape",
               "conv1d_stride1", "conv_transpose1d_stride2", "conv2d_stride1",
               "conv_transpose2d_stride2", "dno_1d", "dno_2d", "unrolled_window_k2"):
        assert op in names


def test_linearity_of_backward():
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal(6)
    f = lambda p: ad.sum(ad.tanh(p["x"]))
    g = lambda p: ad.mean(ad.mul(p["x"], p["x"]))
    alpha, beta = 0.7, -2.3
    combo = grads_of(lambda p: ad.add(ad.scale(f(p), alpha), ad.scale(g(p), beta)), {"x": x0})
    np.testing.assert_allclose(combo["x"],
                               alpha * grads_of(f, {"x": x0})["x"] + beta * grads_of(g, {"x": x0})["x"],
                               rtol=1e-12, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 15), st.integers(0, 2**31 - 1))
def test_conv1d_commutes_with_cyclic_shift(s, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 16))
    W = rng.standard_normal((4, 3, 5))
    lhs = ad.conv1d_circular(np.roll(x, s, axis=-1), W)
    rhs = np.roll(ad.conv1d_circular(x, W), s, axis=-1)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_forward_and_gradients_are_bit_deterministic():
    rng = np.random.default_rng(3)
    p = {"W": rng.standard_normal((4, 2, 5)), "x": rng.standard_normal((1, 2, 8))}
    fn = lambda q: ad.sum(ad.tanh(ad.conv1d_circular(q["x"], q["W"])))
    v1, g1 = ad.value_and_grad(fn, p)
    v2, g2 = ad.value_and_grad(fn, p)
    assert v1 == v2
    for k in g1:
        np.testing.assert_array_equal(g1[k], g2[k])


def test_single_precision_is_preserved():
    x = ad.Tensor(np.ones((2, 1, 8), dtype=np.float32), requires_grad=True)
    out = ad.conv_transpose1d_circular(x, np.ones((1, 3, 5), dtype=np.float32), stride=2)
    assert out.dtype == np.float32
