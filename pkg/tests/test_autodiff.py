import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lora2 import autodiff as ad
from lora2.autodiff import (
    GraphError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    check_gradients,
    finite_diff_check,
    matmul,
)

from .oracles import naive_matmul, naive_transpose


def test_matmul_identity():
    m = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(matmul(np.eye(3), m), m)


def test_matmul_hand_case():
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[1], [1]]), [[3], [7]])


def test_matmul_bitwise_equals_triple_loop():
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    want = np.array(naive_matmul(a.tolist(), b.tolist()))
    assert np.array_equal(matmul(a, b), want)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_matmul_bitwise_property(n, m, p, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, m)) * 1e3, rng.normal(size=(m, p))
    assert np.array_equal(matmul(a, b), np.array(naive_matmul(a.tolist(), b.tolist())))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_tensor_rejects_non_finite_and_empty():
    with pytest.raises(NonFiniteError):
        Tensor([[np.nan]])
    with pytest.raises(NonFiniteError):
        Tensor([[1.0, np.inf]])
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_op_that_overflows_is_caught():
    big = Tensor([[1e200]])
    with pytest.raises(NonFiniteError):
        big * 1e200


def test_transpose_involution():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(3, 5))
    t = Tensor(m)
    assert np.array_equal(t.T.T.value, m)
    assert np.array_equal(t.T.value, np.array(naive_transpose(m.tolist())))


def test_grad_of_squared_norm_is_2m():
    tape = Tape()
    m = tape.leaf("m", [[1.0, -2.0], [3.0, 0.5]])
    g = tape.backward(ad.sq_frobenius(m))
    assert np.array_equal(g["m"], 2 * m.value)


def test_grad_of_residual_norm():
    rng = np.random.default_rng(3)
    tape = Tape()
    a = tape.leaf("a", rng.normal(size=(3, 4)))
    b = tape.leaf("b", rng.normal(size=(4, 2)))
    c = tape.leaf("c", rng.normal(size=(3, 2)), trainable=False)
    g = tape.backward(ad.sq_frobenius(a @ b - c))
    assert set(g) == {"a", "b"}
    r = a.value @ b.value - c.value
    np.testing.assert_allclose(g["a"], 2 * r @ b.value.T, rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(g["b"], 2 * a.value.T @ r, rtol=1e-13, atol=1e-14)


def test_frozen_leaves_get_no_entry_and_unused_get_zeros():
    tape = Tape()
    x = tape.leaf("x", [[2.0]])
    tape.leaf("frozen", [[1.0]], trainable=False)
    tape.leaf("unused", np.ones((2, 2)))
    g = tape.backward(ad.sq_frobenius(x))
    assert set(g) == {"x", "unused"}
    assert np.array_equal(g["unused"], np.zeros((2, 2)))


def test_backward_requires_scalar():
    tape = Tape()
    x = tape.leaf("x", np.ones((2, 2)))
    with pytest.raises(GraphError, match="scalar"):
        backward(x @ x)


def test_backward_detects_cycle():
    a = Tensor([[1.0]], name="a")
    b = ad.scale(a, 2.0)
    # wire a cycle by hand; the public ops cannot create one
    a.parents = (b,)
    with pytest.raises(GraphError, match="cycle"):
        backward(ad.sq_frobenius(b))


def test_duplicate_leaf_rejected():
    tape = Tape()
    tape.leaf("w", [[1.0]])
    with pytest.raises(GraphError):
        tape.leaf("w", [[2.0]])


def test_shared_subexpression_accumulates():
    tape = Tape()
    x = tape.leaf("x", [[3.0]])
    y = x * x.value[0, 0]  # scalar scale by a constant
    g = tape.backward(ad.total(ad.mul(x, x) + y))
    assert g["x"][0, 0] == pytest.approx(2 * 3.0 + 3.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3, allow_nan=False))
def test_backward_is_linear(seed, alpha):
    rng = np.random.default_rng(seed)
    vals = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2)), "c": rng.normal(size=(3, 2))}
    w = rng.normal(size=(3, 2))

    def l1(t):
        return ad.sq_frobenius(ad.tanh(t["a"] @ t["b"]) - t["c"])

    def l2(t):
        return ad.total(ad.mul(t["a"] @ t["b"], ad.constant(w))) + ad.sq_frobenius(t["a"])

    def grads(fn):
        tape = Tape()
        return tape.backward(fn(tape.bind(vals)))

    g1, g2 = grads(l1), grads(l2)
    combined = grads(lambda t: ad.scale(l1(t), alpha) + l2(t))
    for k in vals:
        np.testing.assert_allclose(combined[k], alpha * g1[k] + g2[k], rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize(
    "build",
    [
        lambda t: ad.sq_frobenius(t["a"] @ t["b"]),
        lambda t: ad.total(ad.tanh(t["a"]) @ t["b"]),
        lambda t: ad.abs_sum(t["a"] @ t["b"]),
        lambda t: ad.sq_frobenius(ad.relu(t["a"] @ t["b"]) - ad.constant(np.ones((3, 2)))),
        lambda t: ad.sq_frobenius(ad.diag(t["v"]) @ t["a"]),
        lambda t: ad.cross_entropy(t["a"] @ t["b"], np.array([0, 1, 1])),
        lambda t: ad.sq_frobenius(ad.scale(ad.transpose(t["b"]), 0.5) - ad.constant(np.zeros((2, 4)))),
    ],
    ids=["mm-norm", "tanh", "abs", "relu", "diag", "cross-entropy", "transpose-scale"],
)
def test_each_op_matches_finite_differences(build):
    rng = np.random.default_rng(5)
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2)), "v": rng.normal(size=(1, 3))}
    for rep in check_gradients(build, params):
        assert rep.passed, str(rep)


def test_quadratic_passes_and_params_untouched():
    params = {"x": np.array([[1.0, -2.0, 0.5]])}
    before = params["x"].copy()
    rep = finite_diff_check(lambda t: ad.sq_frobenius(t["x"]), params, "x", step=1e-6, tolerance=1e-5)
    assert rep.passed and rep.n_checked == 3
    assert np.array_equal(params["x"], before)


def test_abs_at_zero_is_skipped():
    params = {"x": np.array([[0.0, 1.5, -2.0]])}
    rep = finite_diff_check(lambda t: ad.abs_sum(t["x"]), params, "x")
    assert rep.skipped == [(0, 0)]
    assert rep.n_checked == 2 and rep.passed


def test_relu_kink_is_skipped():
    params = {"x": np.array([[0.0, 2.0]])}
    rep = finite_diff_check(lambda t: ad.total(ad.relu(t["x"])), params, "x")
    assert rep.skipped == [(0, 0)] and rep.passed


def test_checker_catches_a_wrong_gradient():
    def bad_square(a):
        out = ad.mul(a, a)
        out.grad_fn = lambda g: (g * a.value, None)  # missing factor 2
        return out

    rep = finite_diff_check(lambda t: ad.total(bad_square(t["x"])), {"x": np.array([[1.0, 2.0]])}, "x")
    assert not rep.passed
    assert rep.max_rel_error == pytest.approx(0.5, rel=1e-6)


def test_checker_errors():
    params = {"x": np.ones((1, 1))}
    fn = lambda t: ad.sq_frobenius(t["x"])  # noqa: E731
    with pytest.raises(KeyError):
        finite_diff_check(fn, params, "nope")
    with pytest.raises(ValueError):
        finite_diff_check(fn, params, "x", frozen=["x"])
    with pytest.raises(ValueError):
        finite_diff_check(fn, params, "x", step=0.0)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        ad.cross_entropy(Tensor(np.zeros((2, 2))), np.array([0, 2]))
