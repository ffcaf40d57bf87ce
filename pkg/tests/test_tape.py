"""Reverse-mode tape: op correctness, gradient checks, Adam behavior."""

import numpy as np
import pytest

import quadfit.tape as tp


def test_square_value_and_grad():
    val, g = tp.grad(lambda x: tp.sum(tp.multiply(x, x)), np.array([3.0]))
    assert val == pytest.approx(9.0)
    assert g == pytest.approx([6.0])


def test_nonscalar_loss_rejected():
    with pytest.raises(ValueError, match="scalar"):
        tp.grad(lambda x: tp.multiply(x, x), np.array([1.0, 2.0]))


def test_sum_sin_grad_at_zero():
    x = np.zeros(7)
    val, g = tp.grad(lambda v: tp.sum(tp.sin(v)), x)
    assert val == pytest.approx(0.0)
    np.testing.assert_allclose(g, np.ones(7), atol=1e-12)


def test_quadratic_gradcheck_tight():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])

    def f(x):
        col = tp.reshape(x, (2, 1))
        return tp.sum(tp.multiply(col, tp.matmul(A, col)))

    rep = tp.check_gradient(f, np.array([0.3, -0.7]), tol=1e-7)
    assert rep.passed
    assert rep.max_rel_err < 1e-6


def test_corrupted_adjoint_detected():
    # negative control: derivative off by 1%, the checker must flag it
    def bad_sin(a):
        return tp._unary(a, np.sin, lambda x, o: np.cos(x) * 1.01)

    def f(x):
        return tp.sum(bad_sin(x))

    rep = tp.check_gradient(f, np.array([0.4, 1.1, -0.8]), tol=1e-4)
    assert not rep.passed


@pytest.mark.parametrize("op,ref,dom", [
    (tp.exp, np.exp, (-1.0, 1.0)),
    (tp.log, np.log, (0.5, 2.0)),
    (tp.sqrt, np.sqrt, (0.5, 2.0)),
    (tp.sin, np.sin, (-2.0, 2.0)),
    (tp.cos, np.cos, (-2.0, 2.0)),
    (tp.sigmoid, lambda x: 1.0 / (1.0 + np.exp(-x)), (-3.0, 3.0)),
])
def test_unary_ops_match_numpy_and_gradcheck(op, ref, dom, rng):
    x = rng.uniform(dom[0], dom[1], size=5)
    out = tp.value(op(tp.Tape().var(x)))
    np.testing.assert_allclose(out, ref(x), rtol=1e-12)
    rep = tp.check_gradient(lambda v: tp.sum(op(v)), x)
    assert rep.passed, rep.worst


def test_matmul_reshape_take_grads(rng):
    A = rng.normal(size=(4, 5))

    def f(x):
        y = tp.matmul(A, tp.reshape(x, (5, 2)))
        z = tp.take(tp.reshape(y, (8,)), np.array([0, 3, 3, 7]))
        return tp.sum(tp.multiply(z, z))

    rep = tp.check_gradient(f, rng.normal(size=10))
    assert rep.passed, rep.worst


def test_where_clip_max_min_grads(rng):
    c = rng.normal(size=6) > 0

    def f(x):
        y = tp.where(c, tp.multiply(x, x), tp.negative(x))
        y = tp.maximum(y, tp.minimum(x, 0.2))
        return tp.sum(tp.multiply(y, y))

    # generic point: keep away from the max/min ties where the gradient kinks
    x = rng.normal(size=6) + 3.0
    rep = tp.check_gradient(f, x)
    assert rep.passed, rep.worst


def test_rodrigues_matches_formula(rng):
    r = rng.normal(size=3)
    R = tp.value(tp.rodrigues(np.asarray([r]))[0])
    th = np.linalg.norm(r)
    k = r / th
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    R_ref = np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * (K @ K)
    np.testing.assert_allclose(R, R_ref, atol=1e-12)
    # proper rotation
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_rodrigues_zero_angle_identity_and_grad():
    R = tp.value(tp.rodrigues(np.zeros((1, 3)))[0])
    np.testing.assert_allclose(R, np.eye(3), atol=1e-15)

    def f(r):
        R = tp.rodrigues(tp.reshape(r, (1, 3)))
        return tp.sum(tp.multiply(R, R + 0.3))

    for x in (np.zeros(3), np.full(3, 1e-5), np.array([0.9, -0.4, 0.2])):
        rep = tp.check_gradient(f, x)
        assert rep.passed, (x, rep.worst)


def test_adam_zero_gradient_is_identity():
    st = tp.OptimizerState(lr=0.1)
    params = {"x": np.array([1.0, -2.0, 3.0, 0.0])}
    out = tp.adam_step(st, dict(params), {"x": np.zeros(4)})
    np.testing.assert_array_equal(out["x"], params["x"])


def test_adam_minimizes_quadratic():
    target = np.array([1.5, -0.5, 2.0])

    def f(x):
        d = x - target
        return tp.sum(tp.multiply(d, d))

    params = {"x": np.zeros(3)}
    st = tp.OptimizerState(lr=0.05)
    for _ in range(2000):
        _, g = tp.grad(f, params["x"])
        params = tp.adam_step(st, params, {"x": g})
    val, _ = tp.grad(f, params["x"])
    assert val < 1e-8


def test_stack_concatenate_grads(rng):
    def f(x):
        a = tp.reshape(x, (2, 3))
        s = tp.stack([a, tp.multiply(a, 2.0)], axis=0)
        c = tp.concatenate([tp.reshape(s, (12,)), x], axis=0)
        return tp.sum(tp.multiply(c, c))

    rep = tp.check_gradient(f, rng.normal(size=6))
    assert rep.passed, rep.worst
