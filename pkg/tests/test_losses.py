"""Training losses: closed-form values, invariances, gradients."""

import dataclasses

import numpy as np
import pytest

import quadfit.losses as ls
import quadfit.tape as tp


def test_default_weights():
    w = ls.LossWeights()
    assert w.w_kp == pytest.approx(0.001)
    assert w.w_sil == pytest.approx(1e-4)
    assert w.w_beta_prior == pytest.approx(50.0)
    assert w.w_theta_prior == pytest.approx(0.01)
    assert w.w_smooth_gamma == pytest.approx(0.1)
    assert w.w_smooth_global == pytest.approx(0.2)
    assert w.w_smooth_joints == pytest.approx(10.0)


def test_keypoint_loss_zero_at_gt(rng):
    gt = rng.uniform(0, 224, size=(3, 5, 2))
    conf = rng.uniform(0.2, 1.0, size=(3, 5))
    assert ls.keypoint_loss(gt.copy(), gt, conf, w=1.0) == 0.0


def test_keypoint_loss_at_robustifier_scale():
    sigma = 50.0
    gt = np.zeros((1, 1, 2))
    pred = np.array([[[sigma, 0.0]]])
    conf = np.ones((1, 1))
    # rho(sigma) = sigma^2/2
    got = ls.keypoint_loss(pred, gt, conf, w=2.0, sigma_gm=sigma)
    assert got == pytest.approx(2.0 * sigma * sigma / 2.0)


def test_keypoint_loss_saturates():
    sigma = 50.0
    gt = np.zeros((1, 1, 2))
    pred = np.array([[[1e9, 0.0]]])
    conf = np.ones((1, 1))
    got = ls.keypoint_loss(pred, gt, conf, w=1.0, sigma_gm=sigma)
    assert got == pytest.approx(sigma * sigma, rel=1e-6)


def test_keypoint_loss_no_supervision():
    gt = np.zeros((2, 3, 2))
    with pytest.raises(ValueError, match="no supervision"):
        ls.keypoint_loss(gt, gt, np.zeros((2, 3)), w=1.0)


def test_keypoint_loss_permutation_invariant(rng):
    pred = rng.uniform(0, 224, size=(2, 6, 2))
    gt = rng.uniform(0, 224, size=(2, 6, 2))
    conf = rng.uniform(0.0, 1.0, size=(2, 6))
    perm = rng.permutation(6)
    a = ls.keypoint_loss(pred, gt, conf, w=1.0)
    b = ls.keypoint_loss(pred[:, perm], gt[:, perm], conf[:, perm], w=1.0)
    assert a == pytest.approx(b, rel=1e-12)


def test_silhouette_loss_identical_masks(rng):
    masks = [rng.uniform(size=(8, 8)) for _ in range(3)]
    assert ls.silhouette_loss(masks, [m.copy() for m in masks], w=1.0) == 0.0


def test_silhouette_loss_all_invalid_skipped(rng):
    masks = [rng.uniform(size=(8, 8)) for _ in range(4)]
    other = [rng.uniform(size=(8, 8)) for _ in range(4)]
    stats = {}
    got = ls.silhouette_loss(masks, other, w=1.0, valid=np.zeros(4, bool), stats=stats)
    assert got == 0.0
    assert stats["skipped"] == 4


def test_silhouette_loss_constant_half_difference():
    T = 3
    pred = [np.full((6, 6), 0.75) for _ in range(T)]
    gt = [np.full((6, 6), 0.25) for _ in range(T)]
    # smoothL1(0.5) = 0.125 per pixel, mean over pixels, summed over frames
    got = ls.silhouette_loss(pred, gt, w=2.0)
    assert got == pytest.approx(2.0 * T * 0.125)


def test_silhouette_loss_resolution_mismatch():
    with pytest.raises(ValueError, match="shape error"):
        ls.silhouette_loss([np.zeros((4, 4))], [np.zeros((5, 5))], w=1.0)


def test_smoothness_zero_for_constant_and_linear():
    const = np.tile([1.0, -2.0], (5, 1))
    assert ls.smoothness_loss(const, w=3.0) == 0.0
    t = np.arange(5.0)[:, None]
    linear = t * np.array([[0.7, -0.3]])
    assert ls.smoothness_loss(linear, w=3.0) == pytest.approx(0.0, abs=1e-12)


def test_smoothness_hand_computed():
    got = ls.smoothness_loss(np.array([0.0, 0.0, 1.0]), w=1.0)
    assert got == pytest.approx(1.0 / 3.0, abs=1e-9)


def test_smoothness_too_short():
    with pytest.raises(ValueError, match="sequence too short"):
        ls.smoothness_loss(np.zeros((2, 3)), w=1.0)


def test_smoothness_affine_shift_invariant(rng):
    chi = rng.normal(size=(6, 4))
    a = rng.normal(size=4)
    b = rng.normal(size=4)
    shifted = chi + np.arange(6.0)[:, None] * a + b
    assert ls.smoothness_loss(chi, w=1.7) == pytest.approx(
        ls.smoothness_loss(shifted, w=1.7), rel=1e-9
    )


def test_prior_loss_zero_at_means(model):
    J = model.n_joints
    theta = model.pose_prior_mean.reshape(J - 1, 3)
    got = ls.prior_loss(model.shape_mean, theta, model, w_beta=50.0, w_theta=0.01)
    assert got == pytest.approx(0.0, abs=1e-12)


def _identity_prior_model(model):
    S = model.n_shape
    D = (model.n_joints - 1) * 3
    return dataclasses.replace(
        model, shape_cov=np.eye(S), pose_prior_cov=np.eye(D)
    )


def test_prior_loss_unit_mahalanobis(model):
    m = _identity_prior_model(model)
    beta = m.shape_mean.copy()
    beta[0] += 1.0
    theta = m.pose_prior_mean.reshape(m.n_joints - 1, 3)
    got = ls.prior_loss(beta, theta, m, w_beta=50.0, w_theta=0.01)
    assert got == pytest.approx(50.0)


def test_prior_loss_cov_scaling_quarters(model):
    m = _identity_prior_model(model)
    m4 = dataclasses.replace(m, shape_cov=4.0 * np.eye(m.n_shape))
    beta = m.shape_mean.copy()
    beta[1] += 1.0
    theta = m.pose_prior_mean.reshape(m.n_joints - 1, 3)
    a = ls.prior_loss(beta, theta, m, w_beta=1.0, w_theta=0.0)
    b = ls.prior_loss(beta, theta, m4, w_beta=1.0, w_theta=0.0)
    assert b == pytest.approx(a / 4.0)


def test_prior_loss_singular_cov(model):
    S = model.n_shape
    bad = dataclasses.replace(model, shape_cov=np.zeros((S, S)))
    theta = model.pose_prior_mean.reshape(model.n_joints - 1, 3)
    with pytest.raises(ValueError, match="invalid prior"):
        ls.prior_loss(np.ones(S), theta, bad, w_beta=1.0, w_theta=0.0)


def test_total_loss_zero_and_single_component():
    rep = ls.total_loss(0.0, 0.0, 0.0, 0.0)
    assert rep.total == 0.0
    rep = ls.total_loss(0.0, 0.7, 0.0, 0.0)
    assert rep.total == pytest.approx(0.7)
    assert rep.l_sil == pytest.approx(0.7)


def test_total_loss_resummation(rng):
    for _ in range(20):
        parts = rng.uniform(size=4)
        rep = ls.total_loss(*parts)
        assert abs(rep.total - parts.sum()) < 1e-12


def test_geman_mcclure_monotone_bounded(rng):
    x = np.sort(rng.uniform(0, 1e4, size=50))
    rho = ls.geman_mcclure_sq(x * x, 50.0)
    assert (np.diff(rho) >= 0).all()
    assert (rho <= 50.0**2).all()


def test_smooth_l1_quadratic_below_transition():
    assert ls.smooth_l1(np.array([0.5])) == pytest.approx(0.125)
    assert ls.smooth_l1(np.array([2.0])) == pytest.approx(1.5)  # |x| - 0.5


def test_keypoint_loss_gradients(rng):
    gt = rng.uniform(0, 224, size=(2, 4, 2))
    conf = rng.uniform(0.2, 1.0, size=(2, 4))

    def f(x):
        pred = tp.reshape(x, (2, 4, 2))
        return ls.keypoint_loss(pred, gt, conf, w=1.0)

    rep = tp.check_gradient(f, (gt + rng.normal(scale=20.0, size=gt.shape)).ravel())
    assert rep.passed, rep.max_rel_err


def test_smoothness_loss_gradients(rng):
    def f(x):
        return ls.smoothness_loss(tp.reshape(x, (5, 3)), w=2.0)

    rep = tp.check_gradient(f, rng.normal(size=15))
    assert rep.passed, rep.max_rel_err


def test_prior_loss_gradients(model, rng):
    S = model.n_shape
    D = (model.n_joints - 1) * 3

    def f(x):
        beta = x[np.arange(S)]
        theta = tp.reshape(x[S + np.arange(D)], (model.n_joints - 1, 3))
        return ls.prior_loss(beta, theta, model, w_beta=50.0, w_theta=0.01)

    x0 = np.concatenate([model.shape_mean + 0.3, model.pose_prior_mean + 0.05])
    rep = tp.check_gradient(f, x0, probes=8)
    assert rep.passed, rep.max_rel_err


def test_silhouette_loss_gradients(rng):
    gt = [rng.uniform(size=(6, 6)) for _ in range(2)]

    def f(x):
        pred = tp.reshape(x, (2, 6, 6))
        return ls.silhouette_loss([pred[0], pred[1]], gt, w=1.0)

    rep = tp.check_gradient(f, rng.uniform(size=72) * 2.0)
    assert rep.passed, rep.max_rel_err


def test_trace_csv_roundtrip(tmp_path, rng):
    reports = [ls.total_loss(*rng.uniform(size=4)) for _ in range(5)]
    path = tmp_path / "trace.csv"
    ls.write_trace_csv(path, reports)
    back = ls.read_trace_csv(path)
    assert len(back) == 5
    for a, b in zip(reports, back):
        assert b.total == pytest.approx(a.total, rel=1e-9)
        assert b.l_kp == pytest.approx(a.l_kp, rel=1e-9)
