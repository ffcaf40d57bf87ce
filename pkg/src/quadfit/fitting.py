"""Direct sequence fitting: pose, shape, and camera from one clip.

Optimizes (beta, theta_global, theta_joints, log s, p_x, p_y) with Adam
against the combined keypoint / silhouette / smoothness / prior loss. The
scale is optimized in log space so the weak-perspective camera stays valid
by construction.
"""

import numpy as np

from . import camera as cm
from . import losses as ls
from . import model as md
from . import render as rd
from . import tape as tp

FIT_LR = 1e-2
YAW_GRID = (0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi)
_FALLBACK_CAM = (0.9, 0.0, 0.0)


def _weighted_spread(points, w2):
    """RMS distance from the weighted centroid; points (K, D), w2 (K,)."""
    total = w2.sum()
    c = (points * w2[:, None]).sum(axis=0) / total
    d2 = ((points - c) ** 2).sum(axis=1)
    return c, float(np.sqrt((d2 * w2).sum() / total))


def _closed_form_cam(kp3d, kp2d, conf, bbox):
    """Weak-perspective (s, p_x, p_y) matching keypoint centroid and spread.

    Works in the crop frame, where the projection is u = f (x + p)/t_z + r/2
    with t_z determined by s alone.
    """
    w2 = conf * conf
    if w2.sum() <= 0:
        return _FALLBACK_CAM
    gt_crop = cm.full_to_crop(kp2d, bbox)
    c2d, spread2d = _weighted_spread(gt_crop, w2)
    c3d, spread3d = _weighted_spread(kp3d[:, :2], w2)
    if spread2d <= 1e-9 or spread3d <= 1e-9:
        return _FALLBACK_CAM
    s = 2.0 * spread2d / (cm.CROP_RES * spread3d)
    s = float(np.clip(s, 1e-3, 10.0))
    tz = 2.0 * cm.F_CROP / (cm.CROP_RES * s)
    p = (c2d - cm.CROP_RES / 2.0) * tz / cm.F_CROP - c3d
    return s, float(p[0]), float(p[1])


def init_pose(clip, model: md.MeshModel) -> md.PoseState:
    """Deterministic starting point for fit_sequence.

    Shape at the prior mean (zero), joints at the prior mean, global
    rotation picked from a 4-way yaw grid by keypoint loss, camera from a
    closed-form weak-perspective match per frame.
    """
    T = clip.T
    J = model.n_joints
    beta = np.zeros(model.n_shape)
    tj = np.tile(model.pose_prior_mean.reshape(1, J - 1, 3), (T, 1, 1))

    best = None
    for yaw in YAW_GRID:
        tg = np.tile(np.array([0.0, yaw, 0.0]), (T, 1))
        posed = md.pose_sequence(model, beta, tg, tj)
        kp3d = md.regress_keypoints3d(posed, model)
        cam_weak = np.array(
            [
                _closed_form_cam(kp3d[t], clip.keypoints2d[t], clip.conf[t], clip.bboxes[t])
                for t in range(T)
            ]
        )
        try:
            cams = cm.cameras_from_weak(cam_weak, clip.bboxes)
            pred = np.stack([cm.project_full(kp3d[t], cams, t) for t in range(T)])
            score = float(
                ls.keypoint_loss(pred, clip.keypoints2d, clip.conf, 1.0)
            )
        except ValueError:
            # zero-confidence clip or degenerate geometry: neutral start
            score = np.inf
        if best is None or score < best[0]:
            best = (score, tg, cam_weak)

    _, tg, cam_weak = best
    if not np.isfinite(best[0]):
        cam_weak = np.tile(np.array(_FALLBACK_CAM), (T, 1))
        tg = np.zeros((T, 3))
    return md.PoseState(
        beta=beta, theta_global=tg, theta_joints=tj, cam_weak=cam_weak
    ).canonicalize()


def _pack(pose: md.PoseState):
    s = pose.cam_weak[:, 0]
    if (s <= 0).any():
        raise ValueError("invalid pose: cam_weak")
    return np.concatenate(
        [
            pose.beta.ravel(),
            pose.theta_global.ravel(),
            pose.theta_joints.ravel(),
            np.log(s),
            pose.cam_weak[:, 1],
            pose.cam_weak[:, 2],
        ]
    )


def _unpack(x, S, T, J):
    n_tg = 3 * T
    n_tj = 3 * T * (J - 1)
    beta = x[:S]
    tg = x[S : S + n_tg].reshape(T, 3)
    tj = x[S + n_tg : S + n_tg + n_tj].reshape(T, J - 1, 3)
    rest = x[S + n_tg + n_tj :]
    return beta, tg, tj, rest[:T], rest[T : 2 * T], rest[2 * T :]


def sequence_loss_fn(clip, model: md.MeshModel, weights, sil_res=32):
    """The fitting objective as a closure over a packed parameter vector.

    Returns (loss_fn, parts) where loss_fn maps the flat vector produced by
    packing a PoseState to the total loss, and parts is a dict refreshed on
    every evaluation with the per-term float values. Raises "no supervision"
    when neither keypoints nor usable silhouettes constrain the problem.
    """
    T = clip.T
    S = model.n_shape
    J = model.n_joints

    conf = np.asarray(clip.conf, dtype=np.float64)
    has_kp = float((conf * conf).sum()) > 0.0

    valid = np.array(
        [bool(v) and clip.masks[t] is not None for t, v in enumerate(clip.sil_valid)]
    )
    use_sil = weights.w_sil > 0 and sil_res > 0 and valid.any()
    if not has_kp and not use_sil:
        raise ValueError("no supervision")
    gt_small = [None] * T
    if use_sil:
        if 224 % sil_res:
            raise ValueError("config error: sil_res must divide 224")
        for t in range(T):
            if valid[t]:
                gt_small[t] = rd.downsample_mask(clip.masks[t], sil_res)

    parts = {}

    def loss_fn(x):
        beta, tg, tj, logs, px, py = _unpack(x, S, T, J)
        cam_weak = tp.stack([tp.exp(logs), px, py], axis=-1)
        cams = cm.cameras_from_weak(cam_weak, clip.bboxes)
        posed = md.pose_sequence(model, beta, tg, tj)
        kp3d = md.regress_keypoints3d(posed, model)

        if has_kp:
            pred2d = tp.stack(
                [cm.project_full(kp3d[t], cams, t) for t in range(T)], axis=0
            )
            l_kp = ls.keypoint_loss(pred2d, clip.keypoints2d, conf, weights.w_kp)
        else:
            l_kp = tp.multiply(x[0], 0.0)

        if use_sil:
            pred_masks = [
                rd.rasterize_soft(posed[t], model.faces, cams, t, res=sil_res)
                if valid[t]
                else None
                for t in range(T)
            ]
            l_sil = ls.silhouette_loss(pred_masks, gt_small, weights.w_sil, valid=valid)
        else:
            l_sil = tp.multiply(x[0], 0.0)

        chi_j = tp.reshape(tp.rodrigues(tj), (T, (J - 1) * 9))
        chi_g = tp.reshape(tp.rodrigues(tg), (T, 9))
        sm_j = ls.smoothness_loss(chi_j, weights.w_smooth_joints)
        sm_g = ls.smoothness_loss(chi_g, weights.w_smooth_global)
        sm_c = ls.smoothness_loss(cams.gamma_full, weights.w_smooth_gamma)
        l_smooth = sm_j + sm_g + sm_c

        l_prior = None
        for t in range(T):
            p = ls.prior_loss(
                beta, tj[t], model, weights.w_beta_prior, weights.w_theta_prior
            )
            l_prior = p if l_prior is None else l_prior + p
        l_prior = l_prior * (1.0 / T)

        parts["l_kp"] = float(tp.value(l_kp))
        parts["l_sil"] = float(tp.value(l_sil))
        parts["l_smooth"] = float(tp.value(l_smooth))
        parts["l_prior"] = float(tp.value(l_prior))
        parts["sub"] = {
            "smooth_joints": float(tp.value(sm_j)),
            "smooth_global": float(tp.value(sm_g)),
            "smooth_gamma": float(tp.value(sm_c)),
        }
        return l_kp + l_sil + l_smooth + l_prior

    return loss_fn, parts


def fit_sequence(clip, model: md.MeshModel, init: md.PoseState, weights, iters,
                 lr=FIT_LR, sil_res=32):
    """Fit one clip by direct optimization; returns (PoseState, trace).

    The trace holds one LossReport per iteration, evaluated at the iterate
    before its Adam step. sil_res sets the silhouette rendering resolution
    (it must divide 224); 0 disables the silhouette term entirely. The run
    is deterministic: same inputs, same result, bit for bit.
    """
    T = clip.T
    S = model.n_shape
    J = model.n_joints
    if init.n_frames != T or init.beta.shape != (S,):
        raise ValueError("shape error")
    loss_fn, parts = sequence_loss_fn(clip, model, weights, sil_res=sil_res)

    state = tp.OptimizerState(lr=lr)
    params = {"x": _pack(init)}
    trace = []
    for i in range(int(iters)):
        val, g = tp.grad(loss_fn, params["x"])
        if not np.isfinite(val) or not np.isfinite(g).all():
            raise ValueError(f"diverged at iteration {i}")
        trace.append(
            ls.total_loss(
                parts["l_kp"], parts["l_sil"], parts["l_smooth"], parts["l_prior"],
                parts=dict(parts["sub"]),
            )
        )
        tp.adam_step(state, params, {"x": g})

    beta, tg, tj, logs, px, py = _unpack(params["x"], S, T, J)
    if not np.isfinite(params["x"]).all():
        raise ValueError(f"diverged at iteration {int(iters) - 1}")
    cam_weak = np.stack([np.exp(logs), px, py], axis=-1)
    fitted = md.PoseState(
        beta=beta, theta_global=tg, theta_joints=tj, cam_weak=cam_weak
    ).canonicalize()
    return fitted, trace
