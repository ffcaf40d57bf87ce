"""Regression networks: image-only, early-fusion, and model-fusion variants.

Small dense encoders stand in for large pretrained backbones: per-frame
visual inputs (either conf-gated keypoint coordinates in "oracle" mode or a
16x16 grayscale crop in "pixels" mode) pass through a three-layer encoder,
get the normalized bounding-box vector concatenated (zero-padded to 32),
and are aggregated over time by a residual block of two 1D convolutions.
Shape, camera, and joint pose come out of an iterative-error-feedback loop;
the global rotation comes straight from the visual features.

The three variants differ only in what feeds the pose head:
  image_only    visual features alone;
  early_fusion  visual and audio features concatenated, then two FC layers;
  model_fusion  the pose head is shared between the visual and the audio
                features, producing two pose sets during training; only the
                visual one is evaluated, and audio is optional at inference.
"""

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import camera as cm
from . import losses as ls
from . import model as md
from . import render as rd
from . import tape as tp

NET_FORMAT = "quadfit-net/1"
VARIANTS = ("image_only", "early_fusion", "model_fusion")
BBOX_PAD = 32
MEAN_CAM_S = 0.9
TRAIN_LR = 1e-3
# log-mel windows sit near log(1e-10); rescale to O(1) so the audio and
# visual features reach the shared pose head at comparable magnitudes
AUDIO_LOG_FLOOR = float(np.log(1e-10))


def _norm_audio(aw):
    return 1.0 + np.asarray(aw, dtype=np.float64) / (-AUDIO_LOG_FLOOR)


@dataclass(frozen=True)
class EncoderConfig:
    """Network dimensions; visual_dim excludes the bbox padding."""

    mode: str = "oracle"  # "oracle" | "pixels"
    visual_dim: int = 51
    audio_dim: int = 1280
    audio_bins: int = 64
    audio_frames: int = 20
    hidden: tuple = (128, 96)
    d: int = 64
    T: int = 5
    conv_kernel: int = 3
    group_norm: bool = False
    crop_small: int = 16

    def __post_init__(self):
        dims = (self.visual_dim, self.audio_dim, self.d, self.T,
                self.conv_kernel, self.crop_small) + tuple(self.hidden)
        if any(int(v) <= 0 for v in dims):
            raise ValueError("config error: dims must be positive")
        if self.mode not in ("oracle", "pixels"):
            raise ValueError("config error: unknown mode")


@dataclass
class RegressorParams:
    """Trainable weights for one variant, keyed by layer name."""

    variant: str
    cfg: EncoderConfig
    n_shape: int
    n_joints: int
    pose_prior_mean: np.ndarray  # ((J-1)*3,), the IEF starting point
    weights: dict = field(default_factory=dict)

    def n_params(self):
        return sum(int(np.prod(w.shape)) for w in self.weights.values())


@dataclass
class Prediction:
    """Forward output: the evaluated pose plus the audio-branch pose set."""

    pose: md.PoseState
    theta_joints_audio: np.ndarray = None  # (T, J-1, 3) or None


def _net_spec(cfg: EncoderConfig, S, J, variant):
    """Ordered (name, shape, zero_init) layer list shared by init and pack."""
    h1, h2 = cfg.hidden
    d, T, k = cfg.d, cfg.T, cfg.conv_kernel
    c = d + BBOX_PAD
    n_cam = 3 * T
    n_pose = 3 * (J - 1) * T
    spec = [
        ("enc1", (cfg.visual_dim, h1), False), ("enc1_b", (h1,), True),
        ("enc2", (h1, h2), False), ("enc2_b", (h2,), True),
        ("enc3", (h2, d), False), ("enc3_b", (d,), True),
        ("conv1", (k, c, c), False), ("conv1_b", (c,), True),
        ("conv2", (k, c, c), False), ("conv2_b", (c,), True),
        ("post", (c, d), False), ("post_b", (d,), True),
        ("aud1", (cfg.audio_dim, h1), False), ("aud1_b", (h1,), True),
        ("aud2", (h1, h2), False), ("aud2_b", (h2,), True),
        ("aud3", (h2, d), False), ("aud3_b", (d,), True),
    ]
    if cfg.group_norm:
        spec += [("gn1_g", (c,), False), ("gn1_b", (c,), True),
                 ("gn2_g", (c,), False), ("gn2_b", (c,), True)]
    if variant == "early_fusion":
        spec += [("fus1", (2 * d, h2), False), ("fus1_b", (h2,), True),
                 ("fus2", (h2, d), False), ("fus2_b", (d,), True)]
    spec += [
        ("psi", (d + S + n_cam, S + n_cam), True), ("psi_b", (S + n_cam,), True),
        ("phi", (d + n_pose, n_pose), True), ("phi_b", (n_pose,), True),
        ("glob", (d, 3 * T), True), ("glob_b", (3 * T,), True),
    ]
    return spec


def init_net(model: md.MeshModel, variant, seed=0, cfg=None):
    """Fresh RegressorParams: Glorot-uniform encoders, zeroed heads."""
    if variant not in VARIANTS:
        raise ValueError("config error: unknown variant")
    if cfg is None:
        cfg = EncoderConfig()
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape, zero in _net_spec(cfg, model.n_shape, model.n_joints, variant):
        if zero:
            weights[name] = np.zeros(shape)
        elif name.startswith("gn"):
            weights[name] = np.ones(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            a = np.sqrt(6.0 / (fan_in + shape[-1]))
            weights[name] = rng.uniform(-a, a, shape)
    return RegressorParams(
        variant=variant,
        cfg=cfg,
        n_shape=model.n_shape,
        n_joints=model.n_joints,
        pose_prior_mean=model.pose_prior_mean.copy(),
        weights=weights,
    )


def _rms_norm(x, axis=-1, eps=1e-8):
    """Scale features to unit RMS along `axis`.

    Applied to every feature vector that reaches a prediction head, so the
    visual and audio branches meet the shared heads at one common scale.
    """
    ms = tp.mean(tp.multiply(x, x), axis=axis, keepdims=True)
    return tp.divide(x, tp.sqrt(ms + eps))


def _relu(x):
    return tp.maximum(x, 0.0)


def _vecmat(v, M):
    """(n,) @ (n, m) -> (m,) through the tape's 2-D matmul."""
    return tp.reshape(tp.matmul(tp.reshape(v, (1, -1)), M), (-1,))


def _dense(x, w, name):
    return tp.matmul(x, w[name]) + w[name + "_b"]


def _encoder3(x, w, prefix):
    h = _relu(_dense(x, w, prefix + "1"))
    h = _relu(_dense(h, w, prefix + "2"))
    return _dense(h, w, prefix + "3")


def _group_norm(x, gamma, beta, groups=32, eps=1e-5):
    """Normalize each frame's channels within `groups` equal groups."""
    T, C = tp.value(x).shape
    g = x.reshape(T, groups, C // groups)
    mu = tp.mean(g, axis=2, keepdims=True)
    var = tp.mean((g - mu) * (g - mu), axis=2, keepdims=True)
    normed = (g - mu) / tp.sqrt(var + eps)
    return normed.reshape(T, C) * gamma + beta


def _conv1d(x, kernel, bias, T):
    """Temporal convolution with zero padding; x (T, C) -> (T, C)."""
    k = tp.value(kernel).shape[0]
    pad = (k - 1) // 2
    rows = []
    for t in range(T):
        acc = bias
        for j in range(k):
            idx = t + j - pad
            if 0 <= idx < T:
                acc = acc + _vecmat(x[idx], kernel[j])
        rows.append(acc)
    return tp.stack(rows, axis=0)


def _temporal_block(x, w, cfg):
    """Residual block of two 1D convolutions, then pool and project."""
    T = cfg.T
    h = x
    if cfg.group_norm:
        h = _group_norm(h, w["gn1_g"], w["gn1_b"])
    h = _relu(_conv1d(h, w["conv1"], w["conv1_b"], T))
    if cfg.group_norm:
        h = _group_norm(h, w["gn2_g"], w["gn2_b"])
    h = _conv1d(h, w["conv2"], w["conv2_b"], T)
    h = h + x
    pooled = tp.mean(h, axis=0)
    return _vecmat(pooled, w["post"]) + w["post_b"]


def _visual_inputs(clip, cfg: EncoderConfig):
    """Per-frame raw visual vectors (T, visual_dim), before any weights."""
    T = clip.T
    rows = []
    if cfg.mode == "oracle":
        if 3 * clip.K != cfg.visual_dim:
            raise ValueError("config error: visual_dim")
        gate = clip.conf if clip.input_conf is None else clip.input_conf
        for t in range(T):
            pts = cm.full_to_crop(clip.keypoints2d[t], clip.bboxes[t]) / cm.CROP_RES
            lam = gate[t][:, None]
            rows.append(np.concatenate([pts * lam, lam], axis=1).ravel())
    else:
        n = cfg.crop_small
        if n * n != cfg.visual_dim:
            raise ValueError("config error: visual_dim")
        for t in range(T):
            img = clip.crop_array(t)
            gray = np.asarray(img, dtype=np.float64).mean(axis=2)
            if img.dtype == np.uint8:
                gray = gray / 255.0
            f = gray.shape[0] // n
            small = gray[: n * f, : n * f].reshape(n, f, n, f).mean(axis=(1, 3))
            rows.append(small.ravel())
    return np.asarray(rows)


def encode_clip(clip, net: RegressorParams, w=None):
    """Clip to feature vectors: (visual_feat d, audio_feat d or None).

    `w` substitutes a live weight dict (used during training); by default
    the stored numpy weights are used and the result is deterministic.
    """
    cfg = net.cfg
    if w is None:
        w = net.weights
    if clip.T != cfg.T:
        raise ValueError("config error: clip length")
    raw = _visual_inputs(clip, cfg)
    per_frame = _encoder3(raw, w, "enc")  # (T, d)
    binfo = np.zeros((clip.T, BBOX_PAD))
    for t in range(clip.T):
        binfo[t, :3] = cm.bbox_info(clip.bboxes[t])
    x = tp.concatenate([per_frame, binfo], axis=1)
    vf = _rms_norm(_temporal_block(x, w, cfg))

    af = None
    if clip.audio_window is not None:
        aw = np.asarray(clip.audio_window, dtype=np.float64)
        if aw.shape != (cfg.audio_bins, cfg.audio_frames):
            raise ValueError("config error: audio_dim")
        af = _rms_norm(tp.reshape(_encoder3(_norm_audio(aw).reshape(1, -1), w, "aud"), (-1,)))
    return vf, af


def ief_regress(visual_feat, pose_feat, net: RegressorParams, n_iter=3, w=None):
    """Iterative error feedback from the mean parameters.

    Shape and camera iterate against the visual features; the joint pose
    iterates against pose_feat (which is what the variants swap out).
    Returns (beta, cam_params (T,3) as (log s, px, py), theta_joints flat).
    """
    cfg = net.cfg
    if w is None:
        w = net.weights
    S, T, J = net.n_shape, cfg.T, net.n_joints
    beta = np.zeros(S)
    camp = np.tile(np.array([np.log(MEAN_CAM_S), 0.0, 0.0]), (T, 1)).ravel()
    theta = np.tile(net.pose_prior_mean, T)
    for _ in range(int(n_iter)):
        sc_in = tp.concatenate([visual_feat, beta, camp])
        delta = _vecmat(sc_in, w["psi"]) + w["psi_b"]
        beta = beta + delta[:S]
        camp = camp + delta[S:]
        po_in = tp.concatenate([pose_feat, theta])
        theta = theta + (_vecmat(po_in, w["phi"]) + w["phi_b"])
    return beta, tp.reshape(camp, (T, 3)), theta


def _global_head(visual_feat, net, w):
    T = net.cfg.T
    return tp.reshape(_vecmat(visual_feat, w["glob"]) + w["glob_b"], (T, 3))


def _fused_features(vf, af, w):
    # two FC layers with a ReLU between; the output stays linear so fused
    # features keep full sign range like the branch features they replace
    x = tp.concatenate([vf, af])
    h = _relu(_vecmat(x, w["fus1"]) + w["fus1_b"])
    return _rms_norm(_vecmat(h, w["fus2"]) + w["fus2_b"])


def _cam_weak_from_params(camp):
    s = tp.exp(camp[:, 0:1])
    return tp.concatenate([s, camp[:, 1:]], axis=1)


def forward(clip, net: RegressorParams, n_iter=3, w=None):
    """Run one clip through the network; returns a Prediction.

    Raw (Var-friendly) pieces are available via _forward_parts during
    training; this entry point returns plain numpy in a PoseState.
    """
    parts = _forward_parts(clip, net, n_iter=n_iter, w=w)
    T, J = net.cfg.T, net.n_joints
    pose = md.PoseState(
        beta=np.asarray(tp.value(parts["beta"])),
        theta_global=np.asarray(tp.value(parts["theta_global"])),
        theta_joints=np.asarray(tp.value(parts["theta_joints"])).reshape(T, J - 1, 3),
        cam_weak=np.asarray(tp.value(parts["cam_weak"])),
    )
    tja = parts["theta_joints_audio"]
    if tja is not None:
        tja = np.asarray(tp.value(tja)).reshape(T, J - 1, 3)
    return Prediction(pose=pose, theta_joints_audio=tja)


def _forward_parts(clip, net: RegressorParams, n_iter=3, w=None):
    """Variant-dispatched forward pass keeping everything on the tape."""
    if net.variant not in VARIANTS:
        raise ValueError("config error: unknown variant")
    vf, af = encode_clip(clip, net, w=w)
    if w is None:
        w = net.weights
    if net.variant == "early_fusion":
        if af is None:
            raise ValueError("audio required")
        pose_feat = _fused_features(vf, af, w)
    else:
        pose_feat = vf
    beta, camp, theta = ief_regress(vf, pose_feat, net, n_iter=n_iter, w=w)
    theta_audio = None
    if net.variant == "model_fusion" and af is not None:
        _, _, theta_audio = ief_regress(vf, af, net, n_iter=n_iter, w=w)
    return {
        "beta": beta,
        "theta_global": _global_head(vf, net, w),
        "theta_joints": theta,
        "theta_joints_audio": theta_audio,
        "cam_weak": _cam_weak_from_params(camp),
    }


def _pack_spec(net):
    spec = _net_spec(net.cfg, net.n_shape, net.n_joints, net.variant)
    sizes = [int(np.prod(s)) for _, s, _ in spec]
    return spec, sizes


def _pack(net):
    spec, _ = _pack_spec(net)
    return np.concatenate([net.weights[n].ravel() for n, _, _ in spec])


def _unpack(x, net):
    spec, sizes = _pack_spec(net)
    out = {}
    off = 0
    for (name, shape, _), n in zip(spec, sizes):
        out[name] = tp.reshape(x[off : off + n], shape)
        off += n
    return out


def _clip_losses(clip, model, weights, parts, sil_res=0):
    """Loss terms for one clip's forward parts; returns dict of Vars."""
    T, J = clip.T, model.n_joints
    cam_weak = parts["cam_weak"]
    cams = cm.cameras_from_weak(cam_weak, clip.bboxes)
    tg = parts["theta_global"]
    tj = tp.reshape(parts["theta_joints"], (T, J - 1, 3))
    posed = md.pose_sequence(model, parts["beta"], tg, tj)
    kp3d = md.regress_keypoints3d(posed, model)
    pred2d = tp.stack([cm.project_full(kp3d[t], cams, t) for t in range(T)], axis=0)
    l_kp = ls.keypoint_loss(pred2d, clip.keypoints2d, clip.conf, weights.w_kp)

    l_sil = 0.0
    valid = np.array(
        [bool(v) and clip.masks[t] is not None for t, v in enumerate(clip.sil_valid)]
    )
    if weights.w_sil > 0 and sil_res > 0 and valid.any():
        gt_small = [rd.downsample_mask(clip.masks[t], sil_res) if valid[t] else None
                    for t in range(T)]
        pred_masks = [
            rd.rasterize_soft(posed[t], model.faces, cams, t, res=sil_res)
            if valid[t] else None
            for t in range(T)
        ]
        l_sil = ls.silhouette_loss(pred_masks, gt_small, weights.w_sil, valid=valid)

    l_smooth = (
        ls.smoothness_loss(tp.reshape(tp.rodrigues(tj), (T, (J - 1) * 9)),
                           weights.w_smooth_joints)
        + ls.smoothness_loss(tp.reshape(tp.rodrigues(tg), (T, 9)),
                             weights.w_smooth_global)
        + ls.smoothness_loss(cams.gamma_full, weights.w_smooth_gamma)
    )
    l_prior = None
    for t in range(T):
        p = ls.prior_loss(parts["beta"], tj[t], model,
                          weights.w_beta_prior, weights.w_theta_prior)
        l_prior = p if l_prior is None else l_prior + p
    l_prior = l_prior * (1.0 / T)

    out = {"l_kp": l_kp, "l_sil": l_sil, "l_smooth": l_smooth, "l_prior": l_prior}

    if parts["theta_joints_audio"] is not None:
        # the audio-estimated pose gets the same pose-dependent losses at
        # equal weight, sharing the visual branch's shape and camera
        tja = tp.reshape(parts["theta_joints_audio"], (T, J - 1, 3))
        posed_a = md.pose_sequence(model, parts["beta"], tg, tja)
        kp3d_a = md.regress_keypoints3d(posed_a, model)
        pred2d_a = tp.stack(
            [cm.project_full(kp3d_a[t], cams, t) for t in range(T)], axis=0
        )
        l_kp_a = ls.keypoint_loss(pred2d_a, clip.keypoints2d, clip.conf, weights.w_kp)
        l_smooth_a = ls.smoothness_loss(
            tp.reshape(tp.rodrigues(tja), (T, (J - 1) * 9)), weights.w_smooth_joints
        )
        l_prior_a = None
        for t in range(T):
            p = ls.prior_loss(parts["beta"], tja[t], model, 0.0, weights.w_theta_prior)
            l_prior_a = p if l_prior_a is None else l_prior_a + p
        out["l_kp"] = out["l_kp"] + l_kp_a
        out["l_smooth"] = out["l_smooth"] + l_smooth_a
        out["l_prior"] = out["l_prior"] + l_prior_a * (1.0 / T)
    return out


def _encode_batch(clips, net: RegressorParams, w):
    """Vectorized encode over N clips: (N, d) visual, (N, d) audio or None.

    Clips lacking audio contribute no audio row; the second return value is
    (audio_feat (M, d), indices of the M clips with audio).
    """
    cfg = net.cfg
    N, T = len(clips), cfg.T
    raw = np.stack([_visual_inputs(c, cfg) for c in clips])  # (N, T, vin)
    flat = _encoder3(raw.reshape(N * T, cfg.visual_dim), w, "enc")
    per_frame = tp.reshape(flat, (N, T, cfg.d))
    binfo = np.zeros((N, T, BBOX_PAD))
    for i, c in enumerate(clips):
        for t in range(T):
            binfo[i, t, :3] = cm.bbox_info(c.bboxes[t])
    x = tp.concatenate([per_frame, binfo], axis=2)  # (N, T, C)

    h = x
    if cfg.group_norm:
        h = _group_norm_nd(h, w["gn1_g"], w["gn1_b"])
    h = _relu(_conv1d_batch(h, w["conv1"], w["conv1_b"], T))
    if cfg.group_norm:
        h = _group_norm_nd(h, w["gn2_g"], w["gn2_b"])
    h = _conv1d_batch(h, w["conv2"], w["conv2_b"], T)
    h = h + x
    pooled = tp.mean(h, axis=1)  # (N, C)
    vf = _rms_norm(tp.matmul(pooled, w["post"]) + w["post_b"])

    aud_idx = [i for i, c in enumerate(clips) if c.audio_window is not None]
    af = None
    if aud_idx:
        aws = []
        for i in aud_idx:
            aw = np.asarray(clips[i].audio_window, dtype=np.float64)
            if aw.shape != (cfg.audio_bins, cfg.audio_frames):
                raise ValueError("config error: audio_dim")
            aws.append(_norm_audio(aw).ravel())
        af = _rms_norm(_encoder3(np.stack(aws), w, "aud"))
    return vf, af, aud_idx


def _conv1d_batch(x, kernel, bias, T):
    """Temporal convolution with zero padding; x (N, T, C) -> (N, T, C)."""
    k = tp.value(kernel).shape[0]
    pad = (k - 1) // 2
    rows = []
    for t in range(T):
        acc = bias
        for j in range(k):
            idx = t + j - pad
            if 0 <= idx < T:
                acc = acc + tp.matmul(x[:, idx, :], kernel[j])
        rows.append(acc)
    return tp.stack(rows, axis=1)


def _group_norm_nd(x, gamma, beta, groups=32, eps=1e-5):
    N, T, C = tp.value(x).shape
    g = x.reshape(N, T, groups, C // groups)
    mu = tp.mean(g, axis=3, keepdims=True)
    var = tp.mean((g - mu) * (g - mu), axis=3, keepdims=True)
    normed = (g - mu) / tp.sqrt(var + eps)
    return normed.reshape(N, T, C) * gamma + beta


def _ief_batch(visual_feat, pose_feat, net: RegressorParams, n_iter, w):
    """ief_regress vectorized over the leading clip axis."""
    cfg = net.cfg
    S, T = net.n_shape, cfg.T
    N = tp.value(visual_feat).shape[0]
    beta = np.zeros((N, S))
    camp = np.tile(np.array([np.log(MEAN_CAM_S), 0.0, 0.0]), (N, T, 1)).reshape(N, -1)
    theta = np.tile(net.pose_prior_mean, (N, T))
    for _ in range(int(n_iter)):
        sc_in = tp.concatenate([visual_feat, beta, camp], axis=1)
        delta = tp.matmul(sc_in, w["psi"]) + w["psi_b"]
        beta = beta + delta[:, :S]
        camp = camp + delta[:, S:]
        po_in = tp.concatenate([pose_feat, theta], axis=1)
        theta = theta + (tp.matmul(po_in, w["phi"]) + w["phi_b"])
    return beta, tp.reshape(camp, (N, T, 3)), theta


def _batched_kp3d(model: md.MeshModel, beta, tg, tj):
    """Posed 3D keypoints for a batch: beta (N,S), tg (N,T,3), tj (N,T,J-1,3).

    Same math as pose_sequence / regress_keypoints3d with a leading clip
    axis; returns (N, T, K, 3).
    """
    N, T = tp.value(tg).shape[:2]
    J = model.n_joints
    V = model.n_vertices
    # shaped vertices per clip: template + shape_dirs . beta
    dirs = model.shape_dirs.reshape(V * 3, model.n_shape)
    offset = tp.reshape(tp.transpose(tp.matmul(dirs, tp.transpose(beta))), (N, V, 3))
    shaped = model.template + offset  # (N, V, 3)
    joints = tp.matmul(model.joint_regressor, shaped)  # (N, J, 3)

    rots = tp.concatenate([tp.reshape(tg, (N, T, 1, 3)), tj], axis=2)
    R = tp.rodrigues(rots)  # (N, T, J, 3, 3)

    order = md.topo_order(model.kinematic_tree)
    Rw = [None] * J
    tw = [None] * J
    for j in order:
        Rj = R[:, :, j]
        p = int(model.kinematic_tree[j])
        if p < 0:
            Rw[j] = Rj
            tw[j] = tp.reshape(joints[:, j], (N, 1, 3)) + np.zeros((1, T, 3))
        else:
            Rw[j] = tp.matmul(Rw[p], Rj)
            off = tp.reshape(joints[:, j] - joints[:, p], (N, 1, 3, 1))
            tw[j] = tp.reshape(tp.matmul(Rw[p], off), (N, T, 3)) + tw[p]

    # fold the keypoint regression into the skinning sum: with
    # A_j = KM * w_j (row-scaled regressor) the keypoints are
    #   sum_j (A_j shaped) Rw_j^T + (A_j 1) (tw_j - Rw_j joints_j),
    # so the per-joint work happens at K points instead of V vertices
    km = model.keypoint_matrix()
    kp = None
    for j in range(J):
        col = model.skin_weights[:, j]
        if not col.any():
            continue
        a = km * col  # (K, V)
        base = tp.reshape(tp.matmul(a, shaped), (N, 1, -1, 3))
        rot = tp.matmul(base, tp.mT(Rw[j]))  # (N, T, K, 3)
        pivot = tp.reshape(
            tp.matmul(Rw[j], tp.reshape(joints[:, j], (N, 1, 3, 1))), (N, T, 1, 3)
        )
        trans = tp.reshape(tw[j], (N, T, 1, 3))
        term = rot + a.sum(axis=1).reshape(1, 1, -1, 1) * (trans - pivot)
        kp = term if kp is None else kp + term
    return kp  # (N, T, K, 3)


def _batched_gamma_full(cam_weak, clips):
    """Full-frame translations (N, T, 3) from batched weak cameras."""
    N, T = tp.value(cam_weak).shape[:2]
    cx = np.array([[bb.cx for bb in c.bboxes] for c in clips])
    cy = np.array([[bb.cy for bb in c.bboxes] for c in clips])
    b = np.array([[bb.b for bb in c.bboxes] for c in clips])
    f = cm.focal_full(clips[0].bboxes[0].frame_w, clips[0].bboxes[0].frame_h)
    s = cam_weak[:, :, 0]
    inv = 2.0 / (b * s)
    return tp.stack(
        [cam_weak[:, :, 1] + cx * inv, cam_weak[:, :, 2] + cy * inv, f * inv],
        axis=-1,
    ), f


def _batched_kp_loss(kp3d, gamma_full, f_full, clips, weights):
    """Mean over clips of the per-clip keypoint loss."""
    N, T = tp.value(kp3d).shape[:2]
    gt = np.stack([c.keypoints2d for c in clips])  # (N, T, K, 2)
    lam2 = np.stack([c.conf for c in clips]) ** 2  # (N, T, K)
    denom = lam2.reshape(N, -1).sum(axis=1)
    if (denom <= 0).any():
        raise ValueError("no supervision")
    p = kp3d + tp.reshape(gamma_full, (N, T, 1, 3))
    z = tp.value(p)[..., 2]
    if (z <= 0).any():
        raise ValueError("behind camera")
    pred = f_full * p[..., :2] / p[..., 2:3]
    d2 = ((pred - gt) ** 2).sum(axis=-1)
    rho = ls.geman_mcclure_sq(d2, 50.0)
    per_clip = (rho * lam2).reshape(N, -1).sum(axis=1) / denom
    return weights.w_kp * per_clip.mean()


def _batched_smooth(chi, w):
    """Mean over clips of smoothness_loss on (N, T, D) sequences."""
    N, T = tp.value(chi).shape[:2]
    d2 = chi[:, 2:] - 2.0 * chi[:, 1:-1] + chi[:, :-2]
    per_clip = (d2 * d2).reshape(N, -1).sum(axis=1)
    return (w / (T * (T - 2))) * per_clip.mean()


def _batched_prior(beta, tj_flat, model, w_beta, w_theta):
    """Mean over clips of the frame-averaged prior loss.

    beta (N, S); tj_flat (N, T, (J-1)*3).
    """
    N, T = tp.value(tj_flat).shape[:2]
    for cov in (model.shape_cov, model.pose_prior_cov):
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("invalid prior") from None
    out = 0.0
    if w_beta:
        yb = beta - model.shape_mean
        zb = tp.matmul(yb, np.linalg.inv(model.shape_cov))
        out = out + w_beta * (zb * yb).sum(axis=1).mean()
    if w_theta:
        D = tp.value(tj_flat).shape[2]
        yt = tp.reshape(tj_flat, (N * T, D)) - model.pose_prior_mean
        zt = tp.matmul(yt, np.linalg.inv(model.pose_prior_cov))
        per_frame = (zt * yt).sum(axis=1)
        out = out + w_theta * tp.reshape(per_frame, (N, T)).sum(axis=1).mean() / T
    return out


def _batched_losses(clips, model, weights, net, n_iter, w):
    """Forward and loss for the whole batch in one graph; returns term dict.

    Equivalent to averaging _clip_losses over the batch (silhouette term
    excluded; the training entry point falls back to the per-clip path when
    silhouettes are requested).
    """
    N = len(clips)
    T, J = net.cfg.T, net.n_joints
    vf, af, aud_idx = _encode_batch(clips, net, w)
    if net.variant == "early_fusion":
        if len(aud_idx) != N:
            raise ValueError("audio required")
        x = tp.concatenate([vf, af], axis=1)
        h = _relu(tp.matmul(x, w["fus1"]) + w["fus1_b"])
        pose_feat = _rms_norm(tp.matmul(h, w["fus2"]) + w["fus2_b"])
    else:
        pose_feat = vf
    beta, camp, theta = _ief_batch(vf, pose_feat, net, n_iter, w)
    cam_weak = tp.concatenate([tp.exp(camp[:, :, 0:1]), camp[:, :, 1:]], axis=2)
    tg = tp.reshape(tp.matmul(vf, w["glob"]) + w["glob_b"], (N, T, 3))
    tj = tp.reshape(theta, (N, T, J - 1, 3))

    gamma_full, f_full = _batched_gamma_full(cam_weak, clips)
    kp3d = _batched_kp3d(model, beta, tg, tj)
    l_kp = _batched_kp_loss(kp3d, gamma_full, f_full, clips, weights)

    chi_j = tp.reshape(tp.rodrigues(tj), (N, T, (J - 1) * 9))
    chi_g = tp.reshape(tp.rodrigues(tg), (N, T, 9))
    l_smooth = (
        _batched_smooth(chi_j, weights.w_smooth_joints)
        + _batched_smooth(chi_g, weights.w_smooth_global)
        + _batched_smooth(gamma_full, weights.w_smooth_gamma)
    )
    l_prior = _batched_prior(
        beta, tp.reshape(theta, (N, T, (J - 1) * 3)), model,
        weights.w_beta_prior, weights.w_theta_prior,
    )

    if net.variant == "model_fusion" and aud_idx:
        # audio-branch pose set: same losses at equal weight, scaled by the
        # audio-carrying fraction so the sum matches the per-clip average
        sub = [clips[i] for i in aud_idx]
        frac = len(aud_idx) / N
        vf_a = vf[aud_idx] if len(aud_idx) < N else vf
        _, _, theta_a = _ief_batch(vf_a, af, net, n_iter, w)
        tja = tp.reshape(theta_a, (len(sub), T, J - 1, 3))
        beta_a = beta[aud_idx] if len(aud_idx) < N else beta
        tg_a = tg[aud_idx] if len(aud_idx) < N else tg
        gam_a = gamma_full[aud_idx] if len(aud_idx) < N else gamma_full
        kp3d_a = _batched_kp3d(model, beta_a, tg_a, tja)
        l_kp = l_kp + frac * _batched_kp_loss(kp3d_a, gam_a, f_full, sub, weights)
        chi_a = tp.reshape(tp.rodrigues(tja), (len(sub), T, (J - 1) * 9))
        l_smooth = l_smooth + frac * _batched_smooth(chi_a, weights.w_smooth_joints)
        l_prior = l_prior + frac * _batched_prior(
            beta_a, tp.reshape(theta_a, (len(sub), T, (J - 1) * 3)), model,
            0.0, weights.w_theta_prior,
        )
    return {"l_kp": l_kp, "l_sil": 0.0, "l_smooth": l_smooth, "l_prior": l_prior}


def train(dataset, model: md.MeshModel, variant, weights, epochs, seed=0,
          lr=TRAIN_LR, n_iter=3, cfg=None, sil_res=0):
    """Full-batch Adam training; returns (RegressorParams, trace).

    Deterministic for a fixed seed: initialization, clip order, and every
    update are seed- and order-fixed. The trace holds one LossReport per
    epoch, evaluated before that epoch's update. With sil_res == 0 (the
    default) the whole batch runs as one vectorized graph; a positive
    sil_res switches to the slower per-clip path with silhouette terms.
    """
    clips = list(dataset)
    if not clips:
        raise ValueError("no supervision")
    net = init_net(model, variant, seed=seed, cfg=cfg)
    if variant == "early_fusion" and any(c.audio_window is None for c in clips):
        raise ValueError("audio required")
    frames_equal = len({(c.bboxes[0].frame_w, c.bboxes[0].frame_h) for c in clips}) == 1
    batched = sil_res == 0 and frames_equal
    n = float(len(clips))

    def build_loss(w):
        if batched:
            return _batched_losses(clips, model, weights, net, n_iter, w)
        tot = {"l_kp": 0.0, "l_sil": 0.0, "l_smooth": 0.0, "l_prior": 0.0}
        for clip in clips:
            parts = _forward_parts(clip, net, n_iter=n_iter, w=w)
            terms = _clip_losses(clip, model, weights, parts, sil_res=sil_res)
            for k in tot:
                tot[k] = tot[k] + terms[k] * (1.0 / n)
        return tot

    state = tp.OptimizerState(lr=lr)
    wnp = net.weights
    trace = []
    for e in range(int(epochs)):
        tape = tp.Tape()
        wv = {k: tape.var(v) for k, v in wnp.items()}
        terms = build_loss(wv)
        total = terms["l_kp"] + terms["l_sil"] + terms["l_smooth"] + terms["l_prior"]
        val = float(tp.value(total))
        tape.backward(total)
        grads = {k: v.grad for k, v in wv.items() if v.grad is not None}
        if not np.isfinite(val) or any(
            not np.isfinite(g).all() for g in grads.values()
        ):
            raise ValueError(f"diverged at epoch {e}")
        trace.append(ls.total_loss(
            float(tp.value(terms["l_kp"])), float(tp.value(terms["l_sil"])),
            float(tp.value(terms["l_smooth"])), float(tp.value(terms["l_prior"])),
        ))
        tp.adam_step(state, wnp, grads)
    if any(not np.isfinite(v).all() for v in wnp.values()):
        raise ValueError(f"diverged at epoch {int(epochs) - 1}")
    net.weights = wnp
    return net, trace


def infer_sequence(clips, net: RegressorParams, model: md.MeshModel, n_iter=3):
    """Middle-frame stitching over overlapping windows.

    clips must be consecutive stride-1 windows of one sequence (sorted by
    t0). Returns a dict with the covered frame indices and, per covered
    frame, the pose pieces and regressed 3D keypoints from the window whose
    middle lands on that frame.
    """
    mid = net.cfg.T // 2
    order = sorted(range(len(clips)), key=lambda i: clips[i].t0)
    frames, kp3d, tg, tj, cw, betas = [], [], [], [], [], []
    for i in order:
        clip = clips[i]
        pred = forward(clip, net, n_iter=n_iter)
        pose = pred.pose
        posed = md.pose_sequence(model, pose.beta,
                                 pose.theta_global, pose.theta_joints)
        k3 = np.asarray(tp.value(md.regress_keypoints3d(posed, model)))
        frames.append(clip.t0 + mid)
        kp3d.append(k3[mid])
        tg.append(pose.theta_global[mid])
        tj.append(pose.theta_joints[mid])
        cw.append(pose.cam_weak[mid])
        betas.append(pose.beta)
    return {
        "frames": np.asarray(frames, dtype=int),
        "keypoints3d": np.asarray(kp3d),
        "theta_global": np.asarray(tg),
        "theta_joints": np.asarray(tj),
        "cam_weak": np.asarray(cw),
        "beta": np.mean(np.asarray(betas), axis=0),
    }


def save_net(path, net: RegressorParams):
    """Serialize trained weights to JSON."""
    doc = {
        "format": NET_FORMAT,
        "variant": net.variant,
        "cfg": asdict(net.cfg),
        "n_shape": net.n_shape,
        "n_joints": net.n_joints,
        "pose_prior_mean": net.pose_prior_mean.tolist(),
        "weights": {k: v.tolist() for k, v in net.weights.items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_net(path) -> RegressorParams:
    try:
        with open(path) as fh:
            doc = json.load(fh)
        if doc["format"] != NET_FORMAT:
            raise ValueError
        cfg_d = dict(doc["cfg"])
        cfg_d["hidden"] = tuple(cfg_d["hidden"])
        net = RegressorParams(
            variant=doc["variant"],
            cfg=EncoderConfig(**cfg_d),
            n_shape=int(doc["n_shape"]),
            n_joints=int(doc["n_joints"]),
            pose_prior_mean=np.asarray(doc["pose_prior_mean"], dtype=np.float64),
            weights={k: np.asarray(v, dtype=np.float64)
                     for k, v in doc["weights"].items()},
        )
        if net.variant not in VARIANTS:
            raise ValueError
        for name, shape, _ in _net_spec(net.cfg, net.n_shape, net.n_joints,
                                        net.variant):
            if net.weights[name].shape != shape:
                raise ValueError
        return net
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise ValueError("malformed model") from None
