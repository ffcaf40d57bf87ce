"""Dataset records, bbox fusion, crops, augmentation, and the synthetic gait generator.

The on-disk layout is one directory per sequence:

    frames/000000.ppm ...   full frames (P6)
    masks/000000.pgm ...    crop-frame hard silhouettes (P5, 224x224)
    keypoints.csv           frame,k,x,y,conf   (full-frame pixels)
    bboxes.csv              frame,cx,cy,b
    keypoints3d.csv         frame,k,x,y,z      (model units, optional)
    gt_pose.json            ground-truth parameters (optional)
    audio.wav               float32 mono (optional)
    meta.json               fps, frame size, counts, tags

Clips are sliding windows of T frames with 1-frame stride over a sequence.
"""

from __future__ import annotations

import csv
import json
import os
import shutil
from dataclasses import dataclass, field, replace

import numpy as np

from . import audio as au
from . import camera as cm
from . import model as md
from . import render as rd
from . import toy

CROP_RES = cm.CROP_RES


# ---------------------------------------------------------------------------
# records


@dataclass
class ClipRecord:
    """T frames of crops, boxes, keypoints, silhouettes, and an audio window."""

    crops: list  # T entries: (224,224,3) float arrays in [0,1], or file paths
    bboxes: list  # T BBox
    keypoints2d: np.ndarray  # (T,K,2) full-frame pixels
    conf: np.ndarray  # (T,K) in [0,1]
    masks: list  # T of Mask (crop frame) or None
    sil_valid: np.ndarray  # (T,) bool
    audio_window: np.ndarray = None  # (n_mels, W) log-mel or None
    fps: float = 25.0
    frame_w: float = 640.0
    frame_h: float = 360.0
    kp_regions: list = None  # K region tags
    gt_pose: md.PoseState = None
    gt_keypoints3d: np.ndarray = None  # (T,K,3)
    input_conf: np.ndarray = None  # (T,K) gating for network inputs, or None
    clip_id: str = ""
    t0: int = 0

    def __post_init__(self):
        T = len(self.bboxes)
        self.keypoints2d = np.asarray(self.keypoints2d, dtype=np.float64)
        self.conf = np.asarray(self.conf, dtype=np.float64)
        self.sil_valid = np.asarray(self.sil_valid, dtype=bool)
        if (
            len(self.crops) != T
            or len(self.masks) != T
            or self.keypoints2d.shape[0] != T
            or self.conf.shape != self.keypoints2d.shape[:2]
            or self.sil_valid.shape != (T,)
        ):
            raise ValueError("invalid frame: clip field lengths disagree")
        if (self.conf < 0).any() or (self.conf > 1).any():
            raise ValueError("invalid frame: confidence outside [0,1]")
        if self.input_conf is not None:
            self.input_conf = np.asarray(self.input_conf, dtype=np.float64)
            if self.input_conf.shape != self.conf.shape:
                raise ValueError("invalid frame: clip field lengths disagree")

    @property
    def T(self):
        return len(self.bboxes)

    @property
    def K(self):
        return self.keypoints2d.shape[1]

    def crop_array(self, t):
        """Materialize frame t's crop as a (224,224,3) array."""
        c = self.crops[t]
        if isinstance(c, np.ndarray):
            return c
        frame = load_ppm(c)
        crop, _, _ = crop_resize(frame, self.bboxes[t], CROP_RES)
        return crop

    def copy(self):
        return replace(
            self,
            crops=list(self.crops),
            bboxes=list(self.bboxes),
            keypoints2d=self.keypoints2d.copy(),
            conf=self.conf.copy(),
            masks=list(self.masks),
            sil_valid=self.sil_valid.copy(),
            audio_window=None if self.audio_window is None else self.audio_window.copy(),
            kp_regions=None if self.kp_regions is None else list(self.kp_regions),
            gt_pose=None if self.gt_pose is None else self.gt_pose.copy(),
            gt_keypoints3d=None if self.gt_keypoints3d is None else self.gt_keypoints3d.copy(),
            input_conf=None if self.input_conf is None else self.input_conf.copy(),
        )


@dataclass(frozen=True)
class OccluderSpec:
    kind: str = "patch-from-image"  # or "synthetic-human-box"
    anchor: str = None  # body-region tag prefix, e.g. "head", "leg"
    frac: float = 0.4  # occluder area as a fraction of the bbox area
    seed: int = 0
    # inputs_only: hide covered keypoints from network inputs but keep their
    # label confidences, for training-time occlusion augmentation
    inputs_only: bool = False

    def __post_init__(self):
        if self.kind not in ("patch-from-image", "synthetic-human-box"):
            raise ValueError("config error: unknown occluder kind")
        if not (0.0 < self.frac <= 1.0):
            raise ValueError("config error: occluder fraction outside (0,1]")


# ---------------------------------------------------------------------------
# bbox fusion and crops

FUSE_GAMMA = 2.78


def fuse_bbox(g_kp: cm.BBox, g_sil: cm.BBox) -> cm.BBox:
    """Combine keypoint- and silhouette-derived boxes.

    Disjoint boxes or area ratio above the threshold fall back to the
    keypoint box; otherwise the union rectangle, squared by its longer side.
    """
    if g_kp.b <= 0 or g_sil.b <= 0:
        raise ValueError("degenerate bbox")
    if (g_kp.frame_w, g_kp.frame_h) != (g_sil.frame_w, g_sil.frame_h):
        raise ValueError("invalid frame")
    ax0, ay0 = g_kp.corner()
    bx0, by0 = g_sil.corner()
    ix = max(0.0, min(ax0 + g_kp.b, bx0 + g_sil.b) - max(ax0, bx0))
    iy = max(0.0, min(ay0 + g_kp.b, by0 + g_sil.b) - max(ay0, by0))
    inter = ix * iy
    m_kp = g_kp.b * g_kp.b
    m_sil = g_sil.b * g_sil.b
    iou = inter / (m_kp + m_sil - inter)
    if iou == 0.0:
        return g_kp
    if m_kp / m_sil > FUSE_GAMMA:
        return g_kp
    x0 = min(ax0, bx0)
    y0 = min(ay0, by0)
    x1 = max(ax0 + g_kp.b, bx0 + g_sil.b)
    y1 = max(ay0 + g_kp.b, by0 + g_sil.b)
    side = max(x1 - x0, y1 - y0)
    return cm.BBox(
        cx=0.5 * (x0 + x1),
        cy=0.5 * (y0 + y1),
        b=side,
        frame_w=g_kp.frame_w,
        frame_h=g_kp.frame_h,
    )


@dataclass(frozen=True)
class CropMaps:
    """Affine pixel maps between a bbox crop and the full frame."""

    bbox: cm.BBox
    r: int = CROP_RES

    def to_full(self, pts):
        return cm.crop_to_full(np.asarray(pts, dtype=np.float64) * (CROP_RES / self.r), self.bbox)

    def to_crop(self, pts):
        return cm.full_to_crop(np.asarray(pts, dtype=np.float64), self.bbox) * (self.r / CROP_RES)


def crop_resize(frame, bbox: cm.BBox, r=CROP_RES):
    """Square crop around the bbox resampled to r x r (nearest neighbor).

    Returns (crop, maps, clamped); `clamped` flags boxes extending past the
    frame, whose out-of-frame samples are zero-padded.
    """
    frame = np.asarray(frame, dtype=np.float64)
    h, w = frame.shape[:2]
    x0, y0 = bbox.corner()
    u = (np.arange(r) + 0.5) * (bbox.b / r)
    xs = np.floor(x0 + u).astype(np.int64)
    ys = np.floor(y0 + u).astype(np.int64)
    ok_x = (xs >= 0) & (xs < w)
    ok_y = (ys >= 0) & (ys < h)
    clamped = not (ok_x.all() and ok_y.all())
    xs_c = np.clip(xs, 0, w - 1)
    ys_c = np.clip(ys, 0, h - 1)
    crop = frame[np.ix_(ys_c, xs_c)].astype(np.float64)
    if clamped:
        crop[~ok_y, :] = 0.0
        crop[:, ~ok_x] = 0.0
    return crop, CropMaps(bbox=bbox, r=r), clamped


# ---------------------------------------------------------------------------
# augmentation


def _occluder_rect(clip: ClipRecord, spec: OccluderSpec, rng):
    """Occluder rectangle in crop pixels: (x0, y0, x1, y1) per clip."""
    side = np.sqrt(spec.frac) * CROP_RES
    if spec.anchor is not None:
        if clip.kp_regions is None:
            raise ValueError("config error: anchored occluder needs keypoint regions")
        sel = [k for k, tag in enumerate(clip.kp_regions) if tag.startswith(spec.anchor)]
        if not sel:
            raise ValueError(f"config error: no keypoints in region {spec.anchor}")
        pts = []
        for t in range(clip.T):
            pts.append(cm.full_to_crop(clip.keypoints2d[t, sel], clip.bboxes[t]))
        pts = np.concatenate(pts, axis=0)
        cx, cy = pts.mean(axis=0)
        # grow to cover every anchored keypoint with a small margin
        margin = 6.0
        x0 = min(cx - side / 2, pts[:, 0].min() - margin)
        x1 = max(cx + side / 2, pts[:, 0].max() + margin)
        y0 = min(cy - side / 2, pts[:, 1].min() - margin)
        y1 = max(cy + side / 2, pts[:, 1].max() + margin)
    else:
        cx, cy = rng.uniform(0.25 * CROP_RES, 0.75 * CROP_RES, 2)
        x0, x1 = cx - side / 2, cx + side / 2
        y0, y1 = cy - side / 2, cy + side / 2
    x0 = max(0.0, x0)
    y0 = max(0.0, y0)
    x1 = min(float(CROP_RES), x1)
    y1 = min(float(CROP_RES), y1)
    return x0, y0, x1, y1


def apply_occluder(clip: ClipRecord, spec: OccluderSpec) -> ClipRecord:
    """Paint an occluder into the crops and zero covered keypoint confidences.

    Ground-truth masks, 3D labels, and keypoint positions stay untouched;
    only the pixels and the confidence channel change. Deterministic per
    spec.seed. With spec.inputs_only the confidences survive (so losses keep
    their supervision) and the zeros go to input_conf instead, which is what
    the regression networks gate their keypoint inputs with.
    """
    rng = np.random.default_rng(spec.seed)
    out = clip.copy()
    if spec.inputs_only and out.input_conf is None:
        out.input_conf = out.conf.copy()
    x0, y0, x1, y1 = _occluder_rect(clip, spec, rng)
    ix0, iy0 = int(np.floor(x0)), int(np.floor(y0))
    ix1, iy1 = int(np.ceil(x1)), int(np.ceil(y1))
    fill_noise = rng.normal(0.0, 0.02, (max(iy1 - iy0, 1), max(ix1 - ix0, 1), 3))
    for t in range(clip.T):
        img = clip.crop_array(t).copy()
        region = img[iy0:iy1, ix0:ix1]
        if spec.kind == "patch-from-image":
            src = img[0 : region.shape[0], 0 : region.shape[1]].copy()
            img[iy0:iy1, ix0:ix1] = src
        else:
            img[iy0:iy1, ix0:ix1] = np.clip(
                np.array([0.16, 0.16, 0.22]) + fill_noise[: region.shape[0], : region.shape[1]],
                0.0,
                1.0,
            )
        out.crops[t] = img
        kp_crop = cm.full_to_crop(clip.keypoints2d[t], clip.bboxes[t])
        covered = (
            (kp_crop[:, 0] >= x0)
            & (kp_crop[:, 0] < x1)
            & (kp_crop[:, 1] >= y0)
            & (kp_crop[:, 1] < y1)
        )
        if spec.inputs_only:
            out.input_conf[t, covered] = 0.0
        else:
            out.conf[t, covered] = 0.0
            if out.input_conf is not None:
                out.input_conf[t, covered] = 0.0
    return out


def occlude_sequence_dir(src, dst, spec: OccluderSpec):
    """Occlude a saved sequence directory into a new directory.

    The occluder rectangle is chosen once for the whole sequence (crop
    coordinates), painted into every full frame, and the covered keypoint
    confidences are zeroed in keypoints.csv. Everything else (masks, 3D
    labels, poses, audio, meta) is copied through unchanged.
    """
    with open(os.path.join(src, "meta.json")) as fh:
        meta = json.load(fh)
    n = int(meta["n_frames"])
    clip = load_sequence(src, T=n)[0]
    rng = np.random.default_rng(spec.seed)
    x0, y0, x1, y1 = _occluder_rect(clip, spec, rng)

    os.makedirs(os.path.join(dst, "frames"), exist_ok=True)
    os.makedirs(os.path.join(dst, "masks"), exist_ok=True)
    conf = clip.conf.copy()
    for t in range(n):
        bb = clip.bboxes[t]
        img = load_ppm(os.path.join(src, "frames", f"{t:06d}.ppm"))
        h, w = img.shape[:2]
        c0 = cm.crop_to_full(np.array([[x0, y0]]), bb)[0]
        c1 = cm.crop_to_full(np.array([[x1, y1]]), bb)[0]
        ix0 = max(0, int(np.floor(c0[0])))
        iy0 = max(0, int(np.floor(c0[1])))
        ix1 = min(w, int(np.ceil(c1[0])))
        iy1 = min(h, int(np.ceil(c1[1])))
        if ix1 > ix0 and iy1 > iy0:
            if spec.kind == "patch-from-image":
                img[iy0:iy1, ix0:ix1] = img[0 : iy1 - iy0, 0 : ix1 - ix0].copy()
            else:
                noise = rng.normal(0.0, 0.02, (iy1 - iy0, ix1 - ix0, 3))
                img[iy0:iy1, ix0:ix1] = np.clip(
                    np.array([0.16, 0.16, 0.22]) + noise, 0.0, 1.0
                )
        save_ppm(os.path.join(dst, "frames", f"{t:06d}.ppm"), img)
        shutil.copyfile(
            os.path.join(src, "masks", f"{t:06d}.pgm"),
            os.path.join(dst, "masks", f"{t:06d}.pgm"),
        )
        kp_crop = cm.full_to_crop(clip.keypoints2d[t], bb)
        covered = (
            (kp_crop[:, 0] >= x0)
            & (kp_crop[:, 0] < x1)
            & (kp_crop[:, 1] >= y0)
            & (kp_crop[:, 1] < y1)
        )
        conf[t, covered] = 0.0

    with open(os.path.join(dst, "keypoints.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame", "k", "x", "y", "conf"])
        for t in range(n):
            for k in range(clip.K):
                wr.writerow(
                    [t, k]
                    + [f"{x:.17g}" for x in clip.keypoints2d[t, k]]
                    + [f"{conf[t, k]:.17g}"]
                )
    for name in ("bboxes.csv", "keypoints3d.csv", "gt_pose.json", "audio.wav",
                 "meta.json"):
        path = os.path.join(src, name)
        if os.path.isfile(path):
            shutil.copyfile(path, os.path.join(dst, name))


def _apply_color(img, contrast, brightness, saturation, hue):
    """Contrast/brightness/saturation/hue on an RGB image in [0,1].

    Hue rotates the (B-Y, R-Y) chroma plane, so grayscale pixels are exact
    fixed points. Values are clipped once at the end.
    """
    x = np.asarray(img, dtype=np.float64)
    x = (x - 0.5) * contrast + 0.5
    x = x + brightness
    yl = 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]
    x = yl[..., None] + (x - yl[..., None]) * saturation
    u = x[..., 2] - yl
    v = x[..., 0] - yl
    cs, sn = np.cos(hue), np.sin(hue)
    u2 = cs * u - sn * v
    v2 = sn * u + cs * v
    r = yl + v2
    b = yl + u2
    g = (yl - 0.299 * r - 0.114 * b) / 0.587
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def jitter_keypoints(clip: ClipRecord, sigma, seed=0) -> ClipRecord:
    """Gaussian pixel noise on the 2D keypoints, mimicking detector error.

    Confidences, masks, and 3D labels stay untouched, so evaluation against
    gt_keypoints3d still measures true recovery. Deterministic per seed.
    """
    if sigma < 0:
        raise ValueError("config error: negative jitter")
    out = clip.copy()
    if sigma == 0.0:
        return out
    rng = np.random.default_rng(seed)
    out.keypoints2d = out.keypoints2d + rng.normal(0.0, sigma, out.keypoints2d.shape)
    return out


def color_jitter(clip: ClipRecord, strength, seed=0) -> ClipRecord:
    """Per-clip random contrast/brightness/saturation/hue; labels untouched."""
    if not (0.0 <= strength <= 1.0):
        raise ValueError("config error: jitter strength outside [0,1]")
    out = clip.copy()
    if strength == 0.0:
        return out
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.0, 1.0, 4)
    contrast = 1.0 + 0.4 * strength * u[0]
    brightness = 0.3 * strength * u[1]
    saturation = 1.0 + 0.4 * strength * u[2]
    hue = 0.35 * strength * u[3]
    for t in range(clip.T):
        out.crops[t] = _apply_color(clip.crop_array(t), contrast, brightness, saturation, hue)
    return out


# ---------------------------------------------------------------------------
# synthetic gait sequences

AUDIO_SR = 44100


def contact_frames_from_y(y):
    """Indices of local maxima of a y-down series: ground-contact frames."""
    y = np.asarray(y, dtype=np.float64)
    idx = []
    for t in range(1, len(y) - 1):
        if y[t] >= y[t - 1] and y[t] >= y[t + 1] and (y[t] > y[t - 1] or y[t] > y[t + 1]):
            idx.append(t)
    return np.array(idx, dtype=np.int64)


def _hoof_burst(rng, sr, dur=0.035, decay=0.008, lo=80.0, hi=2500.0):
    n = int(dur * sr)
    noise = rng.normal(0.0, 1.0, n)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    band = np.fft.irfft(spec, n)
    band /= max(np.abs(band).max(), 1e-9)
    env = np.exp(-np.arange(n) / (decay * sr))
    return band * env


def _synth_audio(kp3d, hoof_idx, n, fps):
    """Track with one band-limited burst per hoof ground contact.

    Burst waveforms are fixed per hoof, not drawn per clip: every strike of
    a given hoof sounds the same everywhere, so contact timing is the only
    clip-specific content and the track identifies which leg hit when.
    """
    n_samp = int(round(n / fps * AUDIO_SR))
    track = np.zeros(n_samp)
    for j, k in enumerate(hoof_idx):
        burst = _hoof_burst(np.random.default_rng(7000 + j), AUDIO_SR) * 0.5
        contacts = contact_frames_from_y(kp3d[:, k, 1])
        for f in contacts:
            s0 = int(round(f / fps * AUDIO_SR))
            s1 = min(s0 + len(burst), n_samp)
            track[s0:s1] += burst[: s1 - s0]
    return au.AudioTrack(np.clip(track, -1.0, 1.0), AUDIO_SR)


def _crop_image_from_mask(mask_values, rng_color, base, body):
    """Cheap shaded appearance: background gradient plus tinted body pixels."""
    r = mask_values.shape[0]
    gy = np.linspace(0.0, 0.12, r)[:, None]
    img = np.empty((r, r, 3))
    for c in range(3):
        img[..., c] = base[c] + gy
    shade = 0.75 + 0.25 * np.linspace(1.0, 0.0, r)[:, None]
    on = mask_values > 0.5
    for c in range(3):
        ch = img[..., c]
        ch[on] = body[c] * shade[np.nonzero(on)[0], 0]
    return np.clip(img, 0.0, 1.0)


@dataclass
class SynthSequence:
    """A full generated sequence before windowing into clips."""

    model_name: str
    gait: str
    fps: float
    frame_w: float
    frame_h: float
    seed: int
    beta: np.ndarray
    theta_global: np.ndarray  # (N,3)
    theta_joints: np.ndarray  # (N,J-1,3)
    cam_weak: np.ndarray  # (N,3)
    bboxes: list  # N BBox
    keypoints2d: np.ndarray  # (N,K,2)
    conf: np.ndarray  # (N,K)
    keypoints3d: np.ndarray  # (N,K,3)
    masks: list  # N Mask, 224 crop frame
    crops: list  # N arrays (224,224,3)
    track: au.AudioTrack
    kp_regions: list

    @property
    def n(self):
        return len(self.bboxes)


def synth_sequence(model: md.MeshModel, gait, n, fps=25.0, seed=0) -> SynthSequence:
    """Generate n frames of a synthetic gait with full ground truth."""
    if gait not in toy.GAITS:
        raise ValueError("config error: unknown gait")
    md.validate_model(model)
    rng = np.random.default_rng(seed)
    frame_w, frame_h = 640.0, 360.0

    beta = rng.normal(0.0, 0.25, model.n_shape)
    amp_scale = rng.uniform(0.85, 1.15)
    phase0 = rng.uniform(0.0, 2.0 * np.pi)
    freq = toy.gait_frequency(gait)
    yaw0 = rng.uniform(-0.25, 0.25)

    tt = np.arange(n) / fps
    theta_joints = np.stack(
        [toy.gait_joint_angles(gait, phase0 + 2.0 * np.pi * freq * t, amp_scale) for t in tt]
    )
    yaw = yaw0 + 0.06 * np.sin(np.pi * freq * tt)
    theta_global = np.stack([np.zeros(n), yaw, np.zeros(n)], axis=1)

    s = rng.uniform(0.78, 1.0)
    px, py = rng.uniform(-0.06, 0.06, 2)
    cam_weak = np.tile([s, px, py], (n, 1))

    b = rng.uniform(150.0, 190.0)
    drift = rng.uniform(-1.2, 1.2)
    cx0 = rng.uniform(b / 2 + 20, frame_w - b / 2 - 20 - abs(drift) * n)
    if drift < 0:
        cx0 += abs(drift) * n
    cy = rng.uniform(frame_h / 2 - 15, frame_h / 2 + 15)
    bboxes = [
        cm.BBox(cx=cx0 + drift * t, cy=cy, b=b, frame_w=frame_w, frame_h=frame_h)
        for t in range(n)
    ]

    verts = md.pose_sequence(model, beta, theta_global, theta_joints)
    kp3d = md.regress_keypoints3d(verts, model)
    cam = cm.cameras_from_weak(cam_weak, bboxes)
    kp2d = np.stack([cm.project_full(kp3d[t], cam, t) for t in range(n)])
    conf = np.ones(kp3d.shape[:2])

    masks = [rd.rasterize_hard(verts[t], model.faces, cam, t, res=CROP_RES) for t in range(n)]
    base = rng.uniform(0.55, 0.7, 3)
    body = rng.uniform(0.25, 0.5, 3)
    crops = [_crop_image_from_mask(masks[t].array(), rng, base, body) for t in range(n)]

    hoof_idx = [k for k, tag in enumerate(model.keypoint_regions()) if tag.startswith("leg")]
    hoof_names = [model.keypoint_defs[k].name for k in hoof_idx]
    hoof_idx = [k for k, nm in zip(hoof_idx, hoof_names) if nm.startswith("hoof")]
    track = _synth_audio(kp3d, hoof_idx, n, fps)

    return SynthSequence(
        model_name="toy",
        gait=gait,
        fps=fps,
        frame_w=frame_w,
        frame_h=frame_h,
        seed=seed,
        beta=beta,
        theta_global=theta_global,
        theta_joints=theta_joints,
        cam_weak=cam_weak,
        bboxes=bboxes,
        keypoints2d=kp2d,
        conf=conf,
        keypoints3d=kp3d,
        masks=masks,
        crops=crops,
        track=track,
        kp_regions=list(model.keypoint_regions()),
    )


def clips_from_sequence(seq: SynthSequence, T=5, spec: au.Spectrogram = None, name=""):
    """Sliding windows of length T with 1-frame stride."""
    if seq.n < T:
        raise ValueError("sequence too short")
    if spec is None and seq.track is not None:
        spec = au.log_mel(seq.track)
    clips = []
    for t0 in range(seq.n - T + 1):
        sl = slice(t0, t0 + T)
        pose = md.PoseState(
            beta=seq.beta.copy(),
            theta_global=seq.theta_global[sl].copy(),
            theta_joints=seq.theta_joints[sl].copy(),
            cam_weak=seq.cam_weak[sl].copy(),
        )
        wnd = None
        if spec is not None:
            wnd = au.clip_window(spec, seq.fps, t0, T)
        clips.append(
            ClipRecord(
                crops=list(seq.crops[sl]),
                bboxes=list(seq.bboxes[sl]),
                keypoints2d=seq.keypoints2d[sl].copy(),
                conf=seq.conf[sl].copy(),
                masks=list(seq.masks[sl]),
                sil_valid=np.ones(T, dtype=bool),
                audio_window=wnd,
                fps=seq.fps,
                frame_w=seq.frame_w,
                frame_h=seq.frame_h,
                kp_regions=list(seq.kp_regions),
                gt_pose=pose,
                gt_keypoints3d=seq.keypoints3d[sl].copy(),
                clip_id=f"{name}:{t0}" if name else str(t0),
                t0=t0,
            )
        )
    return clips


def synth_gait(model: md.MeshModel, gait, T=5, fps=25.0, seed=0) -> ClipRecord:
    """One clip of T frames with full ground truth (see synth_sequence)."""
    # generate a margin after the window so the audio track covers it
    seq = synth_sequence(model, gait, n=T + 2, fps=fps, seed=seed)
    return clips_from_sequence(seq, T=T)[0]


# ---------------------------------------------------------------------------
# image files


def save_ppm(path, img):
    """Binary P6 with 8-bit channels from a float image in [0,1]."""
    v = np.clip(np.rint(np.asarray(img) * 255), 0, 255).astype(np.uint8)
    if v.ndim != 3 or v.shape[2] != 3:
        raise ValueError("shape error")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii"))
        fh.write(v.tobytes())


def load_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise ValueError(f"corrupt dataset: {path}")
    try:
        w, h = map(int, parts[1].split())
        maxval = int(parts[2])
    except ValueError:
        raise ValueError(f"corrupt dataset: {path}") from None
    raw = np.frombuffer(parts[3][: w * h * 3], dtype=np.uint8)
    if raw.size != w * h * 3:
        raise ValueError(f"corrupt dataset: {path}")
    return raw.reshape(h, w, 3).astype(np.float64) / maxval


def _full_frame_from_crop(seq: SynthSequence, t):
    """Paint the crop-frame silhouette appearance back into a full frame."""
    h, w = int(seq.frame_h), int(seq.frame_w)
    yy = np.linspace(0.0, 0.1, h)[:, None]
    frame = np.empty((h, w, 3))
    for c in range(3):
        frame[..., c] = 0.58 + yy
    bb = seq.bboxes[t]
    x0, y0 = bb.corner()
    xs = np.arange(int(np.floor(x0)), int(np.ceil(x0 + bb.b)))
    ys = np.arange(int(np.floor(y0)), int(np.ceil(y0 + bb.b)))
    xs = xs[(xs >= 0) & (xs < w)]
    ys = ys[(ys >= 0) & (ys < h)]
    u = np.clip(((xs + 0.5 - x0) * CROP_RES / bb.b).astype(np.int64), 0, CROP_RES - 1)
    v = np.clip(((ys + 0.5 - y0) * CROP_RES / bb.b).astype(np.int64), 0, CROP_RES - 1)
    frame[np.ix_(ys, xs)] = seq.crops[t][np.ix_(v, u)]
    return np.clip(frame, 0.0, 1.0)


def save_sequence(root, seq: SynthSequence):
    """Write the on-disk layout documented in the module docstring."""
    os.makedirs(os.path.join(root, "frames"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    for t in range(seq.n):
        save_ppm(os.path.join(root, "frames", f"{t:06d}.ppm"), _full_frame_from_crop(seq, t))
        rd.save_mask_pgm(seq.masks[t], os.path.join(root, "masks", f"{t:06d}.pgm"))
    with open(os.path.join(root, "keypoints.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame", "k", "x", "y", "conf"])
        for t in range(seq.n):
            for k in range(seq.keypoints2d.shape[1]):
                wr.writerow(
                    [t, k]
                    + [f"{x:.17g}" for x in seq.keypoints2d[t, k]]
                    + [f"{seq.conf[t, k]:.17g}"]
                )
    with open(os.path.join(root, "bboxes.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame", "cx", "cy", "b"])
        for t, bb in enumerate(seq.bboxes):
            wr.writerow([t, f"{bb.cx:.17g}", f"{bb.cy:.17g}", f"{bb.b:.17g}"])
    with open(os.path.join(root, "keypoints3d.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame", "k", "x", "y", "z"])
        for t in range(seq.n):
            for k in range(seq.keypoints3d.shape[1]):
                wr.writerow([t, k] + [f"{x:.17g}" for x in seq.keypoints3d[t, k]])
    gt = {
        "format": md.POSE_FORMAT,
        "beta": seq.beta.tolist(),
        "theta_global": seq.theta_global.tolist(),
        "theta_joints": seq.theta_joints.tolist(),
        "cam_weak": seq.cam_weak.tolist(),
    }
    with open(os.path.join(root, "gt_pose.json"), "w") as fh:
        json.dump(gt, fh, sort_keys=True)
    au.save_wav(os.path.join(root, "audio.wav"), seq.track)
    meta = {
        "fps": seq.fps,
        "frame_w": seq.frame_w,
        "frame_h": seq.frame_h,
        "n_frames": seq.n,
        "gait": seq.gait,
        "seed": seq.seed,
        "model": seq.model_name,
        "kp_regions": seq.kp_regions,
        "sample_rate": seq.track.sample_rate,
    }
    with open(os.path.join(root, "meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True)


def load_sequence(root, T=5):
    """Sliding-window ClipRecords from a sequence directory."""
    meta_path = os.path.join(root, "meta.json")
    if not os.path.isfile(meta_path):
        raise ValueError(f"corrupt dataset: {meta_path}")
    with open(meta_path) as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError:
            raise ValueError(f"corrupt dataset: {meta_path}") from None
    try:
        n = int(meta["n_frames"])
        fps = float(meta["fps"])
        frame_w = float(meta["frame_w"])
        frame_h = float(meta["frame_h"])
    except (KeyError, TypeError, ValueError):
        raise ValueError(f"corrupt dataset: {meta_path}") from None
    if n < T:
        raise ValueError("sequence too short")

    def read_csv(name, cols):
        path = os.path.join(root, name)
        if not os.path.isfile(path):
            raise ValueError(f"corrupt dataset: {path}")
        with open(path) as fh:
            rdr = csv.reader(fh)
            header = next(rdr, None)
            if header != cols:
                raise ValueError(f"corrupt dataset: {path}")
            try:
                return [[float(x) for x in row] for row in rdr]
            except ValueError:
                raise ValueError(f"corrupt dataset: {path}") from None

    kp_rows = read_csv("keypoints.csv", ["frame", "k", "x", "y", "conf"])
    K = int(max(r[1] for r in kp_rows)) + 1
    if len(kp_rows) != n * K:
        raise ValueError(f"corrupt dataset: {os.path.join(root, 'keypoints.csv')}")
    kp2d = np.zeros((n, K, 2))
    conf = np.zeros((n, K))
    for r in kp_rows:
        t, k = int(r[0]), int(r[1])
        kp2d[t, k] = r[2:4]
        conf[t, k] = r[4]

    bb_rows = read_csv("bboxes.csv", ["frame", "cx", "cy", "b"])
    if len(bb_rows) != n:
        raise ValueError(f"corrupt dataset: {os.path.join(root, 'bboxes.csv')}")
    bboxes = [
        cm.BBox(cx=r[1], cy=r[2], b=r[3], frame_w=frame_w, frame_h=frame_h) for r in bb_rows
    ]

    kp3d = None
    if os.path.isfile(os.path.join(root, "keypoints3d.csv")):
        rows3 = read_csv("keypoints3d.csv", ["frame", "k", "x", "y", "z"])
        if len(rows3) != n * K:
            raise ValueError(f"corrupt dataset: {os.path.join(root, 'keypoints3d.csv')}")
        kp3d = np.zeros((n, K, 3))
        for r in rows3:
            kp3d[int(r[0]), int(r[1])] = r[2:5]

    gt = None
    gt_path = os.path.join(root, "gt_pose.json")
    if os.path.isfile(gt_path):
        with open(gt_path) as fh:
            try:
                g = json.load(fh)
            except json.JSONDecodeError:
                raise ValueError(f"corrupt dataset: {gt_path}") from None
        if g.get("format") != md.POSE_FORMAT:
            raise ValueError(f"corrupt dataset: {gt_path}")
        gt = {
            "beta": np.asarray(g["beta"], dtype=np.float64),
            "theta_global": np.asarray(g["theta_global"], dtype=np.float64),
            "theta_joints": np.asarray(g["theta_joints"], dtype=np.float64),
            "cam_weak": np.asarray(g["cam_weak"], dtype=np.float64),
        }

    frames = []
    for t in range(n):
        p = os.path.join(root, "frames", f"{t:06d}.ppm")
        if not os.path.isfile(p):
            raise ValueError(f"corrupt dataset: {p}")
        frames.append(p)

    masks = []
    sil_valid = np.ones(n, dtype=bool)
    for t in range(n):
        p = os.path.join(root, "masks", f"{t:06d}.pgm")
        if os.path.isfile(p):
            masks.append(rd.load_mask_pgm(p))
        else:
            masks.append(None)
            sil_valid[t] = False

    spec = None
    wav_path = os.path.join(root, "audio.wav")
    if os.path.isfile(wav_path):
        spec = au.log_mel(au.load_wav(wav_path))

    name = os.path.basename(os.path.normpath(root))
    clips = []
    for t0 in range(n - T + 1):
        sl = slice(t0, t0 + T)
        pose = None
        if gt is not None:
            pose = md.PoseState(
                beta=gt["beta"].copy(),
                theta_global=gt["theta_global"][sl].copy(),
                theta_joints=gt["theta_joints"][sl].copy(),
                cam_weak=gt["cam_weak"][sl].copy(),
            )
        wnd = au.clip_window(spec, fps, t0, T) if spec is not None else None
        clips.append(
            ClipRecord(
                crops=frames[sl],
                bboxes=bboxes[sl],
                keypoints2d=kp2d[sl].copy(),
                conf=conf[sl].copy(),
                masks=masks[sl],
                sil_valid=sil_valid[sl].copy(),
                audio_window=wnd,
                fps=fps,
                frame_w=frame_w,
                frame_h=frame_h,
                kp_regions=list(meta.get("kp_regions") or []) or None,
                gt_pose=pose,
                gt_keypoints3d=None if kp3d is None else kp3d[sl].copy(),
                clip_id=f"{name}:{t0}",
                t0=t0,
            )
        )
    return clips


def load_dataset(root, T=5):
    """All sequence subdirectories of a dataset root, flattened to clips."""
    if not os.path.isdir(root):
        raise ValueError(f"corrupt dataset: {root}")
    subdirs = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if os.path.isfile(os.path.join(root, "meta.json")):
        return load_sequence(root, T=T)
    if not subdirs:
        raise ValueError(f"corrupt dataset: {root}")
    clips = []
    for d in subdirs:
        clips.extend(load_sequence(os.path.join(root, d), T=T))
    return clips
