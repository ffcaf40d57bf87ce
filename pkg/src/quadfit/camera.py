"""Bounding-box-conditioned camera encoding and crop/full-frame conversions.

Two pinhole cameras describe each frame. The crop camera has a fixed focal
length (5000 px) looking at the 224-px crop; the full-frame camera has a
diagonal-length focal and looks at the original image. A weak-perspective
triple (s, p_x, p_y) predicted in crop space converts to a perspective
translation for either camera:

    crop:  [p_x, p_y, 2 f_crop / (r s)]
    full:  [p_x + 2 c_x / (b s), p_y + 2 c_y / (b s), 2 f_full / (b s)]

where (c_x, c_y, b) is the subject's square bounding box in full-frame
pixels. The full-frame translation absorbs the box offset, so the paired
projection uses a principal point at the image origin and lands directly in
absolute full-frame pixel coordinates; the crop camera centers its principal
point at (r/2, r/2). For points on the weak-perspective reference plane
(Z = 0), projecting through either camera and mapping between pixel frames
with the box's affine map agree exactly; that identity is what the
conversion exists to satisfy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as tp

F_CROP = 5000.0
CROP_RES = 224


@dataclass(frozen=True)
class BBox:
    """Square subject bounding box in full-frame pixels."""

    cx: float
    cy: float
    b: float
    frame_w: float
    frame_h: float

    def __post_init__(self):
        if not (self.b > 0):
            raise ValueError("degenerate bbox")
        if not (0 <= self.cx <= self.frame_w and 0 <= self.cy <= self.frame_h):
            raise ValueError("invalid bbox: center outside frame")

    def area(self):
        return float(self.b) ** 2

    def corner(self):
        """Top-left corner of the square box."""
        return (self.cx - self.b / 2.0, self.cy - self.b / 2.0)


@dataclass(frozen=True)
class CameraPair:
    """Crop and full-frame cameras for a T-frame clip."""

    f_full: float
    gamma_crop: np.ndarray  # (T, 3)
    gamma_full: np.ndarray  # (T, 3)
    f_crop: float = F_CROP
    r: int = CROP_RES

    def __post_init__(self):
        gc = np.asarray(tp.value(self.gamma_crop))
        gf = np.asarray(tp.value(self.gamma_full))
        if (gc[..., 2] <= 0).any() or (gf[..., 2] <= 0).any():
            raise ValueError("behind camera")


def focal_full(frame_w, frame_h):
    """Full-frame focal length in pixels: the image diagonal."""
    if frame_w <= 0 or frame_h <= 0:
        raise ValueError("invalid frame")
    return float(np.hypot(frame_w, frame_h))


def bbox_info(bbox: BBox):
    """Normalized box encoding [cx, cy, b] / f_full, the network-side input."""
    f = focal_full(bbox.frame_w, bbox.frame_h)
    return np.array([bbox.cx / f, bbox.cy / f, bbox.b / f])


def crop_translation(s, px, py):
    """Perspective translation for the crop camera from weak perspective."""
    sv = tp.value(s)
    if (np.asarray(sv) <= 0).any():
        raise ValueError("invalid scale")
    z = 2.0 * F_CROP / (CROP_RES * s) if isinstance(s, tp.Var) else np.asarray(2.0 * F_CROP / (CROP_RES * sv))
    return tp.stack([px + 0.0 * z, py + 0.0 * z, z], axis=-1)


def full_translation(s, px, py, bbox: BBox):
    """Perspective translation for the full-frame camera.

    Shares (s, p_x, p_y) with the crop camera; the bounding box carries the
    subject back to its place in the original image.
    """
    sv = tp.value(s)
    if (np.asarray(sv) <= 0).any():
        raise ValueError("invalid scale")
    f = focal_full(bbox.frame_w, bbox.frame_h)
    inv = 2.0 / (bbox.b * s)
    return tp.stack(
        [px + bbox.cx * inv, py + bbox.cy * inv, f * inv],
        axis=-1,
    )


def project_points(points, focal, translation, principal):
    """Perspective projection u = f (x + t_x)/(z + t_z) + principal.

    points: (..., 3); translation broadcasts against it; returns (..., 2).
    Differentiable in points and translation.
    """
    p = points + translation
    z = tp.value(p)[..., 2]
    if (z <= 0).any():
        raise ValueError("behind camera")
    xy = p[..., :2]
    zz = p[..., 2:3]
    principal = np.asarray(tp.value(principal), dtype=np.float64)
    return focal * xy / zz + principal


def cameras_from_weak(cam_weak, bboxes):
    """Build the CameraPair for a clip from per-frame (s, p_x, p_y).

    cam_weak: (T, 3); bboxes: list of T BBox sharing one frame size.
    """
    cw = tp.value(cam_weak)
    T = cw.shape[0]
    if len(bboxes) != T:
        raise ValueError("shape error")
    fw, fh = bboxes[0].frame_w, bboxes[0].frame_h
    for bb in bboxes:
        if (bb.frame_w, bb.frame_h) != (fw, fh):
            raise ValueError("invalid frame")
    s = cam_weak[:, 0] if isinstance(cam_weak, tp.Var) else cw[:, 0]
    px = cam_weak[:, 1] if isinstance(cam_weak, tp.Var) else cw[:, 1]
    py = cam_weak[:, 2] if isinstance(cam_weak, tp.Var) else cw[:, 2]
    gc = crop_translation(s, px, py)
    rows = []
    for t, bb in enumerate(bboxes):
        rows.append(full_translation(s[t], px[t], py[t], bb))
    gf = tp.stack(rows, axis=0)
    return CameraPair(f_full=focal_full(fw, fh), gamma_crop=gc, gamma_full=gf)


def crop_to_full(points2d, bbox: BBox):
    """Affine map from crop pixel coordinates to full-frame pixels."""
    x0, y0 = bbox.corner()
    scale = bbox.b / float(CROP_RES)
    return points2d * scale + np.array([x0, y0])


def full_to_crop(points2d, bbox: BBox):
    """Inverse of crop_to_full."""
    x0, y0 = bbox.corner()
    scale = float(CROP_RES) / bbox.b
    return (points2d - np.array([x0, y0])) * scale


def project_crop(points, cam: CameraPair, t):
    """Project (..., 3) points through frame t's crop camera, in crop pixels."""
    g = cam.gamma_crop[t] if isinstance(cam.gamma_crop, tp.Var) else tp.value(cam.gamma_crop)[t]
    return project_points(points, cam.f_crop, g, (cam.r / 2.0, cam.r / 2.0))


def project_full(points, cam: CameraPair, t):
    """Project (..., 3) points through frame t's full camera, absolute pixels."""
    g = cam.gamma_full[t] if isinstance(cam.gamma_full, tp.Var) else tp.value(cam.gamma_full)[t]
    return project_points(points, cam.f_full, g, (0.0, 0.0))
