"""Soft (differentiable) and hard silhouette rasterization in the crop camera.

The soft rasterizer is silhouette-only: per-pixel occupancy is the union over
faces of a sigmoid of the signed 2D distance to each projected triangle,

    mask(p) = 1 - prod_f (1 - sigmoid(d_f(p) / sigma)),

with d_f positive inside the triangle. No z-buffer or shading is involved;
a union over faces is exact for silhouettes. The product is accumulated in
log space (log(1 - sigmoid(x)) = -softplus(x)) so hundreds of faces cannot
underflow.

Gradients flow to the projected vertices through a custom tape primitive.
The derivative of a point-to-triangle distance treats the closest boundary
point's edge parameter as locally constant (envelope rule), which is exact
away from the measure-zero set where the closest edge switches.

Rendering always lives in the crop camera's frame: `res` samples the fixed
224-px crop extent, so lower resolutions are cheaper but see the same view.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as tp
from .camera import CROP_RES, CameraPair, project_points


@dataclass
class Mask:
    """Per-pixel occupancy; values in [0,1] (soft) or {0,1} (hard)."""

    width: int
    height: int
    values: object  # (height, width) ndarray or tape Var

    def __post_init__(self):
        v = tp.value(self.values)
        if v.shape != (self.height, self.width):
            raise ValueError("shape error")
        if (v < -1e-9).any() or (v > 1.0 + 1e-9).any():
            raise ValueError("invalid mask: values outside [0, 1]")

    def array(self):
        return tp.value(self.values)


def _face_windows(v, faces, res, sigma):
    """Per-face pixel windows covering the sigmoid's support band.

    Beyond ~60 sigma from a face boundary the occupancy term is below 1e-26,
    so each face only touches pixels inside its bounding box dilated by that
    band. Every face gets a window of the same (wy, wx) size so the geometry
    evaluates as one batched array; the returned pixel index arrays flag
    out-of-image samples invalid.
    """
    pad = 60.0 * sigma + 1.0
    tri = v[faces]  # (F,3,2)
    lo = np.floor(tri.min(axis=1) - pad).astype(np.int64)  # (F,2) x,y
    hi = np.ceil(tri.max(axis=1) + pad).astype(np.int64)
    wx = min(int((hi[:, 0] - lo[:, 0]).max()) + 1, res)
    wy = min(int((hi[:, 1] - lo[:, 1]).max()) + 1, res)
    # clamp origins so clipped windows still cover the in-image overlap
    ox = np.clip(lo[:, 0], 0, res - wx)
    oy = np.clip(lo[:, 1], 0, res - wy)
    jj, ii = np.meshgrid(np.arange(wx), np.arange(wy))
    px = ox[:, None] + jj.ravel()[None, :]  # (F,W) pixel column
    py = oy[:, None] + ii.ravel()[None, :]  # (F,W) pixel row
    P = np.stack([px + 0.5, py + 0.5], axis=-1)  # (F,W,2) centers
    idx = py * res + px
    return tri, P, idx


def _face_geometry(P, tri):
    """Signed-distance pieces for window pixels P (F,W,2) vs triangles (F,3,2).

    Returns per-edge segment distances (3,F,W), edge parameters t (3,F,W),
    and the inside flag (F,W).
    """
    F, W = P.shape[:2]
    dists = np.empty((3, F, W))
    ts = np.empty((3, F, W))
    crosses = np.empty((3, F, W))
    for e in range(3):
        a = tri[:, None, e]  # (F,1,2)
        ab = tri[:, None, (e + 1) % 3] - a
        den = (ab * ab).sum(-1)
        den = np.where(den > 1e-30, den, 1.0)
        pa = P - a
        t = np.clip((pa * ab).sum(-1) / den, 0.0, 1.0)
        diff = pa - t[..., None] * ab
        dists[e] = np.sqrt((diff * diff).sum(-1))
        ts[e] = t
        crosses[e] = ab[..., 0] * pa[..., 1] - ab[..., 1] * pa[..., 0]
    inside = ((crosses > 0).all(axis=0)) | ((crosses < 0).all(axis=0))
    return dists, ts, inside


def _soft_mask_from_verts2d(verts2d, faces, res, sigma):
    """Soft occupancy (res, res) from raster-space 2D vertices; differentiable."""
    v = tp.value(verts2d)
    faces = np.asarray(faces, dtype=np.int64)
    if faces.size == 0:
        mask = np.zeros((res, res))
        if isinstance(verts2d, tp.Var):
            return tp.Var(mask, verts2d.tape, ((verts2d, lambda g: np.zeros_like(v)),))
        return mask

    tri, P, idx = _face_windows(v, faces, res, sigma)
    dists, ts, inside = _face_geometry(P, tri)
    sign = np.where(inside, 1.0, -1.0)
    d = sign * dists.min(axis=0)  # (F,W)
    contrib = -np.logaddexp(0.0, d / sigma)
    L = np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=res * res)
    mask = (1.0 - np.exp(L)).reshape(res, res)

    if not isinstance(verts2d, tp.Var):
        return mask

    def vjp(g):
        g = np.asarray(g).reshape(-1)  # (res*res,)
        gv = np.zeros_like(v)
        geL = (g * np.exp(L))[idx]  # (F,W)
        s = tp._sigmoid_val(d / sigma)
        gd = geL * s / sigma * sign  # includes d = sign * dist chain
        nearest = dists.argmin(axis=0)  # (F,W)
        for e in range(3):
            on_e = nearest == e
            if not on_e.any():
                continue
            a = tri[:, None, e]
            ab = tri[:, None, (e + 1) % 3] - a
            t = ts[e]
            diff = P - a - t[..., None] * ab
            u = diff / np.maximum(dists[e], 1e-12)[..., None]
            coef = (gd * on_e)[..., None] * u  # (F,W,2)
            ga = (-(1.0 - t[..., None]) * coef).sum(axis=1)  # (F,2)
            gb = (-t[..., None] * coef).sum(axis=1)
            np.add.at(gv, faces[:, e], ga)
            np.add.at(gv, faces[:, (e + 1) % 3], gb)
        return gv

    return tp.Var(mask, verts2d.tape, ((verts2d, vjp),))


def _crop_verts2d(vertices, cam: CameraPair, t, res):
    g = cam.gamma_crop
    gt = g[t] if isinstance(g, tp.Var) else tp.value(g)[t]
    pts = project_points(vertices, cam.f_crop, gt, (cam.r / 2.0, cam.r / 2.0))
    return pts * (res / float(CROP_RES))


def rasterize_soft(vertices, faces, cam: CameraPair, t, res=CROP_RES, sigma=None):
    """Soft silhouette of the mesh in frame t's crop camera.

    sigma defaults to 1e-4 * res (raster pixels). Differentiable with
    respect to the 3D vertices and the camera translation.
    """
    if sigma is None:
        sigma = 1e-4 * res
    verts2d = _crop_verts2d(vertices, cam, t, res)
    values = _soft_mask_from_verts2d(verts2d, faces, res, sigma)
    return Mask(width=res, height=res, values=values)


def rasterize_hard(vertices, faces, cam: CameraPair, t, res=CROP_RES):
    """Binary silhouette by point-in-triangle tests at pixel centers."""
    v3 = tp.value(vertices)
    gt = tp.value(cam.gamma_crop)[t]
    pts = project_points(v3, cam.f_crop, gt, (cam.r / 2.0, cam.r / 2.0))
    v = tp.value(pts) * (res / float(CROP_RES))
    faces = np.asarray(faces, dtype=np.int64)
    out = np.zeros((res, res), dtype=bool)
    for f in faces:
        tri = v[f]
        lo = np.floor(tri.min(axis=0) - 0.5).astype(int)
        hi = np.ceil(tri.max(axis=0) + 0.5).astype(int)
        x0, y0 = np.maximum(lo, 0)
        x1 = min(hi[0] + 1, res)
        y1 = min(hi[1] + 1, res)
        if x0 >= x1 or y0 >= y1:
            continue
        xs = np.arange(x0, x1) + 0.5
        ys = np.arange(y0, y1) + 0.5
        px, py = np.meshgrid(xs, ys)
        cr = []
        for e in range(3):
            a, b = tri[e], tri[(e + 1) % 3]
            cr.append((b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]))
        cr = np.stack(cr)
        inside = (cr >= 0).all(axis=0) | (cr <= 0).all(axis=0)
        out[y0:y1, x0:x1] |= inside
    return Mask(width=res, height=res, values=out.astype(np.float64))


def downsample_mask(mask: Mask, res):
    """Block-average a mask to a lower square resolution."""
    v = mask.array()
    h, w = v.shape
    if h % res or w % res:
        raise ValueError("shape error")
    f = h // res
    out = v.reshape(res, f, res, f).mean(axis=(1, 3))
    return Mask(width=res, height=res, values=out)


def save_mask_pgm(mask: Mask, path):
    """8-bit grayscale PGM, hard masks."""
    v = np.clip(np.rint(mask.array() * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii"))
        fh.write(v.tobytes())


def load_mask_pgm(path) -> Mask:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ValueError(f"corrupt dataset: {path}")
    try:
        w, h = map(int, parts[1].split())
        maxval = int(parts[2])
    except ValueError:
        raise ValueError(f"corrupt dataset: {path}") from None
    raw = np.frombuffer(parts[3][: w * h], dtype=np.uint8)
    if raw.size != w * h:
        raise ValueError(f"corrupt dataset: {path}")
    return Mask(width=w, height=h, values=raw.reshape(h, w).astype(np.float64) / maxval)


def save_mask_raw(mask: Mask, path):
    """32-bit float raw values behind a one-line text header, soft masks."""
    with open(path, "wb") as fh:
        fh.write(f"QFMASK 1\n{mask.width} {mask.height}\n".encode("ascii"))
        fh.write(mask.array().astype("<f4").tobytes())


def load_mask_raw(path) -> Mask:
    with open(path, "rb") as fh:
        magic = fh.readline()
        dims = fh.readline()
        raw = fh.read()
    if magic.strip() != b"QFMASK 1":
        raise ValueError(f"corrupt dataset: {path}")
    try:
        w, h = map(int, dims.split())
    except ValueError:
        raise ValueError(f"corrupt dataset: {path}") from None
    vals = np.frombuffer(raw, dtype="<f4")
    if vals.size != w * h:
        raise ValueError(f"corrupt dataset: {path}")
    return Mask(width=w, height=h, values=vals.reshape(h, w).astype(np.float64))
