"""Camera math: focal/bbox encodings, translations, projection consistency."""

import numpy as np
import pytest

import quadfit.camera as cm
import quadfit.tape as tp


def test_focal_full_values():
    assert cm.focal_full(3840, 2160) == pytest.approx(4405.81, abs=0.01)
    assert cm.focal_full(3, 4) == pytest.approx(5.0)
    assert cm.focal_full(1920, 1080) == cm.focal_full(1080, 1920)
    with pytest.raises(ValueError, match="invalid frame"):
        cm.focal_full(0, 100)


def test_bbox_info_values():
    box = cm.BBox(cx=1000.0, cy=500.0, b=400.0, frame_w=3840, frame_h=2160)
    np.testing.assert_allclose(
        cm.bbox_info(box), [0.22698, 0.11349, 0.09079], atol=1e-4
    )
    f = cm.focal_full(3840, 2160)
    unit = cm.BBox(cx=0.0, cy=0.0, b=f, frame_w=3840, frame_h=2160)
    np.testing.assert_allclose(cm.bbox_info(unit), [0.0, 0.0, 1.0], atol=1e-12)
    double = cm.BBox(cx=2000.0, cy=1000.0, b=800.0, frame_w=3840, frame_h=2160)
    np.testing.assert_allclose(cm.bbox_info(double), 2.0 * cm.bbox_info(box), atol=1e-12)


def test_crop_translation_values():
    np.testing.assert_allclose(
        cm.crop_translation(1.0, 0.0, 0.0), [0.0, 0.0, 44.642857], atol=1e-5
    )
    z1 = cm.crop_translation(1.0, 0.0, 0.0)[2]
    z2 = cm.crop_translation(2.0, 0.0, 0.0)[2]
    assert z2 == pytest.approx(z1 / 2.0)
    np.testing.assert_allclose(
        cm.crop_translation(1.0, 0.3, -0.2), [0.3, -0.2, 44.642857], atol=1e-5
    )
    with pytest.raises(ValueError, match="invalid scale"):
        cm.crop_translation(0.0, 0.0, 0.0)


def test_full_translation_values():
    box = cm.BBox(cx=1000.0, cy=500.0, b=400.0, frame_w=3840, frame_h=2160)
    np.testing.assert_allclose(
        cm.full_translation(0.8, 0.1, -0.05, box), [6.35, 3.075, 27.536], atol=1e-3
    )
    centered = cm.BBox(cx=0.0, cy=0.0, b=400.0, frame_w=3840, frame_h=2160)
    g = cm.full_translation(0.8, 0.1, -0.05, centered)
    np.testing.assert_allclose(g[:2], [0.1, -0.05], atol=1e-12)
    # z depends on b*s only
    box2 = cm.BBox(cx=1000.0, cy=500.0, b=800.0, frame_w=3840, frame_h=2160)
    z_a = cm.full_translation(0.8, 0.0, 0.0, box)[2]
    z_b = cm.full_translation(0.4, 0.0, 0.0, box2)[2]
    assert z_a == pytest.approx(z_b, rel=1e-12)


def test_project_points_values():
    pts = np.array([[0.0, 0.0, 0.0]])
    uv = tp.value(cm.project_points(pts, 5000.0, np.array([0.0, 0.0, 10.0]),
                                    np.array([112.0, 112.0])))
    np.testing.assert_allclose(uv, [[112.0, 112.0]], atol=1e-12)

    uv = tp.value(cm.project_points(np.array([[1.0, 0.0, 0.0]]), 5000.0,
                                    np.array([0.0, 0.0, 10.0]), np.array([0.0, 0.0])))
    np.testing.assert_allclose(uv, [[500.0, 0.0]], atol=1e-12)

    # doubling depth halves the offset from the principal point
    uv2 = tp.value(cm.project_points(np.array([[1.0, 0.0, 0.0]]), 5000.0,
                                     np.array([0.0, 0.0, 20.0]), np.array([0.0, 0.0])))
    np.testing.assert_allclose(uv2, [[250.0, 0.0]], atol=1e-12)

    with pytest.raises(ValueError, match="behind camera"):
        cm.project_points(np.array([[0.0, 0.0, -11.0]]), 5000.0,
                          np.array([0.0, 0.0, 10.0]), np.array([0.0, 0.0]))


def test_crop_full_projection_consistency(rng):
    # projecting into the crop then mapping crop->full pixels must match the
    # direct full-frame projection; exact for points on the subject reference
    # plane (z=0), which is where the weak-perspective conversion lives
    worst = 0.0
    for _ in range(200):
        w, h = rng.uniform(640, 4096, size=2)
        b = rng.uniform(50, min(w, h) / 2)
        box = cm.BBox(
            cx=rng.uniform(b / 2, w - b / 2),
            cy=rng.uniform(b / 2, h - b / 2),
            b=b, frame_w=w, frame_h=h,
        )
        s = rng.uniform(0.5, 2.0)
        px, py = rng.uniform(-1.0, 1.0, size=2)
        cam = cm.cameras_from_weak(np.array([[s, px, py]]), [box])
        pts = rng.normal(scale=0.5, size=(6, 3))
        pts[:, 2] = 0.0
        uv_crop = tp.value(cm.project_crop(pts, cam, 0))
        uv_full = tp.value(cm.project_full(pts, cam, 0))
        err = np.abs(cm.crop_to_full(uv_crop, box) - uv_full).max()
        worst = max(worst, err)
    assert worst < 1e-3


def test_crop_full_pixel_maps_invert(rng):
    box = cm.BBox(cx=900.0, cy=700.0, b=320.0, frame_w=1920, frame_h=1080)
    pts = rng.uniform(0, 224, size=(50, 2))
    back = cm.full_to_crop(cm.crop_to_full(pts, box), box)
    np.testing.assert_allclose(back, pts, atol=1e-9)


def test_project_points_gradients(rng):
    t = np.array([0.1, -0.2, 30.0])

    def f(x):
        pts = tp.reshape(x, (4, 3))
        uv = cm.project_points(pts, 5000.0, t, np.array([112.0, 112.0]))
        return tp.sum(tp.multiply(uv, uv))

    rep = tp.check_gradient(f, rng.normal(size=12))
    assert rep.passed, rep.max_rel_err


def test_camera_pair_validates_depth():
    with pytest.raises(ValueError, match="behind camera"):
        cm.CameraPair(
            f_full=1000.0,
            gamma_crop=np.array([[0.0, 0.0, -1.0]]),
            gamma_full=np.array([[0.0, 0.0, 10.0]]),
        )
