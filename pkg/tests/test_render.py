"""Soft and hard silhouette rasterization."""

import numpy as np
import pytest

import quadfit.camera as cm
import quadfit.render as rd
import quadfit.tape as tp

Z0 = 2.0 * cm.F_CROP / cm.CROP_RES  # subject plane depth for s=1


def _cam(z=Z0):
    g = np.array([[0.0, 0.0, z]])
    return cm.CameraPair(f_full=800.0, gamma_crop=g, gamma_full=g)


def _square(half):
    # axis-aligned square in the z=0 plane, two triangles
    v = np.array([
        [-half, -half, 0.0],
        [half, -half, 0.0],
        [half, half, 0.0],
        [-half, half, 0.0],
    ])
    f = np.array([[0, 1, 2], [0, 2, 3]])
    return v, f


def _square_raster_halfsize(half, res):
    # projected half-size in raster pixels at depth Z0
    return cm.F_CROP * half / Z0 * (res / float(cm.CROP_RES))


def test_big_triangle_interior_saturates():
    v = np.array([[-2.0, -2.0, 0.0], [6.0, -2.0, 0.0], [-2.0, 6.0, 0.0]])
    f = np.array([[0, 1, 2]])
    m = rd.rasterize_soft(v, f, _cam(), 0, res=64)
    assert m.array().min() > 0.99


def test_empty_mesh_renders_zero():
    v = np.zeros((0, 3))
    f = np.zeros((0, 3), dtype=np.int64)
    m = rd.rasterize_soft(v, f, _cam(), 0, res=32)
    np.testing.assert_array_equal(m.array(), np.zeros((32, 32)))
    mh = rd.rasterize_hard(v, f, _cam(), 0, res=32)
    np.testing.assert_array_equal(mh.array(), np.zeros((32, 32)))


def test_soft_square_area():
    res = 64
    half = 0.5
    v, f = _square(half)
    m = rd.rasterize_soft(v, f, _cam(), 0, res=res)
    hs = _square_raster_halfsize(half, res)
    area = (2.0 * hs) ** 2
    assert m.array().sum() == pytest.approx(area, rel=0.05)


def test_hard_square_area_within_boundary_band():
    res = 64
    half = 0.5
    v, f = _square(half)
    m = rd.rasterize_hard(v, f, _cam(), 0, res=res)
    hs = _square_raster_halfsize(half, res)
    area = (2.0 * hs) ** 2
    count = m.array().sum()
    band = 4.0 * (2.0 * hs) + 4.0  # one-pixel band around the perimeter
    assert abs(count - area) <= band


def test_hard_matches_thresholded_soft():
    res = 48
    v, f = _square(0.37)
    soft = rd.rasterize_soft(v, f, _cam(), 0, res=res, sigma=1e-7 * res)
    hard = rd.rasterize_hard(v, f, _cam(), 0, res=res)
    np.testing.assert_array_equal(soft.array() > 0.5, hard.array() > 0.5)


def test_outside_frustum_view_is_zero():
    v, f = _square(0.3)
    v = v + np.array([50.0, 0.0, 0.0])  # far off to the side
    m = rd.rasterize_soft(v, f, _cam(), 0, res=32)
    assert m.array().max() < 1e-12
    mh = rd.rasterize_hard(v, f, _cam(), 0, res=32)
    assert mh.array().sum() == 0.0


def test_soft_mask_monotone_in_scale():
    res = 48
    v, f = _square(0.4)
    sums = []
    for k in (0.5, 0.75, 1.0, 1.25, 1.5):
        m = rd.rasterize_soft(v * k, f, _cam(), 0, res=res)
        sums.append(m.array().sum())
    assert all(b >= a - 1e-9 for a, b in zip(sums, sums[1:]))


def test_behind_camera_rejected():
    v, f = _square(0.3)
    v = v + np.array([0.0, 0.0, -1.0])
    with pytest.raises(ValueError, match="behind camera"):
        rd.rasterize_soft(v, f, _cam(z=0.5), 0, res=32)


def test_mask_value_range_validated():
    with pytest.raises(ValueError, match="invalid mask"):
        rd.Mask(width=2, height=2, values=np.array([[0.0, 1.2], [0.0, 0.0]]))


def test_soft_rasterizer_gradients(rng):
    res = 16
    verts = rng.normal(scale=0.6, size=(12, 3))
    faces = rng.integers(0, 12, size=(16, 3))
    cam = _cam(z=30.0)
    target = rng.uniform(size=(res, res))

    def f(x):
        v = tp.reshape(x, (12, 3))
        m = rd.rasterize_soft(v, faces, cam, 0, res=res)
        d = m.values - target
        return tp.sum(tp.multiply(d, d))

    rep = tp.check_gradient(f, verts.ravel(), tol=1e-3, probes=10)
    assert rep.passed, rep.max_rel_err


def test_mask_pgm_roundtrip(tmp_path):
    v, f = _square(0.4)
    m = rd.rasterize_hard(v, f, _cam(), 0, res=32)
    p = tmp_path / "m.pgm"
    rd.save_mask_pgm(m, p)
    back = rd.load_mask_pgm(p)
    np.testing.assert_array_equal(back.array(), m.array())


def test_mask_raw_roundtrip(tmp_path):
    v, f = _square(0.4)
    m = rd.rasterize_soft(v, f, _cam(), 0, res=32)
    p = tmp_path / "m.rawmask"
    rd.save_mask_raw(m, p)
    back = rd.load_mask_raw(p)
    np.testing.assert_allclose(back.array(), m.array(), atol=1e-7)


def test_downsample_mask_block_average():
    vals = np.zeros((4, 4))
    vals[:2, :2] = 1.0
    m = rd.Mask(width=4, height=4, values=vals)
    small = rd.downsample_mask(m, 2)
    np.testing.assert_allclose(small.array(), [[1.0, 0.0], [0.0, 0.0]])
