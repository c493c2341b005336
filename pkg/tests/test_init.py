import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsesplat import init, synth
from sparsesplat.errors import DegenerateNeighborhood, EmptyCloud
from sparsesplat.geom import Camera, Intrinsics, Pose, back_project_points

from conftest import simple_camera


def identity_camera(size=8):
    return Camera(Intrinsics(1.0, 1.0, 0.0, 0.0, size, size), Pose.identity(), 0.01, 100.0)


def test_constant_depth_gives_fronto_parallel_grid():
    cam = identity_camera()
    pts, views, pix = init.fuse_points([np.ones((8, 8))], [cam])
    assert len(pts) == 64
    np.testing.assert_allclose(pts[:, 2], 1.0)
    np.testing.assert_allclose(pts[:, 0], pix % 8 + 0.5)
    np.testing.assert_allclose(pts[:, 1], pix // 8 + 0.5)
    assert not views.any()


def test_stride_and_invalid_pixels():
    cam = identity_camera()
    d = np.ones((8, 8))
    d[0, 0] = np.nan
    d[0, 2] = 0.0
    d[2, 0] = -1.0
    pts, _, pix = init.fuse_points([d], [cam], stride=2)
    assert len(pts) == 16 - 3
    assert set(pix // 8 % 2) == {0} and set(pix % 8 % 2) == {0}


def test_all_nan_is_empty_cloud():
    with pytest.raises(EmptyCloud):
        init.fuse_points([np.full((8, 8), np.nan)] * 2, [identity_camera()] * 2)


def test_multi_view_plane_fuses_onto_plane():
    sc = synth.make_scene("plane", "checker", 48, 3)
    pts, views, _ = init.fuse_points(sc.depths, sc.cameras)
    assert set(np.unique(views)) == {0, 1, 2}
    # plane-fit residual oracle: SVD of the centred cloud
    c = pts - pts.mean(axis=0)
    normal = np.linalg.svd(c, full_matrices=False)[2][-1]
    assert np.abs(c @ normal).max() < 1e-6
    assert abs(abs(normal[2]) - 1) < 1e-9


def test_sample_attributes_constant_red():
    cam = simple_camera(size=10, f=10, c=5)
    img = np.zeros((10, 10, 3))
    img[..., 0] = 1
    pts, v, pix = init.fuse_points([np.full((10, 10), 2.0)], [cam])
    col, _ = init.sample_attributes(v, pix, [cam], [img], [np.zeros((10, 10, 8))])
    np.testing.assert_array_equal(col, np.tile([1.0, 0, 0], (100, 1)))


def test_sample_attributes_coordinate_ramp():
    W, H = 12, 9
    cam = Camera(Intrinsics(10, 10, 6, 4.5, W, H), Pose.identity(), 0.1, 10)
    rows, cols = np.mgrid[0:H, 0:W].astype(float)
    feat = np.zeros((H, W, 8))
    feat[..., 0] = cols
    feat[..., 1] = rows
    feat[..., 2] = rows * W + cols
    _, v, pix = init.fuse_points([np.full((H, W), 3.0)], [cam])
    _, f = init.sample_attributes(v, pix, [cam], [np.zeros((H, W, 3))], [feat])
    np.testing.assert_allclose(f[:, 0], pix % W, atol=1e-12)
    np.testing.assert_allclose(f[:, 1], pix // W, atol=1e-12)
    np.testing.assert_allclose(f[:, 2], pix, atol=1e-12)


def test_grid_spacing_scales():
    h = 0.25
    g = np.stack(np.meshgrid(np.arange(10) * h, np.arange(10) * h, indexing="ij"), -1).reshape(-1, 2)
    pts = np.c_[g, np.zeros(len(g))]
    s = init.init_splats(pts, np.zeros((100, 3)), np.zeros((100, 8)), np.tile([0, 0, -1.0], (100, 1)))
    # brute-force 3-NN oracle
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d[d == 0] = np.inf
    oracle = np.sort(d, axis=1)[:, :3].mean(axis=1)
    np.testing.assert_allclose(np.exp(s.log_s[:, 0]), oracle, rtol=1e-12)
    interior = (g[:, 0] > 0) & (g[:, 0] < 9 * h - 1e-9) & (g[:, 1] > 0) & (g[:, 1] < 9 * h - 1e-9)
    np.testing.assert_allclose(np.exp(s.log_s[interior]), h, rtol=1e-12)
    np.testing.assert_allclose(1 / (1 + np.exp(-s.opacity_logit)), 0.9)


def test_plane_normals_within_five_degrees():
    sc = synth.make_scene("plane", "checker", 48, 3)
    s = init.initialize(sc.depths, sc.cameras, sc.images, [synth.feature_extract(i) for i in sc.images])
    tz = s.rotations[:, :, 2]
    ang = np.degrees(np.arccos(np.clip(np.abs(tz[:, 2]), -1, 1)))
    assert ang.max() < 5.0
    # camera-facing: the normal points against the viewing ray
    cams = np.array([c.center for c in sc.cameras])[s.view_index]
    assert np.all(np.sum(tz * (cams - s.p), axis=1) > 0)


def test_single_point_fallback_scale():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        s = init.init_splats(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 8)), np.array([[0, 0, -1.0]]),
                             extent=2.0)
    assert any(issubclass(x.category, DegenerateNeighborhood) for x in w)
    np.testing.assert_allclose(np.exp(s.log_s), 2.0 / 1000)


@settings(max_examples=15)
@given(st.integers(0, 2**31 - 1))
def test_provenance_round_trip_and_scale_bounds(seed):
    rng = np.random.default_rng(seed)
    cam = simple_camera(size=16, f=16, c=8)
    depths = [rng.uniform(1.0, 3.0, (16, 16))]
    depths[0][rng.random((16, 16)) < 0.2] = np.nan
    s = init.initialize(depths, [cam], [rng.random((16, 16, 3))], [rng.random((16, 16, 8))], stride=1)
    px = init.pixel_centers(s.pixel_index, 16)
    d = depths[0].reshape(-1)[s.pixel_index]
    np.testing.assert_allclose(back_project_points(cam, px, d), s.p, atol=1e-9)
    sc = np.exp(s.log_s)
    assert np.all(sc > 0) and np.all(sc <= s.extent)


def test_checksum_taken_at_init_is_stable():
    sc = synth.make_scene("sphere", "checker", 32, 2)
    s = init.initialize(sc.depths, sc.cameras, sc.images, [synth.feature_extract(i) for i in sc.images])
    c0 = s.appearance_checksum()
    s.p += 0.01
    s.log_s -= 0.1
    assert s.appearance_checksum() == c0


def test_default_stride():
    assert init.default_stride(128, 128) == 1
    assert init.default_stride(256, 200) == 2
