import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparsesplat.errors import AllInvalid, BehindCamera, DegeneratePlane, NonPositiveDepth
from sparsesplat.geom import (Camera, Intrinsics, Pose, apply_homography, back_project, back_project_points,
                              patch_grid, plane_homography, project, project_points, ray, relative_pose,
                              sample_bilinear, warp_patch)

from conftest import random_camera, random_rotation, simple_camera

seeds = st.integers(0, 2**31 - 1)


def test_intrinsics_and_pose_invariants():
    with pytest.raises(ValueError):
        Intrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        Intrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Camera(Intrinsics(1, 1, 1, 1, 4, 4), Pose.identity(), near=1.0, far=0.5)


def test_project_examples():
    cam = simple_camera()
    px, z = project(cam, [0, 0, 1])
    np.testing.assert_allclose(px, [50, 50])
    assert z == 1
    px, z = project(cam, [0.5, 0, 1])
    np.testing.assert_allclose(px, [100, 50])
    assert z == 1
    with pytest.raises(BehindCamera):
        project(cam, [0, 0, -1])


def test_back_project_examples():
    cam = simple_camera()
    np.testing.assert_allclose(back_project(cam, [50, 50], 2.0), [0, 0, 2])
    np.testing.assert_allclose(back_project(cam, [100, 50], 1.0), [0.5, 0, 1])
    with pytest.raises(NonPositiveDepth):
        back_project(cam, [10, 10], 0.0)


@given(seeds)
def test_project_back_project_round_trip(seed):
    rng = np.random.default_rng(seed)
    cam = random_camera(rng)
    X = rng.normal(scale=0.5, size=(50, 3))
    px, z = project_points(cam, X)
    ok = z > 0
    np.testing.assert_allclose(back_project_points(cam, px[ok], z[ok]), X[ok], atol=1e-9)


def test_ray_examples(rng):
    o, d = ray(simple_camera(), [50, 50])
    np.testing.assert_allclose(o, 0)
    np.testing.assert_allclose(d, [0, 0, 1])
    cam = random_camera(rng)
    np.testing.assert_allclose(cam.center, -cam.R.T @ cam.t)
    pix = np.array([20.3, 41.7])
    o, d = ray(cam, pix)
    assert abs(np.linalg.norm(d) - 1) < 1e-12
    for t in (0.5, 1.0, 10.0):
        assert np.abs(project(cam, o + t * d)[0] - pix).max() < 1e-6
    for z in (0.3, 2.0):
        X = back_project(cam, pix, z)
        off = X - o
        assert np.linalg.norm(np.cross(off, d)) < 1e-9


def test_homography_self_warp_is_identity():
    cam = simple_camera()
    H = plane_homography(cam, cam, [0, 0, 2], [0, 0, -1])
    np.testing.assert_allclose(H / H[2, 2], np.eye(3), atol=1e-12)


def test_homography_fronto_parallel_shift():
    # target camera centre at (b, 0, 0): x_tgt = x_src - b, so pixels shift by -fx*b/z
    b = 0.1
    src = simple_camera()
    tgt = simple_camera(pose=Pose(np.eye(3), [-b, 0, 0]))
    H = plane_homography(src, tgt, [0, 0, 1], [0, 0, 1])
    H = H / H[2, 2]
    np.testing.assert_allclose(H, [[1, 0, -100 * b], [0, 1, 0], [0, 0, 1]], atol=1e-12)


def test_homography_degenerate_plane():
    cam = simple_camera()
    with pytest.raises(DegeneratePlane):
        plane_homography(cam, cam, [0, 0, 0], [0, 0, 1])
    with pytest.raises(ValueError):
        plane_homography(cam, cam, [0, 0, 1], [0, 0, 2])


@given(seeds)
def test_homography_exact_on_plane(seed):
    rng = np.random.default_rng(seed)
    src, tgt = random_camera(rng), random_camera(rng)
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    p0 = rng.normal(scale=0.2, size=3)
    H = plane_homography(src, tgt, p0, n)
    a = np.cross(n, [1.0, 0, 0] if abs(n[0]) < 0.9 else [0, 1.0, 0])
    a /= np.linalg.norm(a)
    b = np.cross(n, a)
    uv = rng.uniform(-0.5, 0.5, size=(30, 2))
    X = p0 + uv[:, :1] * a + uv[:, 1:] * b
    ps, zs = project_points(src, X)
    pt, zt = project_points(tgt, X)
    ok = (zs > 0.05) & (zt > 0.05)
    if ok.any():
        assert np.abs(apply_homography(H, ps[ok]) - pt[ok]).max() < 1e-6


@given(seeds)
def test_pose_composition_associative_and_relative_identity(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (Pose(random_rotation(rng), rng.normal(size=3)) for _ in range(3))
    left = a.compose(b).compose(c)
    right = a.compose(b.compose(c))
    np.testing.assert_allclose(left.rotation, right.rotation, atol=1e-12)
    np.testing.assert_allclose(left.translation, right.translation, atol=1e-12)
    rel = relative_pose(a, a)
    np.testing.assert_allclose(rel.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(rel.translation, 0, atol=1e-12)


def test_warp_patch_identity_and_shift():
    img = np.add.outer(np.arange(20.0) * 10, np.arange(20.0))  # value = 10*row + col
    p = warp_patch(img, np.eye(3), [10.5, 8.5], 2)
    np.testing.assert_array_equal(p.values, img[6:11, 8:13])
    assert p.valid.all()
    shift = np.array([[1, 0, 3], [0, 1, -2], [0, 0, 1]], dtype=float)
    p = warp_patch(img, shift, [10.5, 8.5], 2)
    np.testing.assert_allclose(p.values, img[4:9, 11:16], atol=1e-12)
    off = np.array([[1, 0, 500], [0, 1, 0], [0, 0, 1]], dtype=float)
    with pytest.raises(AllInvalid):
        warp_patch(img, off, [10.5, 8.5], 2)


def test_sample_bilinear_renormalises_at_borders():
    img = np.arange(12.0).reshape(3, 4)
    v, ok = sample_bilinear(img, np.array([[0.5, 0.5], [1.0, 0.5], [0.0, 0.0], [-0.6, 0.5], [np.nan, 1.0]]))
    np.testing.assert_allclose(v[:3], [0.0, 0.5, 0.0])
    assert ok.tolist() == [True, True, True, False, False]


def test_patch_grid_shape():
    g = patch_grid(np.array([5.5, 7.5]), 3)
    assert g.shape == (7, 7, 2)
    np.testing.assert_allclose(g[3, 3], [5.5, 7.5])


def test_camera_dict_round_trip(rng):
    cam = random_camera(rng)
    back = Camera.from_dict(cam.to_dict())
    np.testing.assert_array_equal(back.R, cam.R)
    np.testing.assert_array_equal(back.t, cam.t)
    assert back.intrinsics == cam.intrinsics and back.near == cam.near and back.far == cam.far
