import numba
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparsesplat.geom import Camera, Intrinsics, Pose, back_project
from sparsesplat.render import (ALPHA_MAX, G_MIN, GradientBuffer, Upstream, intersect, render,
                                render_backward)
from sparsesplat.scene import Scene, Splat, logit, pack, quat_from_normal, unpack

from conftest import simple_camera

seeds = st.integers(0, 2**31 - 1)


def disk(p, normal, scale, opacity, color, feature=None):
    n = np.asarray(normal, dtype=float)
    return Splat(np.asarray(p, float), quat_from_normal(n[None] / np.linalg.norm(n))[0],
                 np.log(np.broadcast_to(scale, 2).astype(float)), float(logit(opacity)),
                 np.asarray(color, float), np.zeros(8) if feature is None else np.asarray(feature, float))


def random_scene(rng, n=50, spread=0.3, scale=(0.05, 0.3), opacity=(0.05, 0.95)):
    p = np.c_[rng.uniform(-spread, spread, (n, 2)), rng.uniform(-0.8, 0.8, n)]
    nrm = np.c_[rng.normal(0, 0.3, (n, 2)), -np.ones(n)]
    q = quat_from_normal(nrm / np.linalg.norm(nrm, axis=1, keepdims=True))
    a = rng.uniform(*opacity, n)
    return Scene(p, q, np.log(rng.uniform(*scale, (n, 2))), logit(a), rng.random((n, 3)),
                 rng.normal(size=(n, 8)), extent=1.0)


def front_camera(size=24):
    f = 1.2 * size
    return Camera(Intrinsics(f, f, size / 2, size / 2, size, size), Pose.look_at([0, 0, -4], [0, 0, 0]), 0.1, 20.0)


# ---------------------------------------------------------------- intersect

def test_intersect_center_hit():
    s = disk([0, 0, 2], [0, 0, -1], 0.1, 0.5, [1, 0, 0])
    h = intersect([0, 0, 0], [0, 0, 1], s)
    assert h.u == pytest.approx(0) and h.v == pytest.approx(0)
    assert h.g == pytest.approx(1.0)
    assert h.t == pytest.approx(2.0)


def test_intersect_offset_by_one_scale():
    s = disk([0, 0, 2], [0, 0, -1], 0.1, 0.5, [1, 0, 0])
    tu = s.frame.t_u
    h = intersect(0.1 * tu, [0, 0, 1], s)
    assert abs(h.u) == pytest.approx(1.0) and h.v == pytest.approx(0, abs=1e-12)
    assert h.g == pytest.approx(np.exp(-0.5), rel=1e-12)
    assert h.g == pytest.approx(0.606531, abs=1e-6)


def test_intersect_parallel_and_cutoff():
    s = disk([0, 0, 2], [0, 0, -1], 0.1, 0.5, [1, 0, 0])
    assert intersect([0, 0, 0], [1, 0, 0], s) is None
    # 3.1 sigma away falls below g_min
    assert intersect([0.31, 0, 0], [0, 0, 1], s) is None
    assert G_MIN == pytest.approx(np.exp(-4.5))
    assert intersect([0, 0, 0], [0, 0, 1], s, near=3.0) is None


# ---------------------------------------------------------------- forward examples

def test_opaque_single_splat():
    cam = simple_camera(size=20, f=20, c=10)
    s = Scene.from_splats([disk([0, 0, 2], [0, 0, -1], 5.0, 1 - 1e-9, [0.2, 0.6, 0.9])])
    out = render(s, cam)
    np.testing.assert_allclose(out.color[10, 10], [0.2, 0.6, 0.9], atol=1e-3 * 0.9 + 1e-12)
    assert out.acc[10, 10] == pytest.approx(ALPHA_MAX, abs=1e-6)
    assert out.depth[10, 10] == pytest.approx(2.0, abs=1e-9)


def test_two_half_alpha_splats_hand_unrolled():
    cam = simple_camera()
    pix = np.array([50.5, 50.5])
    c1, c2, bg = np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0.2, 0.2, 0.7])
    # opacity 0.5 and the pixel ray through each centre gives alpha_eff = 0.5 exactly
    front = disk(back_project(cam, pix, 1.0), [0, 0, -1], 0.01, 0.5, c1)
    back = disk(back_project(cam, pix, 2.0), [0, 0, -1], 0.01, 0.5, c2)
    for order in ([front, back], [back, front]):
        out = render(Scene.from_splats(order), cam, background=bg)
        np.testing.assert_allclose(out.color[50, 50], 0.5 * c1 + 0.25 * c2 + 0.25 * bg, atol=1e-12)
        assert out.acc[50, 50] == pytest.approx(0.75, abs=1e-12)
        assert out.depth[50, 50] == pytest.approx((0.5 * 1 + 0.25 * 2) / 0.75, abs=1e-12)


def test_empty_scene_is_background():
    cam = simple_camera(size=8, f=8, c=4)
    out = render(Scene.empty(), cam, background=(0.1, 0.2, 0.3))
    np.testing.assert_allclose(out.color, np.broadcast_to([0.1, 0.2, 0.3], (8, 8, 3)))
    assert not out.acc.any()


# ---------------------------------------------------------------- invariants

@given(seeds)
def test_compositing_conservation(seed):
    rng = np.random.default_rng(seed)
    out = render(random_scene(rng, 30), front_camera())
    seg = out.ray_segments
    w = np.where(np.arange(seg.weight.shape[2]) < seg.count[..., None], seg.weight, 0.0)
    assert np.all((w >= 0) & (w <= 1))
    np.testing.assert_allclose(w.sum(-1), out.acc, atol=1e-6)
    np.testing.assert_allclose(out.acc + out.transmittance, 1.0, atol=1e-3)
    assert np.all(out.acc <= 1 + 1e-6)


@given(seeds)
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    s = random_scene(rng, 30)
    cam = front_camera()
    a = render(s, cam)
    b = render(s.subset(rng.permutation(len(s))), cam)
    for f in ("color", "feature", "depth", "normal", "acc"):
        np.testing.assert_allclose(getattr(a, f), getattr(b, f), atol=1e-9, rtol=0)


def test_feature_uses_colour_weights(rng):
    s = random_scene(rng, 30)
    s.feature[:, :3] = s.color
    bg = np.array([0.3, 0.1, 0.5])
    out = render(s, front_camera(), background=bg)
    np.testing.assert_allclose(out.feature[..., :3], out.color - (1 - out.acc)[..., None] * bg, atol=1e-9)


def test_render_is_deterministic(rng):
    s = random_scene(rng, 40)
    cam = front_camera()
    a, b = render(s, cam), render(s, cam)
    for f in ("color", "feature", "depth", "normal", "acc"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    old = numba.get_num_threads()
    try:
        numba.set_num_threads(1)
        c = render(s, cam)
    finally:
        numba.set_num_threads(old)
    assert a.color.tobytes() == c.color.tobytes()


def test_normals_face_the_camera(rng):
    s = random_scene(rng, 30)
    s.q[::2] = quat_from_normal(-(s.rotations[::2, :, 2]))  # flip half of them
    cam = front_camera()
    out = render(s, cam)
    view = np.array([0, 0, 1.0])  # camera looks along +z
    assert np.all(out.normal.reshape(-1, 3) @ view <= 1e-12)


# ---------------------------------------------------------------- backward

def _fd_check(scene, cam, loss_fn, upstream_fn, keys, step, tol=1e-3, floor=1e-6):
    out = render(scene, cam)
    g = render_backward(scene, cam, out, upstream_fn(out)).packed()
    x0 = pack(scene)
    bad = []
    for k in keys:
        xp, xm = x0.copy(), x0.copy()
        xp[k] += step
        xm[k] -= step
        fd = (loss_fn(render(unpack(scene, xp), cam)) - loss_fn(render(unpack(scene, xm), cam))) / (2 * step)
        if max(abs(fd), abs(g[k])) > floor and abs(fd - g[k]) > tol * max(abs(fd), abs(g[k])):
            bad.append((k, fd, g[k]))
    return bad


def test_zero_upstream_gives_zero_gradient(rng):
    s = random_scene(rng, 20)
    cam = front_camera()
    g = render_backward(s, cam, render(s, cam), Upstream())
    assert not g.packed().any()
    assert g.is_finite()
    assert GradientBuffer.zeros(3).packed().shape == (30,)


def test_backward_single_splat_red_channel():
    cam = front_camera(16)
    s = Scene.from_splats([disk([0.05, -0.03, 0.0], [0.2, -0.1, -1], [0.4, 0.3], 0.6, [0.8, 0.3, 0.1])], extent=1.0)
    r, c = 7, 9

    def loss(o):
        return o.color[r, c, 0]

    def up(o):
        g = np.zeros_like(o.color)
        g[r, c, 0] = 1.0
        return Upstream(color=g)

    assert _fd_check(s, cam, loss, up, range(10), 1e-4 * s.extent) == []


def test_backward_fifty_splats_l1():
    # wide, faint, nearly fronto-parallel disks keep every ray inside the g_min cutoff,
    # so the loss is smooth at the perturbation scale
    rng = np.random.default_rng(0)
    cam = Camera(Intrinsics(32, 32, 16, 16, 32, 32), Pose.look_at([0, 0, -4], [0, 0, 0]), 0.1, 20.0)
    n = 50
    p = np.c_[rng.uniform(-0.3, 0.3, (n, 2)), np.linspace(-1, 1, n)]
    nrm = np.c_[rng.normal(0, 0.004, (n, 2)), -np.ones(n)]
    q = quat_from_normal(nrm / np.linalg.norm(nrm, axis=1, keepdims=True))
    s = Scene(p, q, np.log(rng.uniform(1.5, 2.5, (n, 2))), logit(0.1) + rng.normal(0, 0.3, n),
              rng.random((n, 3)), rng.normal(size=(n, 8)))
    target = rng.random((32, 32, 3))

    def loss(o):
        return np.abs(o.color - target).mean()

    def up(o):
        return Upstream(color=np.sign(o.color - target) / target.size)

    keys = rng.choice(10 * n, 20, replace=False)
    assert _fd_check(s, cam, loss, up, keys, 1e-5, tol=1e-3, floor=1e-9) == []
