"""Direct disk regularization: reparameterized disk samples checked against MVS features
in two views, plus alignment of the disk normal with the rendered normal.

Random draws come from a counter-based generator keyed by
``(seed, iteration, splat provenance, sample index)``. A splat therefore sees
the same draws wherever it sits in the list, which keeps the regulariser
invariant to splat order and cheap to evaluate in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .geom import Camera, project_points, sample_bilinear
from .render import GradientBuffer, RenderOutput
from .scene import Scene, Splat, quat_to_rotmat, rotmat_grad_to_quat

DEFAULT_K = 25
DEFAULT_SUBSET = 4096
NORMAL_ACC_MIN = 0.5

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


@dataclass
class DiskSamples:
    Z: np.ndarray  # (K, 3) world points on the disk plane
    Z_prime: np.ndarray  # (K, 3) standard-normal draws


@dataclass
class DrTerms:
    df: float
    dn: float
    grad: GradientBuffer | None = None
    normal_upstream: np.ndarray | None = None  # d dn / d rendered normal, only when not detached
    subset: np.ndarray | None = None


# ----------------------------------------------------------------------------
# counter-based normal draws


@nb.njit(cache=True)
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True)
def _hash4(a, b, c, d):
    h = _mix(np.uint64(a) + _GOLDEN)
    h = _mix(h ^ (np.uint64(b) + _GOLDEN))
    h = _mix(h ^ (np.uint64(c) + _GOLDEN))
    return _mix(h ^ (np.uint64(d) + _GOLDEN))


@nb.njit(cache=True)
def _unit_open(x):
    # (0, 1], safe for log
    return (np.float64(x >> np.uint64(11)) + 1.0) * (1.0 / 9007199254740992.0)


@nb.njit(cache=True)
def _normals_kernel(seed, iteration, keys, K, out):
    pairs = (out.shape[2] + 1) // 2
    for i in range(keys.shape[0]):
        base = _hash4(seed, iteration, keys[i], 0)
        for k in range(K):
            for pair in range(pairs):
                h = _mix(base ^ (np.uint64(2 * k + pair + 1) * _GOLDEN))
                u1 = _unit_open(h)
                u2 = _unit_open(_mix(h + _GOLDEN))
                r = np.sqrt(-2.0 * np.log(u1))
                out[i, k, 2 * pair] = r * np.cos(2.0 * np.pi * u2)
                if 2 * pair + 1 < out.shape[2]:
                    out[i, k, 2 * pair + 1] = r * np.sin(2.0 * np.pi * u2)


@nb.njit(cache=True)
def _rank_kernel(seed, iteration, keys, out):
    for i in range(keys.shape[0]):
        out[i] = _hash4(seed, iteration, keys[i], 0x5EED)


def splat_keys(scene: Scene) -> np.ndarray:
    """Stable per-splat identity: provenance ``(view_index, pixel_index)`` packed into 64 bits."""
    return (scene.view_index.astype(np.uint64) << np.uint64(32)) | scene.pixel_index.astype(np.uint64)


def disk_normals(seed: int, iteration: int, keys: np.ndarray, K: int, dims: int = 3) -> np.ndarray:
    """Standard-normal draws ``(len(keys), K, dims)``, a pure function of the keys.

    The leading components do not depend on ``dims``, so ``dims=2`` (all the
    zero third scale ever uses) returns a prefix of the ``dims=3`` draws.
    """
    out = np.zeros((len(keys), K, dims))
    _normals_kernel(np.uint64(seed), np.uint64(iteration), np.ascontiguousarray(keys, dtype=np.uint64), K, out)
    return out


def subset_indices(scene: Scene, size: int, seed: int, iteration: int) -> np.ndarray:
    """``size`` splats chosen uniformly by hash rank, returned in ascending key order."""
    keys = splat_keys(scene)
    if size >= len(scene):
        return np.argsort(keys, kind="stable")
    ranks = np.empty(len(keys), dtype=np.uint64)
    _rank_kernel(np.uint64(seed), np.uint64(iteration), keys, ranks)
    pick = np.argpartition(ranks, size)[:size]
    return pick[np.argsort(keys[pick], kind="stable")]


def pick_target(n_views: int, src: int, seed: int, iteration: int) -> int | None:
    """Uniformly random view other than ``src``; ``None`` with a single view."""
    others = [v for v in range(n_views) if v != src]
    if not others:
        return None
    rng = np.random.default_rng([seed, iteration, 7])
    return others[int(rng.integers(len(others)))]


# ----------------------------------------------------------------------------
# sampling


def disk_points(p: np.ndarray, R: np.ndarray, s: np.ndarray, Zp: np.ndarray) -> np.ndarray:
    """``Z = p + R S Z'`` with ``S = diag(s_u, s_v, 0)``; broadcasting over leading axes."""
    return (p[..., None, :] + (s[..., None, 0:1] * Zp[..., 0:1]) * R[..., None, :, 0]
            + (s[..., None, 1:2] * Zp[..., 1:2]) * R[..., None, :, 1])


def sample_disk(splat: Splat, K: int, rng: np.random.Generator) -> DiskSamples:
    """Draw ``K`` points on the disk of ``splat`` via the reparameterisation trick."""
    if K < 1:
        raise ValueError("K must be >= 1")
    Zp = rng.standard_normal((K, 3))
    R = quat_to_rotmat(splat.q)
    return DiskSamples(disk_points(splat.p, R, np.exp(splat.log_s), Zp), Zp)


# ----------------------------------------------------------------------------
# cross-view feature consistency


def _cam_params(cam: Camera):
    k = cam.intrinsics
    return (np.array([k.fx, k.fy, k.cx, k.cy, k.width, k.height, cam.near]),
            np.ascontiguousarray(cam.R), np.ascontiguousarray(cam.t))


@nb.njit(cache=True)
def _sample_with_jac(z, cp, R, t, F, val, gxc):
    """Bilinear feature at the projection of ``z``; fills ``val`` and the (C, 3) Jacobian w.r.t. z_cam."""
    xc0 = R[0, 0] * z[0] + R[0, 1] * z[1] + R[0, 2] * z[2] + t[0]
    xc1 = R[1, 0] * z[0] + R[1, 1] * z[1] + R[1, 2] * z[2] + t[1]
    xc2 = R[2, 0] * z[0] + R[2, 1] * z[1] + R[2, 2] * z[2] + t[2]
    if xc2 <= cp[6]:
        return False
    fx, fy, cx, cy = cp[0], cp[1], cp[2], cp[3]
    W, H = int(cp[4]), int(cp[5])
    x = fx * xc0 / xc2 + cx - 0.5
    y = fy * xc1 / xc2 + cy - 0.5
    if not (x >= 0.0 and y >= 0.0 and x <= W - 1 and y <= H - 1):
        return False
    x0 = min(int(np.floor(x)), W - 2)
    y0 = min(int(np.floor(y)), H - 2)
    ax = x - x0
    ay = y - y0
    dudx = fx / xc2
    dudz = -fx * xc0 / (xc2 * xc2)
    dvdy = fy / xc2
    dvdz = -fy * xc1 / (xc2 * xc2)
    for c in range(F.shape[2]):
        f00 = F[y0, x0, c]
        f01 = F[y0, x0 + 1, c]
        f10 = F[y0 + 1, x0, c]
        f11 = F[y0 + 1, x0 + 1, c]
        val[c] = (1 - ay) * ((1 - ax) * f00 + ax * f01) + ay * ((1 - ax) * f10 + ax * f11)
        gx = (1 - ay) * (f01 - f00) + ay * (f11 - f10)
        gy = (1 - ax) * (f10 - f00) + ax * (f11 - f01)
        gxc[c, 0] = gx * dudx
        gxc[c, 1] = gy * dvdy
        gxc[c, 2] = gx * dudz + gy * dvdz
    return True


@nb.njit(cache=True)
def _cross_sample(z, cpS, RS, tS, FS, cpT, RT, tT, FT, a, b, ja, jb, gz):
    """Loss ``1 - cos`` at one sample and its gradient w.r.t. ``z``; returns -1 when skipped."""
    if not _sample_with_jac(z, cpS, RS, tS, FS, a, ja):
        return -1.0
    if not _sample_with_jac(z, cpT, RT, tT, FT, b, jb):
        return -1.0
    C = a.shape[0]
    na = 0.0
    nb_ = 0.0
    dot = 0.0
    for c in range(C):
        na += a[c] * a[c]
        nb_ += b[c] * b[c]
        dot += a[c] * b[c]
    na = np.sqrt(na)
    nb_ = np.sqrt(nb_)
    if na < 1e-12 or nb_ < 1e-12:
        return -1.0
    cos = dot / (na * nb_)
    s0 = 0.0
    s1 = 0.0
    s2 = 0.0
    t0 = 0.0
    t1 = 0.0
    t2 = 0.0
    for c in range(C):
        ga = -(b[c] / (na * nb_) - cos * a[c] / (na * na))
        gb = -(a[c] / (na * nb_) - cos * b[c] / (nb_ * nb_))
        s0 += ga * ja[c, 0]
        s1 += ga * ja[c, 1]
        s2 += ga * ja[c, 2]
        t0 += gb * jb[c, 0]
        t1 += gb * jb[c, 1]
        t2 += gb * jb[c, 2]
    for d in range(3):
        gz[d] = RS[0, d] * s0 + RS[1, d] * s1 + RS[2, d] * s2 + RT[0, d] * t0 + RT[1, d] * t1 + RT[2, d] * t2
    return 1.0 - cos


@nb.njit(cache=True)
def _cross_points(Z, cpS, RS, tS, FS, cpT, RT, tT, FT, gZ):
    C = FS.shape[2]
    a = np.zeros(C)
    b = np.zeros(C)
    ja = np.zeros((C, 3))
    jb = np.zeros((C, 3))
    gz = np.zeros(3)
    tot = 0.0
    cnt = 0
    for k in range(Z.shape[0]):
        l = _cross_sample(Z[k], cpS, RS, tS, FS, cpT, RT, tT, FT, a, b, ja, jb, gz)
        if l < 0:
            gZ[k, :] = 0.0
            continue
        tot += l
        cnt += 1
        gZ[k, :] = gz
    if cnt > 0:
        for k in range(Z.shape[0]):
            gZ[k, :] /= cnt
        return tot / cnt
    return 0.0


@nb.njit(parallel=True, cache=True)
def _cross_view_kernel(p, R, s, Zp, cpS, RS, tS, FS, cpT, RT, tT, FT, out_loss, gp, gtu, gtv, gls):
    n, K = Zp.shape[0], Zp.shape[1]
    C = FS.shape[2]
    for i in nb.prange(n):
        a = np.zeros(C)
        b = np.zeros(C)
        ja = np.zeros((C, 3))
        jb = np.zeros((C, 3))
        gz = np.zeros(3)
        z = np.zeros(3)
        tot = 0.0
        cnt = 0
        g_p = np.zeros(3)
        g_u = np.zeros(3)
        g_v = np.zeros(3)
        l0 = 0.0
        l1 = 0.0
        for k in range(K):
            cu = s[i, 0] * Zp[i, k, 0]
            cv = s[i, 1] * Zp[i, k, 1]
            for d in range(3):
                z[d] = p[i, d] + cu * R[i, d, 0] + cv * R[i, d, 1]
            l = _cross_sample(z, cpS, RS, tS, FS, cpT, RT, tT, FT, a, b, ja, jb, gz)
            if l < 0:
                continue
            tot += l
            cnt += 1
            du = 0.0
            dv = 0.0
            for d in range(3):
                g_p[d] += gz[d]
                g_u[d] += cu * gz[d]
                g_v[d] += cv * gz[d]
                du += R[i, d, 0] * gz[d]
                dv += R[i, d, 1] * gz[d]
            l0 += cu * du
            l1 += cv * dv
        if cnt > 0:
            out_loss[i] = tot / cnt
            for d in range(3):
                gp[i, d] = g_p[d] / cnt
                gtu[i, d] = g_u[d] / cnt
                gtv[i, d] = g_v[d] / cnt
            gls[i, 0] = l0 / cnt
            gls[i, 1] = l1 / cnt
        else:
            out_loss[i] = 0.0


def loss_cross_view(samples: DiskSamples, src_cam: Camera, tgt_cam: Camera, src_features: np.ndarray,
                    tgt_features: np.ndarray, grad: bool = False):
    """Mean ``1 - cos`` between source and target features at the projected samples.

    Samples behind either camera, or without a full bilinear neighbourhood in
    either image, are skipped; returns 0 when every sample is skipped.
    With ``grad`` also returns d loss / d Z as a (K, 3) array.
    """
    Z = np.ascontiguousarray(samples.Z, dtype=np.float64)
    gZ = np.zeros_like(Z)
    val = _cross_points(Z, *_cam_params(src_cam), np.ascontiguousarray(src_features, dtype=np.float64),
                        *_cam_params(tgt_cam), np.ascontiguousarray(tgt_features, dtype=np.float64), gZ)
    return (val, gZ) if grad else val


# ----------------------------------------------------------------------------
# disk-normal alignment


def _facing(p: np.ndarray, tz: np.ndarray, center: np.ndarray) -> np.ndarray:
    return np.where(np.sum((p - center) * tz, axis=-1) > 0, -1.0, 1.0)


def _normal_targets(p, camera: Camera, normal_map, acc_map):
    px, z = project_points(camera, p)
    nvals, ok = sample_bilinear(normal_map, px)
    k = camera.intrinsics
    inside = (z > camera.near) & (px[:, 0] >= 0) & (px[:, 0] < k.width) & (px[:, 1] >= 0) & (px[:, 1] < k.height)
    ok &= inside
    if acc_map is not None:
        avals, _ = sample_bilinear(acc_map, px)
        ok &= avals > NORMAL_ACC_MIN
    nlen = np.linalg.norm(nvals, axis=-1)
    ok &= nlen > 1e-12
    return px, nvals, nlen, ok


def loss_disk_normal(splat: Splat, normal_map: np.ndarray, camera: Camera, acc: np.ndarray | None = None) -> float:
    """``1 - t_z . n`` with camera-facing ``t_z`` and the unit rendered normal at the projected centre."""
    p = np.asarray(splat.p, dtype=np.float64)[None]
    _, nvals, nlen, ok = _normal_targets(p, camera, normal_map, acc)
    if not ok[0]:
        return 0.0
    tz = quat_to_rotmat(splat.q)[:, 2][None]
    tz = tz * _facing(p, tz, camera.center)[:, None]
    return float(1.0 - tz[0] @ (nvals[0] / nlen[0]))


# ----------------------------------------------------------------------------
# combined term


def loss_dr(scene: Scene, cameras: list[Camera], feature_maps: list[np.ndarray], render_src: RenderOutput,
            src: int, tgt: int | None, k: int = DEFAULT_K, subset: int = DEFAULT_SUBSET, seed: int = 0,
            iteration: int = 0, detach_normal: bool = True, grad: bool = False) -> DrTerms:
    """Disk regularisation averaged over a hashed splat subset.

    Args:
        scene: current splats.
        cameras: all training cameras.
        feature_maps: fixed MVS feature maps, one per camera.
        render_src: render of ``cameras[src]`` supplying the normal target.
        src: source view index (the current training view).
        tgt: target view index for the cross-view term, or ``None`` to skip it.
        k: disk samples per splat.
        subset: number of splats evaluated.
        seed, iteration: keys of the random streams.
        detach_normal: treat the rendered normal as a constant target.
        grad: also compute gradients.

    Returns:
        :class:`DrTerms` with the cross-view (``df``) and normal (``dn``) means.
    """
    n = len(scene)
    if n == 0 or subset <= 0:
        return DrTerms(0.0, 0.0, GradientBuffer.zeros(n) if grad else None)
    idx = subset_indices(scene, subset, seed, iteration)
    m = len(idx)
    p = scene.p[idx]
    R = quat_to_rotmat(scene.q[idx])
    s = np.exp(scene.log_s[idx])
    keys = splat_keys(scene)[idx]

    df_i = np.zeros(m)
    gp = np.zeros((m, 3))
    gtu = np.zeros((m, 3))
    gtv = np.zeros((m, 3))
    gls = np.zeros((m, 2))
    if tgt is not None and k > 0:
        Zp = disk_normals(seed, iteration, keys, k, dims=2)
        _cross_view_kernel(p, np.ascontiguousarray(R), s, Zp,
                           *_cam_params(cameras[src]), np.ascontiguousarray(feature_maps[src], dtype=np.float64),
                           *_cam_params(cameras[tgt]), np.ascontiguousarray(feature_maps[tgt], dtype=np.float64),
                           df_i, gp, gtu, gtv, gls)

    cam = cameras[src]
    px, nvals, nlen, ok = _normal_targets(p, cam, render_src.normal, render_src.acc)
    tz = R[:, :, 2]
    sgn = _facing(p, tz, cam.center)
    nh = nvals / np.where(ok, nlen, 1.0)[:, None]
    dn_i = np.where(ok, 1.0 - sgn * np.sum(tz * nh, axis=-1), 0.0)
    df = float(np.sum(df_i) / m)
    dn = float(np.sum(dn_i) / m)
    if not grad:
        return DrTerms(df, dn, subset=idx)

    gtz = -(ok * sgn)[:, None] * nh
    dR = np.stack([gtu, gtv, gtz], axis=-1) / m
    out = GradientBuffer.zeros(n)
    out.p[idx] = gp / m
    out.q[idx] = rotmat_grad_to_quat(scene.q[idx], dR)
    out.log_s[idx] = gls / m
    upstream = None
    if not detach_normal:
        upstream = _normal_map_grad(px, nh, nlen, ok, sgn[:, None] * tz, render_src.normal.shape) / m
    return DrTerms(df, dn, out, upstream, idx)


def _normal_map_grad(px, nh, nlen, ok, tz, shape):
    """Scatter d(1 - t.n_hat)/d n through normalisation and the bilinear lookup."""
    H, W = shape[:2]
    g_n = np.where(ok[:, None], (-tz + nh * np.sum(nh * tz, axis=-1, keepdims=True)) / np.where(ok, nlen, 1.0)[:, None],
                   0.0)
    out = np.zeros(shape)
    x = px[:, 0] - 0.5
    y = px[:, 1] - 0.5
    x0 = np.floor(np.nan_to_num(x, nan=-10)).astype(np.int64)
    y0 = np.floor(np.nan_to_num(y, nan=-10)).astype(np.int64)
    fx = x - x0
    fy = y - y0
    corners = [(0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)), (1, 0, (1 - fx) * fy), (1, 1, fx * fy)]
    inb = [((x0 + dx >= 0) & (x0 + dx < W) & (y0 + dy >= 0) & (y0 + dy < H)) for dy, dx, _ in corners]
    wsum = sum(np.where(b, w, 0.0) for (_, _, w), b in zip(corners, inb))
    for (dy, dx, w), b in zip(corners, inb):
        sel = b & ok
        wn = np.where(sel, w / np.where(wsum > 0, wsum, 1.0), 0.0)
        np.add.at(out, (np.clip(y0 + dy, 0, H - 1)[sel], np.clip(x0 + dx, 0, W - 1)[sel]), g_n[sel] * wn[sel, None])
    return out
