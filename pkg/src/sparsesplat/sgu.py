"""Selective position update gated by patch photo-consistency.

Each splat is scored twice in its provenance view: once with the plane of its
own disk, once with the plane given by the rendered depth and normal at its
projected pixel. The patch around the projection is warped into a target view
through the plane-induced homography and compared by NCC on luma. When the
rendered plane scores strictly higher, the splat centre is moved onto the
rendered depth along its own viewing ray.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .errors import AllInvalid, DegeneratePlane, ZeroVariance
from .geom import Camera, Patch, back_project_points, plane_homography, project_points, warp_patch
from .regularize import _rank_kernel, splat_keys
from .render import RenderOutput
from .scene import Scene, Splat, quat_to_rotmat
from .synth import luma

DEFAULT_HALF = 3
ACC_MIN = 0.5
SENTINEL = -1.0
_VAR_EPS = 1e-12
# scores closer than this are ties; keeps round-off from moving splats
TIE_EPS = 1e-9


def ncc(x: Patch, y: Patch) -> float:
    """Normalised cross-correlation over the common valid mask.

    Raises:
        ZeroVariance: fewer than two common samples, or a constant patch.
    """
    xv = np.asarray(x.values, dtype=np.float64)
    yv = np.asarray(y.values, dtype=np.float64)
    if xv.shape != yv.shape:
        raise ValueError(f"patch shapes differ: {xv.shape} vs {yv.shape}")
    mask = np.asarray(x.valid) & np.asarray(y.valid)
    if mask.sum() < 2:
        raise ZeroVariance("fewer than two common valid samples")
    a = xv[mask] - xv[mask].mean()
    b = yv[mask] - yv[mask].mean()
    saa = float(a @ a)
    sbb = float(b @ b)
    if saa <= _VAR_EPS * a.size or sbb <= _VAR_EPS * b.size:
        raise ZeroVariance("patch is constant on the valid mask")
    return float(np.clip((a @ b) / np.sqrt(saa * sbb), -1.0, 1.0))


def _gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return luma(img) if img.ndim == 3 else img


def _plane_score(center, plane_point, plane_normal, src_cam, tgt_cam, src_img, tgt_img, half) -> float:
    try:
        H = plane_homography(src_cam, tgt_cam, plane_point, plane_normal)
        src_patch = warp_patch(_gray(src_img), np.eye(3), center, half)
        tgt_patch = warp_patch(_gray(tgt_img), H, center, half)
        return ncc(src_patch, tgt_patch)
    except (AllInvalid, ZeroVariance, DegeneratePlane):
        return SENTINEL


def score_primitive(splat: Splat, src_cam: Camera, tgt_cam: Camera, src_img, tgt_img,
                    half: int = DEFAULT_HALF) -> float:
    """NCC of the source patch around the projected centre against its warp by the disk plane."""
    px, z = project_points(src_cam, splat.p)
    if not z > 0:
        return SENTINEL
    tz = quat_to_rotmat(splat.q)[:, 2]
    return _plane_score(px, splat.p, tz, src_cam, tgt_cam, src_img, tgt_img, half)


def _lookup(pixel, camera: Camera):
    k = camera.intrinsics
    c = int(np.floor(pixel[0]))
    r = int(np.floor(pixel[1]))
    if not (0 <= c < k.width and 0 <= r < k.height):
        return None
    return r, c


def score_rendered(pixel, rendered_depth, rendered_normal, src_cam: Camera, tgt_cam: Camera, src_img, tgt_img,
                   half: int = DEFAULT_HALF, acc=None) -> float:
    """NCC with the plane from the rendered depth and normal at ``pixel``.

    The normal and the coverage test come from the containing pixel; depth is
    interpolated bilinearly when the four surrounding pixel centres are covered.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    rc = _lookup(pixel, src_cam)
    if rc is None:
        return SENTINEL
    depth = np.asarray(rendered_depth, dtype=np.float64)
    cover = np.ones_like(depth) if acc is None else np.asarray(acc, dtype=np.float64)
    n = np.asarray(rendered_normal[rc], dtype=np.float64)
    nlen = np.linalg.norm(n)
    if not cover[rc] > ACC_MIN or not depth[rc] > 0 or nlen < 1e-12:
        return SENTINEL
    d = _depth_at(depth, cover, pixel[0], pixel[1], rc[0], rc[1])
    X = back_project_points(src_cam, pixel, np.float64(d))
    return _plane_score(pixel, X, n / nlen, src_cam, tgt_cam, src_img, tgt_img, half)


# ----------------------------------------------------------------------------
# batched kernel


@nb.njit(cache=True)
def _bilinear_gray(img, x, y):
    """Renormalised bilinear sample at continuous pixel ``(x, y)``; NaN when invalid."""
    if not (np.isfinite(x) and np.isfinite(y)):
        return np.nan
    h, w = img.shape
    xs = x - 0.5
    ys = y - 0.5
    if xs < -1.0 or ys < -1.0 or xs > w or ys > h:
        return np.nan
    x0 = int(np.floor(xs))
    y0 = int(np.floor(ys))
    fx = xs - x0
    fy = ys - y0
    acc = 0.0
    ws = 0.0
    for dy in range(2):
        for dx in range(2):
            xi = x0 + dx
            yi = y0 + dy
            if xi < 0 or xi >= w or yi < 0 or yi >= h:
                continue
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            acc += wgt * img[yi, xi]
            ws += wgt
    if ws <= 0.0:
        return np.nan
    return acc / ws


@nb.njit(cache=True)
def _homography(Ks, Kt, Rs, ts, Rt, tt, X, n):
    ns = Rs @ n
    xs = Rs @ X + ts
    d = -(ns[0] * xs[0] + ns[1] * xs[1] + ns[2] * xs[2])
    if abs(d) < 1e-9:
        return np.zeros((3, 3)), False
    Rr = Rt @ Rs.T
    tr = tt - Rr @ ts
    M = Rr - np.outer(tr, ns) / d
    return Kt @ M @ np.linalg.inv(Ks), True


@nb.njit(cache=True)
def _ncc_score(src, tgt, Hm, cx, cy, half):
    npix = (2 * half + 1) ** 2
    a = np.empty(npix)
    b = np.empty(npix)
    m = 0
    for oy in range(-half, half + 1):
        for ox in range(-half, half + 1):
            x = cx + ox
            y = cy + oy
            va = _bilinear_gray(src, x, y)
            hz = Hm[2, 0] * x + Hm[2, 1] * y + Hm[2, 2]
            hx = (Hm[0, 0] * x + Hm[0, 1] * y + Hm[0, 2]) / hz if hz != 0.0 else np.nan
            hy = (Hm[1, 0] * x + Hm[1, 1] * y + Hm[1, 2]) / hz if hz != 0.0 else np.nan
            vb = _bilinear_gray(tgt, hx, hy)
            if np.isnan(va) or np.isnan(vb):
                continue
            a[m] = va
            b[m] = vb
            m += 1
    if m < 2:
        return -1.0
    ma = a[:m].mean()
    mb = b[:m].mean()
    saa = 0.0
    sbb = 0.0
    sab = 0.0
    for i in range(m):
        da = a[i] - ma
        db = b[i] - mb
        saa += da * da
        sbb += db * db
        sab += da * db
    if saa <= _VAR_EPS * m or sbb <= _VAR_EPS * m:
        return -1.0
    return min(1.0, max(-1.0, sab / np.sqrt(saa * sbb)))


@nb.njit(cache=True)
def _depth_at(depth, acc, px, py, r, c):
    # bilinear between pixel centres when all four are covered, else the containing pixel
    h, w = depth.shape
    x = px - 0.5
    y = py - 0.5
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    if x0 < 0 or y0 < 0 or x0 + 1 >= w or y0 + 1 >= h:
        return depth[r, c]
    for dy in range(2):
        for dx in range(2):
            if acc[y0 + dy, x0 + dx] <= ACC_MIN:
                return depth[r, c]
    fx = x - x0
    fy = y - y0
    return ((1 - fy) * ((1 - fx) * depth[y0, x0] + fx * depth[y0, x0 + 1])
            + fy * ((1 - fx) * depth[y0 + 1, x0] + fx * depth[y0 + 1, x0 + 1]))


@nb.njit(parallel=True, cache=True)
def _sgu_kernel(p, tz, view, target, Ks, Rs, ts, near, grays, depth, normal, acc, half, out_g, out_r, out_p):
    n = p.shape[0]
    Hh, Ww = depth.shape[1], depth.shape[2]
    for i in nb.prange(n):
        out_g[i] = -1.0
        out_r[i] = -1.0
        v = view[i]
        t = target[i]
        if t < 0:
            continue
        xc = Rs[v] @ p[i] + ts[v]
        if xc[2] <= near[v]:
            continue
        K = Ks[v]
        px = K[0, 0] * xc[0] / xc[2] + K[0, 2]
        py = K[1, 1] * xc[1] / xc[2] + K[1, 2]
        c = int(np.floor(px))
        r = int(np.floor(py))
        if c < 0 or c >= Ww or r < 0 or r >= Hh:
            continue
        Hg, ok = _homography(K, Ks[t], Rs[v], ts[v], Rs[t], ts[t], p[i], tz[i])
        if ok:
            out_g[i] = _ncc_score(grays[v], grays[t], Hg, px, py, half)
        nv = normal[v, r, c]
        nl = np.sqrt(nv[0] ** 2 + nv[1] ** 2 + nv[2] ** 2)
        if acc[v, r, c] <= ACC_MIN or depth[v, r, c] <= 0.0 or nl < 1e-12:
            continue
        d = _depth_at(depth[v], acc[v], px, py, r, c)
        xcam = np.array([(px - K[0, 2]) / K[0, 0] * d, (py - K[1, 2]) / K[1, 1] * d, d])
        X = Rs[v].T @ (xcam - ts[v])
        Hr, ok = _homography(K, Ks[t], Rs[v], ts[v], Rs[t], ts[t], X, nv / nl)
        if ok:
            out_r[i] = _ncc_score(grays[v], grays[t], Hr, px, py, half)
        out_p[i] = X


@dataclass
class SguResult:
    updated: np.ndarray  # indices of moved splats
    score_primitive: np.ndarray
    score_rendered: np.ndarray

    @property
    def count(self) -> int:
        return int(self.updated.size)


def pick_targets(scene: Scene, n_views: int, seed: int, iteration: int) -> np.ndarray:
    """Per-splat uniformly random target view different from the provenance view (-1 if none)."""
    if n_views < 2:
        return np.full(len(scene), -1, dtype=np.int64)
    keys = splat_keys(scene)
    # same hash family as the disk draws, offset so the streams never coincide
    h = np.empty(len(keys), dtype=np.uint64)
    _rank_kernel(np.uint64(seed), np.uint64(iteration) + np.uint64(1 << 40), keys, h)
    off = (h % np.uint64(n_views - 1)).astype(np.int64) + 1
    return (scene.view_index.astype(np.int64) + off) % n_views


def selective_update(scene: Scene, renders: list[RenderOutput], cameras: list[Camera], images: list[np.ndarray],
                     half: int = DEFAULT_HALF, seed: int = 0, iteration: int = 0) -> SguResult:
    """Score every splat and move those whose rendered plane explains the images better.

    "Better" is strict: the rendered score must exceed the primitive score by
    more than ``TIE_EPS``.

    ``scene.p`` is modified in place; nothing else in the scene is touched.
    """
    n = len(scene)
    if n == 0:
        e = np.zeros(0)
        return SguResult(np.zeros(0, dtype=np.int64), e, e)
    V = len(cameras)
    Ks = np.stack([c.K for c in cameras])
    Rs = np.stack([c.R for c in cameras])
    ts = np.stack([c.t for c in cameras])
    near = np.array([c.near for c in cameras])
    grays = np.stack([_gray(im) for im in images])
    depth = np.stack([r.depth for r in renders])
    normal = np.stack([r.normal for r in renders])
    acc = np.stack([r.acc for r in renders])
    tz = np.ascontiguousarray(quat_to_rotmat(scene.q)[:, :, 2])
    targets = pick_targets(scene, V, seed, iteration)
    sg = np.empty(n)
    sr = np.empty(n)
    newp = scene.p.copy()
    _sgu_kernel(scene.p, tz, scene.view_index.astype(np.int64), targets, Ks, Rs, ts, near, grays, depth, normal,
                acc, half, sg, sr, newp)
    upd = np.flatnonzero(sr > sg + TIE_EPS)
    scene.p[upd] = newp[upd]
    return SguResult(upd, sg, sr)
