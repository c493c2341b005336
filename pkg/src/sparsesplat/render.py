"""Exact per-pixel splatting of 2D Gaussian disks and its analytic backward pass.

Every pixel casts one ray through its center, intersects each candidate disk
plane exactly, sorts the hits by ray depth and composites front to back.
Candidates come from a conservative 4x4-pixel tile binning of the projected
3-sigma footprint, so binning never changes the result, only the cost.

Depth maps are camera z-depth (expected ray distance times the cosine to the
optical axis), so they are directly consumable by ``geom.back_project``. The
per-ray segments keep the raw ray parameter ``t*`` used by the distortion loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .geom import Camera, pixel_rays
from .scene import Scene, quat_to_rotmat, rotmat_grad_to_quat, sigmoid

G_MIN = float(np.exp(-4.5))
ALPHA_MAX = 0.999
T_MIN = 1e-4
ACC_EPS = 1e-6
PARALLEL_EPS = 1e-8
TILE = 4
SEGMENT_CAP = 64
N_PARTIALS = 15  # p(3), t_u(3), t_v(3), t_z(3), log_s(2), opacity_logit(1)


@dataclass
class RaySegments:
    """Composited segments per pixel, front to back; entries past ``count`` are unused."""

    count: np.ndarray  # (H, W) int32
    ids: np.ndarray  # (H, W, cap) int32
    weight: np.ndarray  # (H, W, cap) omega_m
    t: np.ndarray  # (H, W, cap) ray parameter of the intersection
    u: np.ndarray
    v: np.ndarray
    g: np.ndarray
    alpha: np.ndarray  # effective alpha after the clamp

    def pixel(self, row: int, col: int) -> list[tuple[int, float, float]]:
        n = int(self.count[row, col])
        return [(int(self.ids[row, col, m]), float(self.weight[row, col, m]), float(self.t[row, col, m]))
                for m in range(n)]


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    feature: np.ndarray  # (H, W, C)
    depth: np.ndarray  # (H, W) camera z-depth
    normal: np.ndarray  # (H, W, 3) world frame, not normalised
    acc: np.ndarray  # (H, W)
    transmittance: np.ndarray  # (H, W) after the last composited segment
    ray_segments: RaySegments
    background: np.ndarray


@dataclass
class GradientBuffer:
    p: np.ndarray
    q: np.ndarray
    log_s: np.ndarray
    opacity_logit: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradientBuffer":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 2)), np.zeros(n))

    def packed(self) -> np.ndarray:
        return np.concatenate([self.p, self.q, self.log_s, self.opacity_logit[:, None]], axis=1).reshape(-1)

    def __iadd__(self, other: "GradientBuffer") -> "GradientBuffer":
        self.p += other.p
        self.q += other.q
        self.log_s += other.log_s
        self.opacity_logit += other.opacity_logit
        return self

    def scaled(self, k: float) -> "GradientBuffer":
        return GradientBuffer(self.p * k, self.q * k, self.log_s * k, self.opacity_logit * k)

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in (self.p, self.q, self.log_s, self.opacity_logit))


@dataclass
class Hit:
    t: float
    u: float
    v: float
    g: float


def intersect(origin, direction, splat, near: float = 0.0, far: float = np.inf) -> Hit | None:
    """Ray/disk intersection for one splat; ``None`` signals no hit."""
    fr = splat.frame
    s_u, s_v = np.exp(splat.log_s)
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    den = float(direction @ fr.t_z)
    if abs(den) < PARALLEL_EPS:
        return None
    t = float((splat.p - origin) @ fr.t_z) / den
    if not (near <= t <= far):
        return None
    r = origin + t * direction - splat.p
    u = float(r @ fr.t_u) / s_u
    v = float(r @ fr.t_v) / s_v
    g = float(np.exp(-0.5 * (u * u + v * v)))
    if g < G_MIN:
        return None
    return Hit(t, u, v, g)


# ----------------------------------------------------------------------------
# preprocessing


@dataclass
class _Prepared:
    p: np.ndarray
    R: np.ndarray
    s: np.ndarray
    alpha: np.ndarray
    color: np.ndarray
    feature: np.ndarray
    dirs: np.ndarray
    zfac: np.ndarray
    center: np.ndarray
    tile_offsets: np.ndarray
    tile_ids: np.ndarray
    tiles_x: int
    geo: np.ndarray
    normal: np.ndarray


def _prepare(scene: Scene, camera: Camera) -> _Prepared:
    n = len(scene)
    R = quat_to_rotmat(scene.q) if n else np.zeros((0, 3, 3))
    s = np.exp(scene.log_s)
    dirs, zfac = pixel_rays(camera)
    k = camera.intrinsics
    tiles_x = (k.width + TILE - 1) // TILE
    tiles_y = (k.height + TILE - 1) // TILE
    bbox = _splat_bboxes(scene.p, R, s, camera.R, camera.t, k.fx, k.fy, k.cx, k.cy, k.width, k.height,
                         camera.near)
    # binning in camera-depth order makes per-pixel hit lists nearly sorted already
    zc = scene.p @ camera.R[2] + camera.t[2] if n else np.zeros(0)
    offsets, ids = _bin_tiles(bbox, np.argsort(zc, kind="stable"), tiles_x, tiles_y)
    feature = scene.feature if scene.feature.shape[1] else np.zeros((n, 1))
    # per-splat ray-independent terms: t* = num / (d.t_z), u = t* (d.t_u/s_u) - w.t_u/s_u
    w = scene.p - camera.center
    tu, tv, tz = R[:, :, 0], R[:, :, 1], R[:, :, 2]
    num = np.sum(w * tz, axis=1)
    au = tu / s[:, :1]
    av = tv / s[:, 1:]
    geo = np.concatenate([num[:, None], tz, au, av, np.sum(w * au, axis=1)[:, None],
                          np.sum(w * av, axis=1)[:, None]], axis=1)
    normal = np.where((num > 0)[:, None], -tz, tz)
    return _Prepared(
        scene.p, R, s, sigmoid(scene.opacity_logit), np.ascontiguousarray(scene.color),
        np.ascontiguousarray(feature), dirs, zfac, camera.center, offsets, ids, tiles_x,
        np.ascontiguousarray(geo), np.ascontiguousarray(normal),
    )


@nb.njit(cache=True)
def _splat_bboxes(p, R, s, Rc, tc, fx, fy, cx, cy, width, height, near):
    n = p.shape[0]
    out = np.full((n, 4), -1, dtype=np.int64)  # xmin, xmax, ymin, ymax (inclusive pixel indices)
    for i in range(n):
        xmin = 1e30
        xmax = -1e30
        ymin = 1e30
        ymax = -1e30
        full = False
        behind = 0
        for a in (-3.0, 3.0):
            for b in (-3.0, 3.0):
                x = np.empty(3)
                for c in range(3):
                    x[c] = p[i, c] + a * s[i, 0] * R[i, c, 0] + b * s[i, 1] * R[i, c, 1]
                xc0 = Rc[0, 0] * x[0] + Rc[0, 1] * x[1] + Rc[0, 2] * x[2] + tc[0]
                xc1 = Rc[1, 0] * x[0] + Rc[1, 1] * x[1] + Rc[1, 2] * x[2] + tc[1]
                xc2 = Rc[2, 0] * x[0] + Rc[2, 1] * x[1] + Rc[2, 2] * x[2] + tc[2]
                if xc2 <= 1e-9:
                    behind += 1
                    full = True
                    continue
                u = fx * xc0 / xc2 + cx
                v = fy * xc1 / xc2 + cy
                xmin = min(xmin, u)
                xmax = max(xmax, u)
                ymin = min(ymin, v)
                ymax = max(ymax, v)
        if behind == 4:
            # every corner behind the camera: the whole disk is behind, since it lies inside the square
            continue
        if full:
            out[i, 0] = 0
            out[i, 1] = width - 1
            out[i, 2] = 0
            out[i, 3] = height - 1
            continue
        # pixel index k covers [k, k+1); centers at k+0.5
        x0 = int(np.floor(xmin - 0.5))
        x1 = int(np.ceil(xmax - 0.5))
        y0 = int(np.floor(ymin - 0.5))
        y1 = int(np.ceil(ymax - 0.5))
        x0 = max(x0, 0)
        y0 = max(y0, 0)
        x1 = min(x1, width - 1)
        y1 = min(y1, height - 1)
        if x0 > x1 or y0 > y1:
            continue
        out[i, 0] = x0
        out[i, 1] = x1
        out[i, 2] = y0
        out[i, 3] = y1
    return out


@nb.njit(cache=True)
def _bin_tiles(bbox, order, tiles_x, tiles_y):
    n = bbox.shape[0]
    counts = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    for i in range(n):
        if bbox[i, 0] < 0:
            continue
        for ty in range(bbox[i, 2] // TILE, bbox[i, 3] // TILE + 1):
            for tx in range(bbox[i, 0] // TILE, bbox[i, 1] // TILE + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    ids = np.empty(offsets[-1], dtype=np.int32)
    fill = offsets[:-1].copy()
    for oi in range(n):
        i = order[oi]
        if bbox[i, 0] < 0:
            continue
        for ty in range(bbox[i, 2] // TILE, bbox[i, 3] // TILE + 1):
            for tx in range(bbox[i, 0] // TILE, bbox[i, 1] // TILE + 1):
                k = ty * tiles_x + tx
                ids[fill[k]] = i
                fill[k] += 1
    return offsets, ids


# ----------------------------------------------------------------------------
# forward


@nb.njit(cache=True)
def _sort_hits(ht, hid, order, n):
    for k in range(n):
        order[k] = k
    # insertion sort by (t, id); near-linear because candidates arrive roughly depth-ordered
    for k in range(1, n):
        cur = order[k]
        j = k - 1
        while j >= 0 and (ht[order[j]] > ht[cur] or (ht[order[j]] == ht[cur] and hid[order[j]] > hid[cur])):
            order[j + 1] = order[j]
            j -= 1
        order[j + 1] = cur


@nb.njit(parallel=True, cache=True)
def _forward_kernel(geo, nrm, alpha, color, feature, dirs, zfac, near, far, bg,
                    tile_offsets, tile_ids, tiles_x, cap,
                    out_color, out_feat, out_depth, out_normal, out_acc, out_T,
                    seg_n, seg_id, seg_w, seg_t, seg_u, seg_v, seg_g, seg_a):
    H = dirs.shape[0]
    W = dirs.shape[1]
    C = feature.shape[1]
    n_tiles = tile_offsets.shape[0] - 1
    max_cand = 1
    for k in range(n_tiles):
        max_cand = max(max_cand, tile_offsets[k + 1] - tile_offsets[k])
    for tile in nb.prange(n_tiles):
        k0 = tile_offsets[tile]
        nc = tile_offsets[tile + 1] - k0
        # gather this tile's candidates into contiguous rows so the intersection loop vectorises
        loc = np.empty((12, nc))
        for j in range(nc):
            i = tile_ids[k0 + j]
            for c in range(12):
                loc[c, j] = geo[i, c]
        qq = np.empty(nc)
        tt = np.empty(nc)
        uu = np.empty(nc)
        vv = np.empty(nc)
        dd = np.empty(nc)
        ht = np.empty(max(nc, 1))
        hu = np.empty(max(nc, 1))
        hv = np.empty(max(nc, 1))
        hg = np.empty(max(nc, 1))
        hid = np.empty(max(nc, 1), dtype=np.int32)
        order = np.empty(max(nc, 1), dtype=np.int64)
        ty = tile // tiles_x
        tx = tile % tiles_x
        for row in range(ty * TILE, min(ty * TILE + TILE, H)):
            for col in range(tx * TILE, min(tx * TILE + TILE, W)):
                d0 = dirs[row, col, 0]
                d1 = dirs[row, col, 1]
                d2 = dirs[row, col, 2]
                for j in range(nc):
                    den = d0 * loc[1, j] + d1 * loc[2, j] + d2 * loc[3, j]
                    du = d0 * loc[4, j] + d1 * loc[5, j] + d2 * loc[6, j]
                    dv = d0 * loc[7, j] + d1 * loc[8, j] + d2 * loc[9, j]
                    t = loc[0, j] / den
                    u = t * du - loc[10, j]
                    v = t * dv - loc[11, j]
                    qq[j] = u * u + v * v
                    tt[j] = t
                    uu[j] = u
                    vv[j] = v
                    dd[j] = den
                nh = 0
                for j in range(nc):
                    if qq[j] <= 9.0000001 and abs(dd[j]) >= PARALLEL_EPS and tt[j] >= near and tt[j] <= far:
                        g = np.exp(-0.5 * qq[j])
                        if g >= G_MIN:
                            ht[nh] = tt[j]
                            hu[nh] = uu[j]
                            hv[nh] = vv[j]
                            hg[nh] = g
                            hid[nh] = tile_ids[k0 + j]
                            nh += 1
                _sort_hits(ht, hid, order, nh)
                T = 1.0
                acc = 0.0
                dnum = 0.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                n0 = 0.0
                n1 = 0.0
                n2 = 0.0
                for c in range(C):
                    out_feat[row, col, c] = 0.0
                m = 0
                for kk in range(nh):
                    h = order[kk]
                    i = hid[h]
                    a = alpha[i] * hg[h]
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    wgt = a * T
                    acc += wgt
                    dnum += wgt * ht[h]
                    c0 += wgt * color[i, 0]
                    c1 += wgt * color[i, 1]
                    c2 += wgt * color[i, 2]
                    for c in range(C):
                        out_feat[row, col, c] += wgt * feature[i, c]
                    n0 += wgt * nrm[i, 0]
                    n1 += wgt * nrm[i, 1]
                    n2 += wgt * nrm[i, 2]
                    seg_id[row, col, m] = i
                    seg_w[row, col, m] = wgt
                    seg_t[row, col, m] = ht[h]
                    seg_u[row, col, m] = hu[h]
                    seg_v[row, col, m] = hv[h]
                    seg_g[row, col, m] = hg[h]
                    seg_a[row, col, m] = a
                    m += 1
                    T = T * (1.0 - a)
                    if T < T_MIN or m >= cap:
                        break
                seg_n[row, col] = m
                out_acc[row, col] = acc
                out_T[row, col] = T
                out_color[row, col, 0] = c0 + (1.0 - acc) * bg[0]
                out_color[row, col, 1] = c1 + (1.0 - acc) * bg[1]
                out_color[row, col, 2] = c2 + (1.0 - acc) * bg[2]
                out_depth[row, col] = dnum * zfac[row, col] / max(acc, ACC_EPS)
                out_normal[row, col, 0] = n0
                out_normal[row, col, 1] = n1
                out_normal[row, col, 2] = n2


def render(scene: Scene, camera: Camera, background=(0.0, 0.0, 0.0), cap: int = SEGMENT_CAP) -> RenderOutput:
    """Composite every splat into ``camera``; see the module docstring for conventions."""
    prep = _prepare(scene, camera)
    H, W = camera.height, camera.width
    C = prep.feature.shape[1]
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    color = np.empty((H, W, 3))
    feat = np.empty((H, W, C))
    depth = np.empty((H, W))
    normal = np.empty((H, W, 3))
    acc = np.empty((H, W))
    T = np.empty((H, W))
    seg = RaySegments(
        np.zeros((H, W), dtype=np.int32), np.empty((H, W, cap), dtype=np.int32),
        *(np.empty((H, W, cap)) for _ in range(6)),
    )
    _forward_kernel(
        prep.geo, prep.normal, prep.alpha, prep.color, prep.feature, prep.dirs, prep.zfac,
        camera.near, camera.far, bg, prep.tile_offsets, prep.tile_ids, prep.tiles_x, cap,
        color, feat, depth, normal, acc, T,
        seg.count, seg.ids, seg.weight, seg.t, seg.u, seg.v, seg.g, seg.alpha,
    )
    if scene.feature.shape[1] == 0:
        feat = feat[..., :0]
    return RenderOutput(color, feat, depth, normal, acc, T, seg, bg)


# ----------------------------------------------------------------------------
# backward


@dataclass
class Upstream:
    """Gradient of a scalar loss w.r.t. each render buffer; ``None`` means zero."""

    color: np.ndarray | None = None
    feature: np.ndarray | None = None
    depth: np.ndarray | None = None
    normal: np.ndarray | None = None
    acc: np.ndarray | None = None
    seg_weight: np.ndarray | None = None  # (H, W, cap), w.r.t. segment omega
    seg_t: np.ndarray | None = None  # (H, W, cap), w.r.t. segment t*

    def __add__(self, other: "Upstream") -> "Upstream":
        def add(a, b):
            if a is None:
                return b
            if b is None:
                return a
            return a + b

        return Upstream(*(add(getattr(self, f), getattr(other, f)) for f in self.__dataclass_fields__))

    def scaled(self, k: float) -> "Upstream":
        return Upstream(*(None if getattr(self, f) is None else getattr(self, f) * k
                          for f in self.__dataclass_fields__))


@nb.njit(parallel=True, cache=True)
def _backward_kernel(p, R, s, alpha, color, feature, dirs, zfac, center, bg,
                     out_depth, out_acc, seg_n, seg_id, seg_w, seg_t, seg_u, seg_v, seg_g, seg_a,
                     g_color, g_feat, g_depth, g_normal, g_acc, g_segw, g_segt,
                     offsets, contrib):
    H = dirs.shape[0]
    W = dirs.shape[1]
    C = feature.shape[1]
    for row in nb.prange(H):
        gw = np.empty(seg_id.shape[2])
        for col in range(W):
            n = seg_n[row, col]
            if n == 0:
                continue
            base = offsets[row * W + col]
            acc = out_acc[row, col]
            amax = max(acc, ACC_EPS)
            dmask = 1.0 if acc > ACC_EPS else 0.0
            depth = out_depth[row, col]
            zf = zfac[row, col]
            d0 = dirs[row, col, 0]
            d1 = dirs[row, col, 1]
            d2 = dirs[row, col, 2]
            gd = g_depth[row, col]
            # total derivative w.r.t. each omega_m
            for m in range(n):
                i = seg_id[row, col, m]
                val = g_acc[row, col] + g_segw[row, col, m]
                for c in range(3):
                    val += g_color[row, col, c] * (color[i, c] - bg[c])
                for c in range(C):
                    val += g_feat[row, col, c] * feature[i, c]
                val += gd * (seg_t[row, col, m] * zf - depth * dmask) / amax
                sgn = 1.0
                if (p[i, 0] - center[0]) * R[i, 0, 2] + (p[i, 1] - center[1]) * R[i, 1, 2] \
                        + (p[i, 2] - center[2]) * R[i, 2, 2] > 0:
                    sgn = -1.0
                for c in range(3):
                    val += g_normal[row, col, c] * sgn * R[i, c, 2]
                gw[m] = val
            # reverse sweep through the transmittance product
            T = 1.0
            for m in range(n):
                T *= 1.0 - seg_a[row, col, m]
            suffix = 0.0
            for m in range(n - 1, -1, -1):
                a = seg_a[row, col, m]
                T = T / (1.0 - a)  # transmittance before segment m
                w = seg_w[row, col, m]
                ga = gw[m] * T - suffix / (1.0 - a)
                suffix += gw[m] * w
                i = seg_id[row, col, m]
                g = seg_g[row, col, m]
                u = seg_u[row, col, m]
                v = seg_v[row, col, m]
                t = seg_t[row, col, m]
                out = contrib[base + m]
                for k in range(N_PARTIALS):
                    out[k] = 0.0
                al = alpha[i]
                sgn = 1.0
                w0 = p[i, 0] - center[0]
                w1 = p[i, 1] - center[1]
                w2 = p[i, 2] - center[2]
                if w0 * R[i, 0, 2] + w1 * R[i, 1, 2] + w2 * R[i, 2, 2] > 0:
                    sgn = -1.0
                # normal is a direct function of t_z
                for c in range(3):
                    out[9 + c] += sgn * g_normal[row, col, c] * w
                gt = gd * w * zf / amax + g_segt[row, col, m]
                gu = 0.0
                gv = 0.0
                if al * g < ALPHA_MAX:
                    out[14] = ga * g * al * (1.0 - al)
                    gg = ga * al
                    gu = -gg * g * u
                    gv = -gg * g * v
                su = s[i, 0]
                sv = s[i, 1]
                dtu = d0 * R[i, 0, 0] + d1 * R[i, 1, 0] + d2 * R[i, 2, 0]
                dtv = d0 * R[i, 0, 1] + d1 * R[i, 1, 1] + d2 * R[i, 2, 1]
                den = d0 * R[i, 0, 2] + d1 * R[i, 1, 2] + d2 * R[i, 2, 2]
                gtt = gt + gu * dtu / su + gv * dtv / sv
                r0 = t * d0 - w0
                r1 = t * d1 - w1
                r2 = t * d2 - w2
                for c in range(3):
                    rc = r0 if c == 0 else (r1 if c == 1 else r2)
                    out[c] = gtt * R[i, c, 2] / den - gu * R[i, c, 0] / su - gv * R[i, c, 1] / sv
                    out[3 + c] = gu * rc / su
                    out[6 + c] = gv * rc / sv
                    out[9 + c] += -gtt * rc / den
                out[12] = -gu * u
                out[13] = -gv * v


@nb.njit(cache=True)
def _scatter(seg_n, seg_id, offsets, contrib, out):
    H = seg_n.shape[0]
    W = seg_n.shape[1]
    for row in range(H):
        for col in range(W):
            base = offsets[row * W + col]
            for m in range(seg_n[row, col]):
                i = seg_id[row, col, m]
                for k in range(N_PARTIALS):
                    out[i, k] += contrib[base + m, k]


def _zeros_or(a, shape):
    return np.zeros(shape) if a is None else np.ascontiguousarray(a, dtype=np.float64)


def render_backward(scene: Scene, camera: Camera, out: RenderOutput, upstream: Upstream) -> GradientBuffer:
    """Gradient of a scalar loss w.r.t. the learnable parameters of every splat.

    Per-segment partials are computed per pixel in parallel, then reduced into
    splats serially in a fixed pixel order, so the result does not depend on
    the worker count.
    """
    n = len(scene)
    if n == 0:
        return GradientBuffer.zeros(0)
    prep = _prepare(scene, camera)
    H, W = camera.height, camera.width
    seg = out.ray_segments
    cap = seg.ids.shape[2]
    C = prep.feature.shape[1]
    counts = seg.count.reshape(-1).astype(np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    contrib = np.empty((offsets[-1], N_PARTIALS))
    g_feat = upstream.feature
    if g_feat is not None and g_feat.shape[-1] != C:
        g_feat = None
    _backward_kernel(
        prep.p, prep.R, prep.s, prep.alpha, prep.color, prep.feature, prep.dirs, prep.zfac, prep.center,
        out.background, out.depth, out.acc,
        seg.count, seg.ids, seg.weight, seg.t, seg.u, seg.v, seg.g, seg.alpha,
        _zeros_or(upstream.color, (H, W, 3)), _zeros_or(g_feat, (H, W, C)),
        _zeros_or(upstream.depth, (H, W)), _zeros_or(upstream.normal, (H, W, 3)),
        _zeros_or(upstream.acc, (H, W)), _zeros_or(upstream.seg_weight, (H, W, cap)),
        _zeros_or(upstream.seg_t, (H, W, cap)), offsets, contrib,
    )
    partial = np.zeros((n, N_PARTIALS))
    _scatter(seg.count, seg.ids, offsets, contrib, partial)
    dR = np.stack([partial[:, 3:6], partial[:, 6:9], partial[:, 9:12]], axis=-1)
    return GradientBuffer(
        partial[:, 0:3].copy(), rotmat_grad_to_quat(scene.q, dR), partial[:, 12:14].copy(), partial[:, 14].copy()
    )
