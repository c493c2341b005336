"""Training losses on rendered buffers and the weighted total objective.

Every loss takes ``grad=True`` to also return its gradient w.r.t. the
rendered inputs, which the renderer's backward pass consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numba as nb
import numpy as np
from scipy import ndimage

from .errors import NonFinite, ShapeMismatch
from .geom import Camera
from .render import RaySegments

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    distortion: float = 1000.0
    normal: float = 0.05
    dr: float = 1.0
    feature: float = 0.2

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")


@dataclass
class LossReport:
    rgb: float = 0.0
    distortion: float = 0.0
    normal: float = 0.0
    fea: float = 0.0
    df: float = 0.0
    dn: float = 0.0
    total: float = 0.0


def _gaussian_kernel() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    k = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return k / k.sum()


_KERNEL = _gaussian_kernel()


def _blur(img: np.ndarray) -> np.ndarray:
    # zero padding, odd symmetric kernel: the operator is its own adjoint
    out = ndimage.correlate1d(img, _KERNEL, axis=0, mode="constant")
    return ndimage.correlate1d(out, _KERNEL, axis=1, mode="constant")


def ssim(x: np.ndarray, y: np.ndarray, grad: bool = False):
    """Mean SSIM over all pixels and channels; gradient is w.r.t. ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mu_x = _blur(x)
    mu_y = _blur(y)
    sxx = _blur(x * x) - mu_x**2
    syy = _blur(y * y) - mu_y**2
    sxy = _blur(x * y) - mu_x * mu_y
    n1 = 2 * mu_x * mu_y + SSIM_C1
    n2 = 2 * sxy + SSIM_C2
    d1 = mu_x**2 + mu_y**2 + SSIM_C1
    d2 = sxx + syy + SSIM_C2
    smap = n1 * n2 / (d1 * d2)
    val = float(smap.mean())
    if not grad:
        return val
    scale = 1.0 / smap.size
    g_mu = smap * (2 * mu_y / n1 - 2 * mu_y / n2 - 2 * mu_x / d1 + 2 * mu_x / d2) * scale
    g_xx = -smap / d2 * scale
    g_xy = 2 * smap / n2 * scale
    # chain through mu_x = B x, Cxx = B x^2, Cxy = B xy (sxx and sxy subtract mu terms already folded in)
    dx = _blur(g_mu) + 2 * x * _blur(g_xx) + y * _blur(g_xy)
    return val, dx


def loss_rgb(rendered: np.ndarray, target: np.ndarray, l1_weight: float = 0.8, grad: bool = False):
    """``l1_weight * L1 + (1 - l1_weight) * (1 - SSIM)``."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ShapeMismatch(f"rendered {rendered.shape} vs target {target.shape}")
    diff = rendered - target
    l1 = float(np.abs(diff).mean())
    if not grad:
        return l1_weight * l1 + (1 - l1_weight) * (1 - ssim(rendered, target))
    s, ds = ssim(rendered, target, grad=True)
    val = l1_weight * l1 + (1 - l1_weight) * (1 - s)
    g = l1_weight * np.sign(diff) / diff.size - (1 - l1_weight) * ds
    return val, g


@nb.njit(cache=True)
def _distortion_kernel(count, w, t, gw, gt):
    H, W = count.shape
    total = 0.0
    for r in range(H):
        for c in range(W):
            n = count[r, c]
            if n < 2:
                for m in range(n):
                    gw[r, c, m] = 0.0
                    gt[r, c, m] = 0.0
                continue
            a_all = 0.0
            d_all = 0.0
            for m in range(n):
                a_all += w[r, c, m]
                d_all += w[r, c, m] * t[r, c, m]
            a_lo = 0.0
            d_lo = 0.0
            val = 0.0
            for m in range(n):
                wm = w[r, c, m]
                tm = t[r, c, m]
                a_hi = a_all - a_lo - wm
                d_hi = d_all - d_lo - wm * tm
                lo = tm * a_lo - d_lo
                hi = d_hi - tm * a_hi
                val += wm * (lo + hi)
                gw[r, c, m] = 2.0 * (lo + hi)
                gt[r, c, m] = 2.0 * wm * (a_lo - a_hi)
                a_lo += wm
                d_lo += wm * tm
            total += val
    return total


def loss_distortion(segments: RaySegments, grad: bool = False):
    """Mean over pixels of ``sum_{m,o} w_m w_o |t_m - t_o|`` (segments sorted by t)."""
    H, W = segments.count.shape
    gw = np.zeros(segments.weight.shape)
    gt = np.zeros(segments.t.shape)
    total = _distortion_kernel(segments.count, segments.weight, segments.t, gw, gt)
    n = H * W
    val = total / n
    if not grad:
        return val
    return val, gw / n, gt / n


# normalised depth used by the reference 2D-disk rasterizer for its distortion term
NDC_NEAR = 0.2
NDC_FAR = 100.0


def ndc_depth(t: np.ndarray, near: float = NDC_NEAR, far: float = NDC_FAR) -> tuple[np.ndarray, np.ndarray]:
    """``m(t) = far / (far - near) * (1 - near / t)`` and its derivative ``dm/dt``."""
    t = np.maximum(np.asarray(t, dtype=np.float64), 1e-9)
    k = far / (far - near)
    return k * (1.0 - near / t), k * near / (t * t)


def _unit(v: np.ndarray, eps: float = 1e-12):
    norm = np.linalg.norm(v, axis=-1)
    ok = norm > eps
    return v / np.where(ok, norm, 1.0)[..., None], norm, ok


def depth_points(depth: np.ndarray, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """World points of a z-depth map and their derivative w.r.t. depth (H, W, 3)."""
    k = camera.intrinsics
    rows, cols = np.mgrid[0:k.height, 0:k.width]
    d_cam = np.stack([(cols + 0.5 - k.cx) / k.fx, (rows + 0.5 - k.cy) / k.fy, np.ones((k.height, k.width))],
                     axis=-1)
    ray_z = d_cam @ camera.R
    return camera.center + depth[..., None] * ray_z, ray_z


def depth_normal_map(depth: np.ndarray, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Unit camera-facing normals from central differences of the back-projected depth.

    Returns ``(normals (H, W, 3), valid (H, W))``; border pixels are invalid.
    """
    P, _ = depth_points(np.asarray(depth, dtype=np.float64), camera)
    H, W = depth.shape
    raw = np.zeros((H, W, 3))
    raw[1:-1, 1:-1] = np.cross(P[2:, 1:-1] - P[:-2, 1:-1], P[1:-1, 2:] - P[1:-1, :-2])
    n, _, ok = _unit(raw)
    ok[[0, -1], :] = False
    ok[:, [0, -1]] = False
    return n, ok


def _coverage_mask(acc: np.ndarray, threshold: float) -> np.ndarray:
    covered = acc > threshold
    m = np.zeros_like(covered)
    m[1:-1, 1:-1] = (covered[1:-1, 1:-1] & covered[2:, 1:-1] & covered[:-2, 1:-1]
                     & covered[1:-1, 2:] & covered[1:-1, :-2])
    return m


def loss_normal_consistency(normal: np.ndarray, depth: np.ndarray, camera: Camera, acc: np.ndarray,
                            threshold: float = 0.5, grad: bool = False):
    """Mean of ``1 - n_rendered . n_depth`` over pixels whose 4-neighbourhood is covered."""
    normal = np.asarray(normal, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    P, ray_z = depth_points(depth, camera)
    dx = np.zeros((H, W, 3))
    dy = np.zeros((H, W, 3))
    dx[1:-1, 1:-1] = P[1:-1, 2:] - P[1:-1, :-2]
    dy[1:-1, 1:-1] = P[2:, 1:-1] - P[:-2, 1:-1]
    raw = np.cross(dy, dx)
    N, nraw, ok_raw = _unit(raw)
    nh, nlen, ok_n = _unit(normal)
    mask = _coverage_mask(acc, threshold) & ok_raw & ok_n
    count = int(mask.sum())
    if count == 0:
        return (0.0, np.zeros_like(normal), np.zeros_like(depth)) if grad else 0.0
    cos = np.sum(nh * N, axis=-1)
    val = float(np.sum(np.where(mask, 1.0 - cos, 0.0)) / count)
    if not grad:
        return val
    m = mask[..., None] / count
    g_normal = m * (-N + nh * cos[..., None]) / np.where(ok_n, nlen, 1.0)[..., None]
    g_raw = m * (-nh + N * cos[..., None]) / np.where(ok_raw, nraw, 1.0)[..., None]
    # raw = dy x dx
    g_dy = np.cross(dx, g_raw)
    g_dx = np.cross(g_raw, dy)
    gP = np.zeros((H, W, 3))
    gP[1:-1, 2:] += g_dx[1:-1, 1:-1]
    gP[1:-1, :-2] -= g_dx[1:-1, 1:-1]
    gP[2:, 1:-1] += g_dy[1:-1, 1:-1]
    gP[:-2, 1:-1] -= g_dy[1:-1, 1:-1]
    g_depth = np.sum(gP * ray_z, axis=-1)
    return val, g_normal, g_depth


def loss_feature(rendered: np.ndarray, target: np.ndarray, acc: np.ndarray, threshold: float = 0.5,
                 grad: bool = False):
    """Mean cosine distance between rendered and target features over covered pixels."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ShapeMismatch(f"rendered {rendered.shape} vs target {target.shape}")
    fh, lh, okh = _unit(rendered)
    ft, _, okt = _unit(target)
    mask = (acc > threshold) & okh & okt
    count = int(mask.sum())
    if count == 0:
        return (0.0, np.zeros_like(rendered)) if grad else 0.0
    cos = np.sum(fh * ft, axis=-1)
    val = float(np.sum(np.where(mask, 1.0 - cos, 0.0)) / count)
    if not grad:
        return val
    g = -(mask[..., None] / count) * (ft - fh * cos[..., None]) / np.where(okh, lh, 1.0)[..., None]
    return val, g


def total(parts: LossReport, weights: LossWeights) -> LossReport:
    """Weighted objective; raises :class:`NonFinite` on any NaN/Inf part."""
    for name in ("rgb", "distortion", "normal", "fea", "df", "dn"):
        v = getattr(parts, name)
        if not math.isfinite(v):
            raise NonFinite(f"loss term {name} is {v}")
    tot = (parts.rgb + weights.distortion * parts.distortion + weights.normal * parts.normal
           + weights.dr * (parts.df + parts.dn) + weights.feature * parts.fea)
    return LossReport(parts.rgb, parts.distortion, parts.normal, parts.fea, parts.df, parts.dn, tot)
