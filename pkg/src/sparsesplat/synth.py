"""Synthetic scenes and the pseudo-MVS surrogate.

Scenes are analytic (plane, sphere, stacked boxes) with a solid procedural
texture, ray traced with Lambertian shading on a black background. The
pseudo-MVS surrogate degrades exact depth with multiplicative noise, blob
dropout and far outliers, and a fixed bank of 8 filters stands in for the
learned feature pyramid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geom import Camera, Intrinsics, Pose, back_project_points, pixel_rays

LIGHT_DIR = np.array([0.25, 0.55, 0.8]) / np.linalg.norm([0.25, 0.55, 0.8])
AMBIENT = 0.35
PLANE_HALF = 0.7
BOXES = (
    (np.array([-0.55, -0.55, -0.45]), np.array([0.35, 0.05, 0.45])),
    (np.array([-0.25, 0.05, -0.25]), np.array([0.35, 0.55, 0.25])),
)


@dataclass
class SyntheticScene:
    kind: str
    cameras: list[Camera]
    images: list[np.ndarray]  # (H, W, 3) in [0, 1]
    depths: list[np.ndarray]  # (H, W) z-depth, 0 where the ray misses
    mesh_vertices: np.ndarray
    mesh_faces: np.ndarray
    gt_points: np.ndarray


# ----------------------------------------------------------------------------
# analytic surfaces: each returns (t, normal, hit) for unit rays


def _trace_sphere(origin, dirs, radius=1.0):
    b = dirs @ origin
    c = origin @ origin - radius * radius
    disc = b * b - c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t = -b - sq
    hit &= t > 0
    pts = origin + t[..., None] * dirs
    return np.where(hit, t, np.inf), pts / radius, hit


def _trace_plane(origin, dirs):
    dz = dirs[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origin[2] / dz
    pts = origin + t[..., None] * dirs
    hit = (t > 0) & (np.abs(pts[..., 0]) <= PLANE_HALF) & (np.abs(pts[..., 1]) <= PLANE_HALF)
    n = np.zeros_like(pts)
    n[..., 2] = 1.0
    return np.where(hit, t, np.inf), n, hit


def _trace_box(origin, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    tn = tmin.max(axis=-1)
    tf = tmax.min(axis=-1)
    hit = (tn <= tf) & (tn > 0)
    axis = tmin.argmax(axis=-1)
    n = np.zeros(dirs.shape)
    sign = -np.sign(np.take_along_axis(dirs, axis[..., None], -1)[..., 0])
    np.put_along_axis(n, axis[..., None], sign[..., None], -1)
    return np.where(hit, tn, np.inf), n, hit


def trace(kind: str, origin: np.ndarray, dirs: np.ndarray):
    """Closest analytic intersection: ``(t, normal, hit)`` per ray."""
    if kind == "sphere":
        return _trace_sphere(origin, dirs)
    if kind == "plane":
        return _trace_plane(origin, dirs)
    if kind == "boxes":
        best_t = np.full(dirs.shape[:-1], np.inf)
        best_n = np.zeros(dirs.shape)
        for lo, hi in BOXES:
            t, n, hit = _trace_box(origin, dirs, lo, hi)
            closer = hit & (t < best_t)
            best_t = np.where(closer, t, best_t)
            best_n[closer] = n[closer]
        return best_t, best_n, np.isfinite(best_t)
    raise ValueError(f"unknown scene kind {kind!r}")


# ----------------------------------------------------------------------------
# procedural textures (solid, so every view sees the same albedo)


def _checker(pts: np.ndarray) -> np.ndarray:
    cells = np.floor(pts * 4.0).astype(np.int64).sum(axis=-1) & 1
    dark = np.array([0.15, 0.25, 0.6])
    light = np.array([0.95, 0.8, 0.35])
    return np.where(cells[..., None] == 1, light, dark)


def _value_noise(pts: np.ndarray, seed: int = 7, octaves: int = 4, base: float = 3.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    size = 64
    lattice = rng.uniform(0.0, 1.0, (octaves, 3, size, size, size))
    out = np.zeros(pts.shape[:-1] + (3,))
    amp_total = 0.0
    for o in range(octaves):
        freq = base * 2**o
        amp = 0.5**o
        x = pts * freq + 17.0
        i0 = np.floor(x).astype(np.int64)
        f = x - i0
        f = f * f * (3.0 - 2.0 * f)
        for c in range(3):
            acc = 0.0
            for dx in (0, 1):
                for dy in (0, 1):
                    for dz in (0, 1):
                        w = ((f[..., 0] if dx else 1 - f[..., 0]) * (f[..., 1] if dy else 1 - f[..., 1])
                             * (f[..., 2] if dz else 1 - f[..., 2]))
                        acc = acc + w * lattice[o, c, (i0[..., 0] + dx) % size, (i0[..., 1] + dy) % size,
                                                (i0[..., 2] + dz) % size]
            out[..., c] += amp * acc
        amp_total += amp
    out /= amp_total
    lo, hi = out.min(), out.max()
    return 0.1 + 0.85 * (out - lo) / max(hi - lo, 1e-9)


def albedo(texture: str, pts: np.ndarray) -> np.ndarray:
    if texture == "checker":
        return _checker(pts)
    if texture == "perlin":
        return _value_noise(pts)
    raise ValueError(f"unknown texture {texture!r}")


# ----------------------------------------------------------------------------


def arc_cameras(n_views: int, resolution: int, distance: float = 3.0, spread_deg: float = 25.0,
                elevation_deg: float = 12.0) -> list[Camera]:
    """Cameras on a horizontal arc around the origin, all looking at it."""
    f = 1.2 * resolution
    intr = Intrinsics(f, f, resolution / 2.0, resolution / 2.0, resolution, resolution)
    az = np.deg2rad(np.linspace(-spread_deg, spread_deg, n_views)) if n_views > 1 else np.zeros(1)
    el = np.deg2rad(elevation_deg)
    cams = []
    for a in az:
        eye = distance * np.array([np.sin(a) * np.cos(el), np.sin(el), np.cos(a) * np.cos(el)])
        cams.append(Camera(intr, Pose.look_at(eye, np.zeros(3)), near=0.1, far=2.0 * distance + 2.0))
    return cams


def _shade(kind: str, texture: str, origin, dirs):
    t, n, hit = trace(kind, origin, dirs)
    pts = origin + np.where(hit, t, 0.0)[..., None] * dirs
    lam = np.clip(n @ LIGHT_DIR, 0.0, None)
    rgb = albedo(texture, pts) * (AMBIENT + (1.0 - AMBIENT) * lam)[..., None]
    return np.where(hit[..., None], rgb, 0.0), t, hit


def render_view(kind: str, texture: str, camera: Camera, supersample: int = 2):
    """Ray-trace one view: ``(image, z-depth)``; depth is 0 where the ray misses."""
    k = camera.intrinsics
    ss = supersample
    offs = (np.arange(ss) + 0.5) / ss
    xs = (np.arange(k.width)[:, None] + offs[None, :]).reshape(-1)
    ys = (np.arange(k.height)[:, None] + offs[None, :]).reshape(-1)
    u, v = np.meshgrid(xs, ys)
    d_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    rgb, _, _ = _shade(kind, texture, camera.center, d_cam @ camera.R)
    img = rgb.reshape(k.height, ss, k.width, ss, 3).mean(axis=(1, 3))
    dirs, zfac = pixel_rays(camera)
    t, _, hit = trace(kind, camera.center, dirs)
    depth = np.where(hit, t * zfac, 0.0)
    return np.clip(img, 0.0, 1.0), depth


def gt_mesh(kind: str, resolution: int = 48) -> tuple[np.ndarray, np.ndarray]:
    if kind == "sphere":
        th = np.linspace(0, np.pi, resolution + 1)
        ph = np.linspace(0, 2 * np.pi, 2 * resolution, endpoint=False)
        T, P = np.meshgrid(th[1:-1], ph, indexing="ij")
        verts = np.stack([np.sin(T) * np.cos(P), np.cos(T), np.sin(T) * np.sin(P)], axis=-1).reshape(-1, 3)
        verts = np.concatenate([[[0, 1, 0]], verts, [[0, -1, 0]]])
        nph = len(ph)
        faces = []
        for j in range(nph):
            faces.append([0, 1 + (j + 1) % nph, 1 + j])
        for i in range(resolution - 2):
            for j in range(nph):
                a = 1 + i * nph + j
                b = 1 + i * nph + (j + 1) % nph
                c = a + nph
                d = b + nph
                faces += [[a, b, d], [a, d, c]]
        last = len(verts) - 1
        off = 1 + (resolution - 2) * nph
        for j in range(nph):
            faces.append([off + j, off + (j + 1) % nph, last])
        return verts, np.array(faces, dtype=np.int64)
    if kind == "plane":
        h = PLANE_HALF
        return np.array([[-h, -h, 0], [h, -h, 0], [h, h, 0], [-h, h, 0]], float), np.array([[0, 1, 2], [0, 2, 3]])
    if kind == "boxes":
        verts, faces = [], []
        quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]]
        for lo, hi in BOXES:
            base = len(verts)
            for c in range(8):
                verts.append([hi[0] if c & 1 else lo[0], hi[1] if c & 2 else lo[1], hi[2] if c & 4 else lo[2]])
            for a, b, c, d in quads:
                faces += [[base + a, base + b, base + c], [base + a, base + c, base + d]]
        return np.array(verts, float), np.array(faces, dtype=np.int64)
    raise ValueError(f"unknown scene kind {kind!r}")


def visible_points(kind: str, cameras: list[Camera], supersample: int = 2) -> np.ndarray:
    """Exact surface points seen by at least one camera, on a supersampled pixel grid."""
    out = []
    for cam in cameras:
        k = cam.intrinsics
        offs = (np.arange(supersample) + 0.5) / supersample
        xs = (np.arange(k.width)[:, None] + offs).reshape(-1)
        ys = (np.arange(k.height)[:, None] + offs).reshape(-1)
        u, v = np.meshgrid(xs, ys)
        d_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
        norm = np.linalg.norm(d_cam, axis=-1)
        t, _, hit = trace(kind, cam.center, (d_cam / norm[..., None]) @ cam.R)
        px = np.stack([u, v], axis=-1)[hit]
        out.append(back_project_points(cam, px, (t / norm)[hit]))
    return np.concatenate(out)


def make_scene(kind: str = "sphere", texture: str = "checker", resolution: int = 128,
               n_views: int = 3) -> SyntheticScene:
    cams = arc_cameras(n_views, resolution)
    images, depths = [], []
    for cam in cams:
        img, dep = render_view(kind, texture, cam)
        images.append(img)
        depths.append(dep)
    verts, faces = gt_mesh(kind)
    return SyntheticScene(kind, cams, images, depths, verts, faces, visible_points(kind, cams))


# ----------------------------------------------------------------------------
# pseudo-MVS


def pseudo_mvs(gt_depths: list[np.ndarray], sigma_rel: float = 0.01, dropout_frac: float = 0.05,
               outlier_frac: float = 0.02, rng: np.random.Generator | None = None,
               blob_sigma: float = 3.0) -> list[np.ndarray]:
    """Degrade exact depth maps the way a learned MVS network would.

    Multiplicative Gaussian noise on every valid pixel, ``dropout_frac`` of the
    valid pixels removed in smooth blobs, and ``outlier_frac`` of the
    remaining pixels pushed 5-20% further away.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    out = []
    for d in gt_depths:
        d = np.asarray(d, dtype=np.float64)
        valid = np.isfinite(d) & (d > 0)
        noisy = np.where(valid, d, 0.0).copy()
        noise = rng.normal(0.0, 1.0, d.shape)
        if sigma_rel > 0:
            noisy[valid] *= 1.0 + sigma_rel * noise[valid]
        field = ndimage.gaussian_filter(rng.normal(0.0, 1.0, d.shape), blob_sigma)
        if dropout_frac > 0 and valid.any():
            thresh = np.quantile(field[valid], dropout_frac)
            drop = valid & (field <= thresh)
            noisy[drop] = 0.0
            valid &= ~drop
        idx = np.flatnonzero(valid)
        n_out = int(round(outlier_frac * idx.size))
        if n_out:
            pick = rng.choice(idx, n_out, replace=False)
            noisy.reshape(-1)[pick] *= rng.uniform(1.05, 1.2, n_out)
        out.append(noisy)
    return out


# ----------------------------------------------------------------------------
# handcrafted 8-channel features

FEATURE_NAMES = ("luma", "sobel_x", "sobel_y", "laplacian", "dog_0", "dog_45", "dog_90", "dog_135")


def luma(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[..., :3] @ np.array([0.299, 0.587, 0.114])


def feature_extract(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) image -> (H, W, 8) standardised feature map.

    Channels: luma, Sobel x/y, Laplacian, and the directional derivative of a
    difference of Gaussians (sigma 1 and 2) at 0, 45, 90 and 135 degrees.
    """
    y = luma(image)
    mode = "nearest"
    sx = ndimage.sobel(y, axis=1, mode=mode)
    sy = ndimage.sobel(y, axis=0, mode=mode)
    lap = ndimage.laplace(y, mode=mode)
    dog = ndimage.gaussian_filter(y, 1.0, mode=mode) - ndimage.gaussian_filter(y, 2.0, mode=mode)
    gx = ndimage.sobel(dog, axis=1, mode=mode) / 8.0
    gy = ndimage.sobel(dog, axis=0, mode=mode) / 8.0
    chans = [y, sx, sy, lap]
    for deg in (0.0, 45.0, 90.0, 135.0):
        a = np.deg2rad(deg)
        chans.append(np.cos(a) * gx + np.sin(a) * gy)
    feat = np.stack(chans, axis=-1)
    mean = feat.mean(axis=(0, 1))
    std = feat.std(axis=(0, 1))
    out = np.where(std > 1e-12, (feat - mean) / np.where(std > 1e-12, std, 1.0), 0.0)
    return out
