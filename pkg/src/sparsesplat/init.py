"""Initial splats from per-view depth maps: back-project, fuse, attach frozen appearance."""

from __future__ import annotations

import warnings

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DegenerateNeighborhood, EmptyCloud
from .geom import Camera, back_project_points, pixel_rays, sample_bilinear
from .scene import Scene, logit, quat_from_normal

DEFAULT_OPACITY = 0.9


def default_stride(width: int, height: int) -> int:
    return 1 if max(width, height) <= 128 else 2


def _valid(depth: np.ndarray) -> np.ndarray:
    return np.isfinite(depth) & (depth > 0)


def fuse_points(depths: list[np.ndarray], cameras: list[Camera], stride: int = 1):
    """Back-project every valid pixel on the stride grid of every view.

    Returns:
        ``(points (M, 3), view_index (M,), pixel_index (M,))`` where the pixel
        index is ``row * width + col`` in the originating view.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    pts, views, pix = [], [], []
    for i, (d, cam) in enumerate(zip(depths, cameras)):
        d = np.asarray(d, dtype=np.float64)
        if d.shape != (cam.height, cam.width):
            raise ValueError(f"depth map {i} has shape {d.shape}, camera expects {(cam.height, cam.width)}")
        rows, cols = np.mgrid[0:cam.height:stride, 0:cam.width:stride]
        ok = _valid(d[rows, cols])
        r, c = rows[ok], cols[ok]
        px = np.stack([c + 0.5, r + 0.5], axis=-1)
        pts.append(back_project_points(cam, px, d[r, c]))
        views.append(np.full(r.size, i, dtype=np.int32))
        pix.append((r * cam.width + c).astype(np.int32))
    if not pts or sum(len(p) for p in pts) == 0:
        raise EmptyCloud("no valid depth pixel in any view")
    return np.concatenate(pts), np.concatenate(views), np.concatenate(pix)


def pixel_centers(pixel_index: np.ndarray, width: int) -> np.ndarray:
    return np.stack([pixel_index % width + 0.5, pixel_index // width + 0.5], axis=-1).astype(np.float64)


def sample_attributes(view_index, pixel_index, cameras, images, feature_maps):
    """Colour and feature of every point, read at its originating pixel."""
    n = len(view_index)
    colors = np.zeros((n, 3))
    nfeat = feature_maps[0].shape[-1] if feature_maps else 0
    feats = np.zeros((n, nfeat))
    for i, cam in enumerate(cameras):
        sel = view_index == i
        if not sel.any():
            continue
        px = pixel_centers(pixel_index[sel], cam.width)
        colors[sel] = sample_bilinear(images[i], px)[0]
        if nfeat:
            feats[sel] = sample_bilinear(feature_maps[i], px)[0]
    return colors, feats


def depth_normals(depth: np.ndarray, camera: Camera, smooth_sigma: float = 3.0) -> np.ndarray:
    """Camera-facing world normals from a Gaussian-weighted local plane fit.

    Inverse depth is affine in pixel coordinates on a plane,
    ``1/z = a u + b v + c``, so a weighted least-squares fit of ``1/z`` over
    the valid pixels in a window recovers the plane exactly, at borders too,
    while averaging out per-pixel MVS noise. The camera-frame normal is
    ``(a fx, b fy, c + a cx + b cy)``. Pixels without a well-posed fit get
    the reversed viewing ray.
    """
    depth = np.asarray(depth, dtype=np.float64)
    valid = _valid(depth)
    w = valid.astype(np.float64)
    y = np.where(valid, 1.0 / np.where(valid, depth, 1.0), 0.0)
    H, W = depth.shape
    rows, cols = np.mgrid[0:H, 0:W].astype(np.float64)
    if smooth_sigma > 0:
        def filt(x):
            return ndimage.gaussian_filter(x, smooth_sigma, mode="constant", truncate=3.0)
    else:
        def filt(x):
            return ndimage.uniform_filter(x, 3, mode="constant")
    # moments in coordinates relative to each output pixel keep the system well conditioned
    s0 = filt(w)
    su, sv = filt(w * cols) - cols * s0, filt(w * rows) - rows * s0
    suu = filt(w * cols**2) - 2 * cols * filt(w * cols) + cols**2 * s0
    svv = filt(w * rows**2) - 2 * rows * filt(w * rows) + rows**2 * s0
    suv = filt(w * cols * rows) - cols * filt(w * rows) - rows * filt(w * cols) + cols * rows * s0
    sy = filt(w * y)
    suy, svy = filt(w * cols * y) - cols * sy, filt(w * rows * y) - rows * sy
    A = np.stack([np.stack([suu, suv, su], -1), np.stack([suv, svv, sv], -1), np.stack([su, sv, s0], -1)], -2)
    rhs = np.stack([suy, svy, sy], -1)
    det = np.linalg.det(A)
    ok = valid & (s0 > 1e-6) & (np.abs(det) > 1e-9 * np.maximum(s0, 1e-12) ** 3)
    A[~ok] = np.eye(3)
    coef = np.linalg.solve(A, rhs[..., None])[..., 0]
    a, b = coef[..., 0], coef[..., 1]
    # coef[2] is 1/z at this pixel centre; shift back to u = v = 0
    c = coef[..., 2] - a * (cols + 0.5) - b * (rows + 0.5)
    k = camera.intrinsics
    n_cam = np.stack([a * k.fx, b * k.fy, c + a * k.cx + b * k.cy], -1)
    n = n_cam @ camera.R  # camera to world: R^T n
    norm = np.linalg.norm(n, axis=-1)
    dirs, _ = pixel_rays(camera)
    good = ok & (norm > 1e-15)
    n = np.where(good[..., None], n / np.where(good, norm, 1.0)[..., None], -dirs)
    flip = np.sum(n * dirs, axis=-1) > 0
    n[flip] *= -1
    return n


def knn_mean_distance(points: np.ndarray, k: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Mean distance to the ``k`` nearest distinct neighbours; second output flags points lacking them."""
    n = len(points)
    if n <= 1:
        return np.zeros(n), np.ones(n, dtype=bool)
    tree = cKDTree(points)
    kk = min(n, k + 1 + 4)
    dist, _ = tree.query(points, kk)
    dist = dist[:, 1:]
    distinct = dist > 1e-12
    out = np.zeros(n)
    bad = distinct.sum(axis=1) < k
    for i in np.flatnonzero(~bad):
        out[i] = dist[i][distinct[i]][:k].mean()
    # rows with many duplicates: fall back to a wider query
    for i in np.flatnonzero(bad):
        d, _ = tree.query(points[i], min(n, 64))
        d = np.atleast_1d(d)[1:]
        d = d[d > 1e-12]
        if d.size >= k:
            out[i] = d[:k].mean()
            bad[i] = False
    return out, bad


def scene_extent(points: np.ndarray) -> float:
    c = points.mean(axis=0)
    r = float(np.linalg.norm(points - c, axis=1).max()) if len(points) else 0.0
    return r if r > 0 else 1.0


def init_splats(points, colors, features, normals_hint, view_index=None, pixel_index=None,
                opacity: float = DEFAULT_OPACITY, extent: float | None = None) -> Scene:
    """Disks centred on the fused points, sized by the 3-NN spacing, facing the hinted normal."""
    points = np.asarray(points, dtype=np.float64)
    extent = scene_extent(points) if extent is None else float(extent)
    scale, bad = knn_mean_distance(points, 3)
    if bad.any():
        warnings.warn(f"{int(bad.sum())} point(s) have fewer than 3 distinct neighbours; "
                      f"using scale extent/1000", DegenerateNeighborhood, stacklevel=2)
        scale[bad] = extent / 1000.0
    scale = np.clip(scale, 1e-9, extent)
    n = len(points)
    return Scene(
        points, quat_from_normal(normals_hint), np.log(np.repeat(scale[:, None], 2, axis=1)),
        np.full(n, float(logit(opacity))), colors, features,
        view_index if view_index is not None else np.zeros(n, np.int32),
        pixel_index if pixel_index is not None else np.zeros(n, np.int32),
        extent=extent,
    )


def initialize(depths, cameras, images, feature_maps, stride: int | None = None,
               opacity: float = DEFAULT_OPACITY, extent: float | None = None) -> Scene:
    """Full initialisation pipeline used by the CLI and the trainer."""
    if stride is None:
        stride = default_stride(cameras[0].width, cameras[0].height)
    pts, views, pix = fuse_points(depths, cameras, stride)
    colors, feats = sample_attributes(views, pix, cameras, images, feature_maps)
    normals = np.zeros_like(pts)
    for i, (d, cam) in enumerate(zip(depths, cameras)):
        sel = views == i
        if sel.any():
            nmap = depth_normals(d, cam)
            normals[sel] = nmap.reshape(-1, 3)[pix[sel]]
    return init_splats(pts, colors, feats, normals, views, pix, opacity=opacity, extent=extent)
