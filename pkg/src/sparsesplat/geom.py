"""Pinhole cameras, rigid poses and plane-induced homographies.

Pixel centers sit at integer + 0.5: pixel ``(col, row)`` covers the square
``[col, col+1) x [row, row+1)`` in continuous image coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AllInvalid, BehindCamera, DegeneratePlane, NonPositiveDepth


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform ``x_cam = R @ x_world + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0)) -> "Pose":
        """Camera at ``eye`` looking at ``target``; image y points along -up."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(-np.asarray(up, dtype=np.float64), z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(R, -R @ eye)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def compose(self, other: "Pose") -> "Pose":
        """Pose applying ``other`` first, then ``self``."""
        R = self.rotation @ other.rotation
        return Pose(_orthonormalize(R), self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def relative_pose(src: "Camera | Pose", tgt: "Camera | Pose") -> Pose:
    """Rigid transform taking source-camera coordinates to target-camera coordinates."""
    a = src.pose if isinstance(src, Camera) else src
    b = tgt.pose if isinstance(tgt, Camera) else tgt
    return b.compose(a.inverse())


@dataclass(frozen=True, eq=False)
class Camera:
    intrinsics: Intrinsics
    pose: Pose
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    @property
    def K(self) -> np.ndarray:
        return self.intrinsics.K

    @property
    def R(self) -> np.ndarray:
        return self.pose.rotation

    @property
    def t(self) -> np.ndarray:
        return self.pose.translation

    @property
    def center(self) -> np.ndarray:
        return self.pose.center

    def to_dict(self) -> dict:
        k = self.intrinsics
        return {
            "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
            "width": k.width, "height": k.height,
            "R": [float(v) for v in self.R.reshape(-1)],
            "t": [float(v) for v in self.t],
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        intr = Intrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                          int(d["width"]), int(d["height"]))
        pose = Pose(np.array(d["R"], dtype=np.float64).reshape(3, 3), np.array(d["t"], dtype=np.float64))
        return cls(intr, pose, float(d.get("near", 0.01)), float(d.get("far", 100.0)))


def project_points(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection. Returns ``(pixels (..., 2), depth (...))``.

    Points with non-positive depth get NaN pixels instead of raising.
    """
    points = np.asarray(points, dtype=np.float64)
    xc = points @ camera.R.T + camera.t
    z = xc[..., 2]
    k = camera.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(z > 0, z, np.nan)
        px = np.stack([k.fx * xc[..., 0] / safe + k.cx, k.fy * xc[..., 1] / safe + k.cy], axis=-1)
    return px, z


def project(camera: Camera, point) -> tuple[np.ndarray, float]:
    px, z = project_points(camera, np.asarray(point, dtype=np.float64).reshape(1, 3))
    if not z[0] > 0:
        raise BehindCamera(f"point has camera depth {z[0]:.6g} <= 0")
    return px[0], float(z[0])


def back_project_points(camera: Camera, pixels: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Vectorised inverse of :func:`project_points` (no validity checks)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    k = camera.intrinsics
    xc = np.stack(
        [(pixels[..., 0] - k.cx) / k.fx * depth, (pixels[..., 1] - k.cy) / k.fy * depth, depth], axis=-1
    )
    return (xc - camera.t) @ camera.R


def back_project(camera: Camera, pixel, depth: float) -> np.ndarray:
    if not depth > 0:
        raise NonPositiveDepth(f"depth {depth!r} must be positive")
    return back_project_points(camera, np.asarray(pixel, dtype=np.float64), np.float64(depth))


def ray(camera: Camera, pixel) -> tuple[np.ndarray, np.ndarray]:
    """Camera center and unit world-space direction through ``pixel``."""
    pixel = np.asarray(pixel, dtype=np.float64)
    d_cam = camera.intrinsics.K_inv @ np.array([pixel[0], pixel[1], 1.0])
    d = camera.R.T @ d_cam
    return camera.center, d / np.linalg.norm(d)


def pixel_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Unit directions (H, W, 3) through every pixel center and the z-depth per unit ray length."""
    k = camera.intrinsics
    xs = np.arange(k.width) + 0.5
    ys = np.arange(k.height) + 0.5
    u, v = np.meshgrid(xs, ys)
    d_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    norm = np.linalg.norm(d_cam, axis=-1)
    d_cam /= norm[..., None]
    return d_cam @ camera.R, 1.0 / norm


def plane_homography(src: Camera, tgt: Camera, plane_point, plane_normal) -> np.ndarray:
    """Homography taking source pixels to target pixels for points on a world plane."""
    n = np.asarray(plane_normal, dtype=np.float64)
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise ValueError("plane normal must be unit length")
    n_s = src.R @ n
    x_s = src.R @ np.asarray(plane_point, dtype=np.float64) + src.t
    d_s = -float(n_s @ x_s)  # plane: n_s . X + d_s = 0 in the source frame
    if abs(d_s) < 1e-9:
        raise DegeneratePlane("plane passes through the source camera center")
    rel = relative_pose(src, tgt)
    return tgt.K @ (rel.rotation - np.outer(rel.translation, n_s) / d_s) @ src.intrinsics.K_inv


def apply_homography(H: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    h = pixels @ H[:, :2].T + H[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        return h[..., :2] / h[..., 2:3]


def sample_bilinear(img: np.ndarray, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear lookup at continuous pixel coordinates.

    Out-of-bounds corners get zero weight and the rest are renormalised; a
    sample is invalid only when all four corners fall outside the image.

    Returns:
        ``(values, valid)`` with values shaped ``pixels.shape[:-1] + img.shape[2:]``.
    """
    img = np.asarray(img)
    h, w = img.shape[:2]
    pixels = np.asarray(pixels, dtype=np.float64)
    x = pixels[..., 0] - 0.5
    y = pixels[..., 1] - 0.5
    finite = np.isfinite(x) & np.isfinite(y)
    x = np.where(finite, x, -10.0)
    y = np.where(finite, y, -10.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    extra = img.shape[2:]
    acc = np.zeros(pixels.shape[:-1] + extra)
    wsum = np.zeros(pixels.shape[:-1])
    for dy, dx, wgt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)), (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = x0 + dx
        yi = y0 + dy
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & finite
        wgt = np.where(ok, wgt, 0.0)
        vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        acc += vals * wgt.reshape(wgt.shape + (1,) * len(extra))
        wsum += wgt
    valid = wsum > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = acc / np.where(valid, wsum, 1.0).reshape(wsum.shape + (1,) * len(extra))
    return out, valid


@dataclass
class Patch:
    values: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.ones(self.values.shape[:2], dtype=bool)


def patch_grid(center, half: int) -> np.ndarray:
    """Pixel coordinates of the (2*half+1)^2 grid centred on ``center`` (rows, cols, 2)."""
    offs = np.arange(-half, half + 1, dtype=np.float64)
    gx, gy = np.meshgrid(center[0] + offs, center[1] + offs)
    return np.stack([gx, gy], axis=-1)


def warp_patch(src_img: np.ndarray, H: np.ndarray, center_tgt, half: int) -> Patch:
    """Gather a patch: each grid pixel around ``center_tgt`` is mapped by ``H``
    into ``src_img`` and sampled bilinearly."""
    grid = patch_grid(np.asarray(center_tgt, dtype=np.float64), half)
    mapped = apply_homography(np.asarray(H, dtype=np.float64), grid)
    values, valid = sample_bilinear(src_img, mapped)
    if not valid.any():
        raise AllInvalid("every patch sample falls outside the source image")
    return Patch(values, valid)
