"""Splat data model: disk parameterisation, frames and optimizer packing.

A scene is stored as a struct of arrays. Only position, quaternion,
log-scales and opacity logit are learnable (10 scalars per splat); colour and
feature are frozen at initialisation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import LengthMismatch, ZeroQuaternion

N_LEARNABLE = 10
FEATURE_DIM = 8


@dataclass
class SplatFrame:
    t_u: np.ndarray
    t_v: np.ndarray
    t_z: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return np.stack([self.t_u, self.t_v, self.t_z], axis=-1)


@dataclass
class Splat:
    p: np.ndarray
    q: np.ndarray
    log_s: np.ndarray
    opacity_logit: float
    color: np.ndarray
    feature: np.ndarray
    view_index: int = 0
    pixel_index: int = 0

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_s)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def frame(self) -> SplatFrame:
        return frame(self.q)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(a):
    a = np.asarray(a, dtype=np.float64)
    return np.log(a) - np.log1p(-a)


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Unit-normalise quaternions, leaving already-unit ones bit-untouched."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ZeroQuaternion("quaternion norm below 1e-12")
    return np.where(np.abs(n - 1.0) > 1e-12, q / n, q)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(..., 4) quaternions ``(w, x, y, z)`` -> (..., 3, 3) rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ZeroQuaternion("quaternion norm below 1e-12")
    w, x, y, z = np.moveaxis(q / n, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_grad_to_quat(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``quat_to_rotmat(q)`` back to the raw quaternion ``q``.

    Accounts for the internal normalisation, so the result is tangent to the
    unit sphere (scaled by 1/|q|).
    """
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    qh = q / n
    w, x, y, z = np.moveaxis(qh, -1, 0)
    G = dR
    gw = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0] - x * G[..., 1, 2]
              - y * G[..., 2, 0] + x * G[..., 2, 1])
    gx = 2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0] - 2 * x * G[..., 1, 1]
              - w * G[..., 1, 2] + z * G[..., 2, 0] + w * G[..., 2, 1] - 2 * x * G[..., 2, 2])
    gy = 2 * (-2 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2] + x * G[..., 1, 0]
              + z * G[..., 1, 2] - w * G[..., 2, 0] + z * G[..., 2, 1] - 2 * y * G[..., 2, 2])
    gz = 2 * (-2 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2] + w * G[..., 1, 0]
              - 2 * z * G[..., 1, 1] + y * G[..., 1, 2] + x * G[..., 2, 0] + y * G[..., 2, 1])
    g = np.stack([gw, gx, gy, gz], axis=-1)
    g = g - qh * np.sum(g * qh, axis=-1, keepdims=True)
    return g / n


def frame(q) -> SplatFrame:
    R = quat_to_rotmat(np.asarray(q, dtype=np.float64))
    return SplatFrame(R[..., :, 0], R[..., :, 1], R[..., :, 2])


def quat_from_normal(n: np.ndarray) -> np.ndarray:
    """Quaternions whose third frame axis equals each unit normal in ``n`` (N, 3)."""
    n = np.asarray(n, dtype=np.float64)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    # shortest-arc rotation from +z to n; antipodal case rotates about x
    w = 1.0 + n[..., 2]
    q = np.stack([w, -n[..., 1], n[..., 0], np.zeros_like(w)], axis=-1)
    flip = w < 1e-9
    q[flip] = np.array([0.0, 1.0, 0.0, 0.0])
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


@dataclass
class Scene:
    p: np.ndarray
    q: np.ndarray
    log_s: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    feature: np.ndarray
    view_index: np.ndarray = field(default=None)
    pixel_index: np.ndarray = field(default=None)
    extent: float = 1.0

    def __post_init__(self):
        n = len(self.p)
        self.p = np.asarray(self.p, dtype=np.float64).reshape(n, 3)
        self.q = normalize_quaternions(np.asarray(self.q, dtype=np.float64).reshape(n, 4)) if n else np.zeros((0, 4))
        self.log_s = np.asarray(self.log_s, dtype=np.float64).reshape(n, 2)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64).reshape(n)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(n, 3)
        self.feature = np.asarray(self.feature, dtype=np.float64).reshape(n, -1) if n else np.zeros((0, FEATURE_DIM))
        if self.view_index is None:
            self.view_index = np.zeros(n, dtype=np.int32)
        if self.pixel_index is None:
            # unique by default: provenance doubles as the per-splat random-stream key
            self.pixel_index = np.arange(n, dtype=np.int32)
        self.view_index = np.asarray(self.view_index, dtype=np.int32).reshape(n)
        self.pixel_index = np.asarray(self.pixel_index, dtype=np.int32).reshape(n)
        if not self.extent > 0:
            raise ValueError("scene extent must be positive")

    def __len__(self) -> int:
        return len(self.p)

    @classmethod
    def empty(cls, extent: float = 1.0) -> "Scene":
        z = np.zeros
        return cls(z((0, 3)), z((0, 4)), z((0, 2)), z(0), z((0, 3)), z((0, FEATURE_DIM)), extent=extent)

    @classmethod
    def from_splats(cls, splats: list[Splat], extent: float = 1.0) -> "Scene":
        if not splats:
            return cls.empty(extent)
        return cls(
            np.array([s.p for s in splats]), np.array([s.q for s in splats]),
            np.array([s.log_s for s in splats]), np.array([s.opacity_logit for s in splats]),
            np.array([s.color for s in splats]), np.array([s.feature for s in splats]),
            np.array([s.view_index for s in splats]), np.array([s.pixel_index for s in splats]),
            extent=extent,
        )

    def splat(self, i: int) -> Splat:
        return Splat(self.p[i].copy(), self.q[i].copy(), self.log_s[i].copy(), float(self.opacity_logit[i]),
                     self.color[i].copy(), self.feature[i].copy(), int(self.view_index[i]), int(self.pixel_index[i]))

    @property
    def rotations(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_s)

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    def copy(self) -> "Scene":
        return replace(self, **{k: getattr(self, k).copy() for k in _ARRAY_FIELDS})

    def subset(self, idx) -> "Scene":
        return replace(self, **{k: getattr(self, k)[idx].copy() for k in _ARRAY_FIELDS})

    def appearance_checksum(self) -> str:
        """SHA-256 over the frozen colour and feature bytes."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.color).tobytes())
        h.update(np.ascontiguousarray(self.feature).tobytes())
        return h.hexdigest()


_ARRAY_FIELDS = ("p", "q", "log_s", "opacity_logit", "color", "feature", "view_index", "pixel_index")


def pack(scene: Scene) -> np.ndarray:
    """Flatten learnables as per-splat rows ``[p(3), q(4), log_s(2), opacity_logit(1)]``."""
    return np.concatenate(
        [scene.p, scene.q, scene.log_s, scene.opacity_logit[:, None]], axis=1
    ).reshape(-1)


def unpack(scene: Scene, vector: np.ndarray) -> Scene:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.size != N_LEARNABLE * len(scene):
        raise LengthMismatch(f"expected {N_LEARNABLE * len(scene)} parameters, got {vector.size}")
    v = vector.reshape(len(scene), N_LEARNABLE)
    out = replace(scene)
    out.p = v[:, 0:3].copy()
    out.q = normalize_quaternions(v[:, 3:7]) if len(scene) else v[:, 3:7].copy()
    out.log_s = v[:, 7:9].copy()
    out.opacity_logit = v[:, 9].copy()
    return out
