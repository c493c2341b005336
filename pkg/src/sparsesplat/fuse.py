"""TSDF fusion of depth maps, mesh extraction and Chamfer evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .errors import EmptyInput, EmptyMesh
from .geom import Camera, back_project_points

DEFAULT_VOXEL = 0.004
DEFAULT_TRUNC = 0.02
FUSE_ACC_MIN = 0.5


@dataclass
class TsdfVolume:
    origin: np.ndarray  # world position of voxel (0, 0, 0) centre
    voxel_size: float
    dims: tuple[int, int, int]
    tsdf: np.ndarray  # float32, [-1, 1], initialised to 1
    weight: np.ndarray  # float32, >= 0
    trunc: float

    @classmethod
    def create(cls, lo, hi, voxel_size: float = DEFAULT_VOXEL, trunc: float = DEFAULT_TRUNC) -> "TsdfVolume":
        """Empty volume covering the box ``[lo, hi]``."""
        if not voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if trunc < voxel_size:
            raise ValueError("trunc must be >= voxel_size")
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        dims = tuple(int(d) for d in np.maximum(np.ceil((hi - lo) / voxel_size).astype(int) + 1, 2))
        return cls(lo, float(voxel_size), dims, np.ones(dims, np.float32), np.zeros(dims, np.float32), float(trunc))

    @classmethod
    def around_depths(cls, depths, cameras, voxel_size: float = DEFAULT_VOXEL, trunc: float = DEFAULT_TRUNC,
                      masks=None) -> "TsdfVolume":
        """Volume bounding every valid back-projected depth pixel, padded by the truncation distance."""
        pts = []
        for i, (d, cam) in enumerate(zip(depths, cameras)):
            ok = _valid_depth(d, None if masks is None else masks[i])
            r, c = np.nonzero(ok)
            pts.append(back_project_points(cam, np.stack([c + 0.5, r + 0.5], -1), d[r, c]))
        pts = np.concatenate(pts) if pts else np.zeros((0, 3))
        if len(pts) == 0:
            raise EmptyInput("no valid depth pixel to fuse")
        pad = trunc + 2 * voxel_size
        return cls.create(pts.min(0) - pad, pts.max(0) + pad, voxel_size, trunc)

    def voxel_centers(self) -> np.ndarray:
        idx = np.stack(np.meshgrid(*[np.arange(d) for d in self.dims], indexing="ij"), axis=-1)
        return self.origin + idx * self.voxel_size


def _valid_depth(depth, mask=None):
    ok = np.isfinite(depth) & (depth > 0)
    return ok if mask is None else ok & mask


@nb.njit(cache=True)
def _lookup_depth(depth, valid, u, v, r, c, trunc):
    """Bilinear depth when the four surrounding pixels are valid and agree within ``trunc``;
    otherwise the depth of the pixel containing ``(u, v)``."""
    H, W = depth.shape
    x = u - 0.5
    y = v - 0.5
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    if x0 < 0 or y0 < 0 or x0 + 1 >= W or y0 + 1 >= H:
        return depth[r, c]
    if not (valid[y0, x0] and valid[y0, x0 + 1] and valid[y0 + 1, x0] and valid[y0 + 1, x0 + 1]):
        return depth[r, c]
    d00 = depth[y0, x0]
    d01 = depth[y0, x0 + 1]
    d10 = depth[y0 + 1, x0]
    d11 = depth[y0 + 1, x0 + 1]
    if max(max(d00, d01), max(d10, d11)) - min(min(d00, d01), min(d10, d11)) > trunc:
        return depth[r, c]
    fx = x - x0
    fy = y - y0
    return (1 - fy) * ((1 - fx) * d00 + fx * d01) + fy * ((1 - fx) * d10 + fx * d11)


@nb.njit(parallel=True, cache=True)
def _integrate_kernel(tsdf, weight, origin, vs, trunc, K, R, t, depth, valid):
    nx, ny, nz = tsdf.shape
    H, W = depth.shape
    for i in nb.prange(nx):
        x = origin[0] + i * vs
        for j in range(ny):
            y = origin[1] + j * vs
            bx = R[0, 0] * x + R[0, 1] * y + t[0]
            by = R[1, 0] * x + R[1, 1] * y + t[1]
            bz = R[2, 0] * x + R[2, 1] * y + t[2]
            for k in range(nz):
                z = origin[2] + k * vs
                xc = bx + R[0, 2] * z
                yc = by + R[1, 2] * z
                zc = bz + R[2, 2] * z
                if zc <= 0.0:
                    continue
                u = K[0, 0] * xc / zc + K[0, 2]
                v = K[1, 1] * yc / zc + K[1, 2]
                if not (u >= 0.0 and v >= 0.0 and u < W and v < H):
                    continue
                c = int(u)
                r = int(v)
                if not valid[r, c]:
                    continue
                d = _lookup_depth(depth, valid, u, v, r, c, trunc)
                sdf = d - zc
                if sdf <= -trunc:
                    continue
                val = min(1.0, max(-1.0, sdf / trunc))
                w0 = weight[i, j, k]
                tsdf[i, j, k] = (tsdf[i, j, k] * w0 + val) / (w0 + 1.0)
                weight[i, j, k] = w0 + 1.0


def integrate(volume: TsdfVolume, depth: np.ndarray, camera: Camera, mask: np.ndarray | None = None) -> TsdfVolume:
    """Fuse one z-depth map into ``volume`` in place and return it.

    Depth is interpolated bilinearly inside smooth regions and read from the
    containing pixel across discontinuities, so silhouettes do not bleed.
    """
    depth = np.asarray(depth, dtype=np.float64)
    valid = _valid_depth(depth, mask)
    if not valid.any():
        return volume
    _integrate_kernel(volume.tsdf, volume.weight, volume.origin, volume.voxel_size, volume.trunc,
                      camera.K, camera.R, camera.t, np.where(valid, depth, 0.0), valid)
    return volume


def fuse_depths(depths, cameras, voxel_size: float = DEFAULT_VOXEL, trunc: float = DEFAULT_TRUNC,
                masks=None) -> TsdfVolume:
    vol = TsdfVolume.around_depths(depths, cameras, voxel_size, trunc, masks)
    for i, (d, cam) in enumerate(zip(depths, cameras)):
        integrate(vol, d, cam, None if masks is None else masks[i])
    return vol


def fuse_renders(renders, cameras, voxel_size: float = DEFAULT_VOXEL, trunc: float = DEFAULT_TRUNC) -> TsdfVolume:
    """TSDF of rendered expected depth, masked to pixels with accumulated alpha above 0.5."""
    return fuse_depths([r.depth for r in renders], cameras, voxel_size, trunc,
                       [r.acc > FUSE_ACC_MIN for r in renders])


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int

    def euler_characteristic(self) -> int:
        e = np.sort(np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]), axis=1)
        n_edges = len(np.unique(e, axis=0))
        used = np.unique(self.faces)
        return int(len(used) - n_edges + len(self.faces))


def marching_cubes(volume: TsdfVolume, iso: float = 0.0) -> Mesh:
    """Iso-surface of the TSDF restricted to cells whose 8 corners all carry weight.

    Raises:
        EmptyMesh: when no cell crosses the iso level.
    """
    w = volume.weight > 0
    # skimage indexes each cube by its upper corner
    cell = np.zeros_like(w)
    cell[1:, 1:, 1:] = (w[:-1, :-1, :-1] & w[1:, :-1, :-1] & w[:-1, 1:, :-1] & w[:-1, :-1, 1:]
                           & w[1:, 1:, :-1] & w[1:, :-1, 1:] & w[:-1, 1:, 1:] & w[1:, 1:, 1:])
    if not cell.any():
        raise EmptyMesh("no voxel cell has weight on all corners")
    vals = volume.tsdf[cell]
    if not (vals.min() <= iso <= vals.max()) or vals.min() == vals.max():
        raise EmptyMesh("volume has no iso-level crossing")
    try:
        verts, faces, _, _ = measure.marching_cubes(volume.tsdf, level=iso, spacing=(volume.voxel_size,) * 3,
                                                    mask=cell, allow_degenerate=False)
    except (ValueError, RuntimeError) as exc:
        raise EmptyMesh(f"no surface extracted: {exc}") from None
    if len(faces) == 0:
        raise EmptyMesh("no surface extracted")
    return Mesh(verts + volume.origin, faces.astype(np.int64))


def sample_mesh(mesh: Mesh, samples: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Points drawn uniformly by area over the triangles."""
    rng = np.random.default_rng(0) if rng is None else rng
    tri = mesh.vertices[mesh.faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    if len(tri) == 0 or area.sum() <= 0:
        raise EmptyInput("mesh has no area to sample")
    f = rng.choice(len(tri), samples, p=area / area.sum())
    r1 = np.sqrt(rng.random(samples))
    r2 = rng.random(samples)
    a, b, c = tri[f, 0], tri[f, 1], tri[f, 2]
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


@dataclass
class ChamferResult:
    accuracy: float
    completeness: float
    average: float


def chamfer_points(pred: np.ndarray, gt: np.ndarray) -> ChamferResult:
    if len(pred) == 0 or len(gt) == 0:
        raise EmptyInput("chamfer needs two non-empty point sets")
    acc = float(cKDTree(gt).query(pred)[0].mean())
    comp = float(cKDTree(pred).query(gt)[0].mean())
    return ChamferResult(acc, comp, 0.5 * (acc + comp))


def chamfer(mesh: Mesh, gt_points: np.ndarray, samples: int = 200_000, seed: int = 0) -> ChamferResult:
    """Accuracy (mesh to GT), completeness (GT to mesh) and their mean."""
    if mesh is None or len(mesh.faces) == 0:
        raise EmptyInput("empty mesh")
    gt = np.asarray(gt_points, dtype=np.float64)
    if len(gt) == 0:
        raise EmptyInput("empty ground-truth point set")
    return chamfer_points(sample_mesh(mesh, samples, np.random.default_rng(seed)), gt)
