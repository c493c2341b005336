"""Scene directories, the init/train/mesh/eval pipeline and the paired ablation suites.

A scene directory holds ``cameras.json``, ``view_%02d.ppm``, ``depth_gt_%02d.pfm``,
``depth_mvs_%02d.pfm``, ``feat_%02d.f32``, ``gt_mesh.ply`` and ``gt_points.ply``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fuse, init, io, synth
from .config import TrainConfig
from .errors import EmptyInput
from .geom import Camera
from .optim import TrainingViews, train
from .render import render
from .scene import Scene

log = logging.getLogger(__name__)


@dataclass
class SceneData:
    cameras: list[Camera]
    images: list[np.ndarray]
    depths_gt: list[np.ndarray]
    depths_mvs: list[np.ndarray]
    features: list[np.ndarray]
    gt_points: np.ndarray
    gt_mesh: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def views(self) -> TrainingViews:
        return TrainingViews(self.cameras, self.images, self.features)


def make_scene_data(kind: str = "sphere", n_views: int = 3, resolution: int = 128, texture: str = "checker",
                    seed: int = 0, sigma_rel: float = 0.01, dropout_frac: float = 0.05,
                    outlier_frac: float = 0.02) -> SceneData:
    """Synthesize a scene, its pseudo-MVS depths and its feature maps in memory."""
    sc = synth.make_scene(kind, texture, resolution, n_views)
    mvs = synth.pseudo_mvs(sc.depths, sigma_rel, dropout_frac, outlier_frac, rng=np.random.default_rng(seed))
    feats = [synth.feature_extract(im) for im in sc.images]
    return SceneData(sc.cameras, sc.images, sc.depths, mvs, feats, sc.gt_points, (sc.mesh_vertices, sc.mesh_faces))


def write_scene_dir(out: str | Path, data: SceneData) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    io.cameras_write(out / "cameras.json", data.cameras)
    for i in range(len(data.cameras)):
        io.ppm_write(out / f"view_{i:02d}.ppm", data.images[i])
        io.pfm_write(out / f"depth_gt_{i:02d}.pfm", data.depths_gt[i].astype(np.float32))
        io.pfm_write(out / f"depth_mvs_{i:02d}.pfm", data.depths_mvs[i].astype(np.float32))
        io.feat_write(out / f"feat_{i:02d}.f32", data.features[i])
    if data.gt_mesh is not None:
        io.write_mesh(out / "gt_mesh.ply", *data.gt_mesh)
    io.write_points(out / "gt_points.ply", data.gt_points)
    return out


def load_scene_dir(path: str | Path) -> SceneData:
    """Read a scene directory written by :func:`write_scene_dir`.

    Raises:
        FileNotFoundError: when a required file is missing.
    """
    path = Path(path)
    cams = io.cameras_read(path / "cameras.json")
    n = len(cams)
    images = [io.ppm_read_float(path / f"view_{i:02d}.ppm") for i in range(n)]
    gt = [io.pfm_read(path / f"depth_gt_{i:02d}.pfm").astype(np.float64) for i in range(n)]
    mvs = [io.pfm_read(path / f"depth_mvs_{i:02d}.pfm").astype(np.float64) for i in range(n)]
    feats = [io.feat_read(path / f"feat_{i:02d}.f32").astype(np.float64) for i in range(n)]
    mesh = io.read_mesh(path / "gt_mesh.ply") if (path / "gt_mesh.ply").exists() else None
    return SceneData(cams, images, gt, mvs, feats, io.read_points(path / "gt_points.ply"), mesh)


def init_scene(data: SceneData, source: str = "mvs", stride: int | None = None, subsample: float = 1.0,
               seed: int = 0, opacity: float = init.DEFAULT_OPACITY) -> Scene:
    """Initial splats from the MVS (or GT) depths; ``subsample < 1`` keeps a random fraction of the points.

    Subsampling happens before scale estimation, so sparse sets get wider disks.
    """
    if source not in ("mvs", "gt"):
        raise ValueError(f"unknown depth source {source!r}")
    depths = data.depths_mvs if source == "mvs" else data.depths_gt
    if subsample >= 1.0:
        return init.initialize(depths, data.cameras, data.images, data.features, stride=stride, opacity=opacity)
    if stride is None:
        stride = init.default_stride(data.cameras[0].width, data.cameras[0].height)
    pts, views, pix = init.fuse_points(depths, data.cameras, stride)
    rng = np.random.default_rng([seed, 1])
    keep = np.sort(rng.choice(len(pts), max(4, int(round(subsample * len(pts)))), replace=False))
    pts, views, pix = pts[keep], views[keep], pix[keep]
    colors, feats = init.sample_attributes(views, pix, data.cameras, data.images, data.features)
    normals = np.zeros_like(pts)
    for i, (d, cam) in enumerate(zip(depths, data.cameras)):
        sel = views == i
        if sel.any():
            normals[sel] = init.depth_normals(d, cam).reshape(-1, 3)[pix[sel]]
    extent = init.scene_extent(init.fuse_points(depths, data.cameras, stride)[0])
    return init.init_splats(pts, colors, feats, normals, views, pix, opacity=opacity, extent=extent)


def extract_mesh(scene: Scene, cameras: list[Camera], voxel_size: float = fuse.DEFAULT_VOXEL,
                 trunc: float = fuse.DEFAULT_TRUNC) -> fuse.Mesh:
    """Render every view, fuse the depths into a TSDF and run marching cubes."""
    renders = [render(scene, c) for c in cameras]
    return fuse.marching_cubes(fuse.fuse_renders(renders, cameras, voxel_size, trunc))


def mesh_from_depths(depths, cameras, voxel_size: float = fuse.DEFAULT_VOXEL,
                     trunc: float = fuse.DEFAULT_TRUNC) -> fuse.Mesh:
    return fuse.marching_cubes(fuse.fuse_depths(depths, cameras, voxel_size, trunc))


@dataclass
class RunResult:
    label: str
    chamfer: fuse.ChamferResult
    splats: int
    seconds: float
    scene: Scene | None = None
    metrics: list[dict] = field(default_factory=list)

    def row(self, suite: str = "") -> dict:
        return {"suite": suite, "label": self.label, "accuracy": self.chamfer.accuracy,
                "completeness": self.chamfer.completeness, "average": self.chamfer.average,
                "splats": self.splats, "seconds": round(self.seconds, 3)}


def evaluate(scene: Scene, data: SceneData, samples: int = 100_000, seed: int = 0,
             voxel_size: float = fuse.DEFAULT_VOXEL, trunc: float = fuse.DEFAULT_TRUNC) -> fuse.ChamferResult:
    try:
        mesh = extract_mesh(scene, data.cameras, voxel_size, trunc)
    except EmptyInput:
        return fuse.ChamferResult(np.inf, np.inf, np.inf)
    return fuse.chamfer(mesh, data.gt_points, samples, seed)


def run(data: SceneData, cfg: TrainConfig, label: str = "run", init_kw: dict | None = None,
        out_dir: str | Path | None = None, samples: int = 100_000) -> RunResult:
    """Initialise, train and evaluate one configuration."""
    t0 = time.perf_counter()
    scene = init_scene(data, seed=cfg.seed, **(init_kw or {}))
    metrics_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(out_dir / "resolved.cfg")
        metrics_path = out_dir / "metrics.csv"
    res = train(scene, data.views, cfg, metrics_path=metrics_path)
    cd = evaluate(res.scene, data, samples, seed=cfg.seed)
    if out_dir is not None:
        io.write_splats(out_dir / "final.ply", res.scene)
    return RunResult(label, cd, len(res.scene), time.perf_counter() - t0, res.scene, res.metrics)


# ----------------------------------------------------------------------------
# ablation suites: (label, config overrides, init keyword overrides)

SUITES: dict[str, list[tuple[str, dict, dict]]] = {
    "init": [
        ("dense", {}, {}),
        ("sparse", {}, {"subsample": 0.01}),
    ],
    "color": [
        ("fixed", {}, {}),
        ("frozen-opacity", {"freeze_opacity": True}, {}),
        ("unmasked-feature", {"loss.feature_mask": False}, {}),
        ("no-feature", {"loss.l4": 0.0}, {}),
    ],
    "dgpr": [
        ("full", {}, {}),
        ("no-dgpr", {"loss.l3": 0.0}, {}),
        ("live-normal", {"dgpr.detach_normal": False}, {}),
    ],
    "sgu": [
        ("sgu", {}, {}),
        ("no-sgu", {"sgu.enabled": False}, {}),
        ("adc", {"sgu.enabled": False, "adc.enabled": True}, {}),
    ],
    "k": [(f"k{k}", {"dgpr.k": k}, {}) for k in (9, 25, 49, 81)],
}

REFERENCE = {"init": "dense", "color": "fixed", "dgpr": "full", "sgu": "sgu", "k": "k25"}


def run_suite(data: SceneData, suite: str, base: TrainConfig, out_dir: str | Path | None = None,
              samples: int = 100_000) -> list[RunResult]:
    """Run every configuration of ``suite`` from the same seed and base config."""
    if suite not in SUITES:
        raise KeyError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    results = []
    for label, overrides, init_kw in SUITES[suite]:
        cfg = TrainConfig.loads(base.dumps()).update(overrides)
        sub = None if out_dir is None else Path(out_dir) / label
        r = run(data, cfg, label, init_kw, sub, samples)
        log.info("%s/%s: chamfer %.5f (%d splats, %.1fs)", suite, label, r.chamfer.average, r.splats, r.seconds)
        r.scene = None
        results.append(r)
    return results


def write_suite_table(results: list[RunResult], suite: str, out_dir: str | Path) -> tuple[Path, Path]:
    """Comparison CSV plus a bar chart of the Chamfer averages."""
    from .plotting import plot_ablation

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"ablate_{suite}.csv"
    csv_path.unlink(missing_ok=True)
    for r in results:
        io.csv_append(csv_path, r.row(suite))
    png = plot_ablation([r.label for r in results], [r.chamfer.average for r in results],
                        out_dir / f"ablate_{suite}.png", reference=REFERENCE.get(suite))
    return csv_path, png
