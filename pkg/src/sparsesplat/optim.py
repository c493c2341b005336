"""Adam over the packed splat parameters and the training loop."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import loss as L
from .config import TrainConfig
from .errors import NonFinite, NonFiniteGradient
from .geom import Camera
from .io import csv_append
from .regularize import loss_dr, pick_target
from .render import GradientBuffer, Upstream, render, render_backward
from .scene import N_LEARNABLE, Scene, normalize_quaternions, quat_to_rotmat
from .sgu import selective_update

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-15

METRIC_COLUMNS = ["iteration", "rgb", "distortion", "normal", "fea", "df", "dn", "total", "splat_count",
                  "updated_count"]

# column slices of the packed (N, 10) layout
P_COLS = slice(0, 3)
Q_COLS = slice(3, 7)
S_COLS = slice(7, 9)
O_COLS = slice(9, 10)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int, width: int = N_LEARNABLE) -> "AdamState":
        return cls(np.zeros((n, width)), np.zeros((n, width)))

    def reset_rows(self, rows: np.ndarray, cols: slice) -> None:
        self.m[rows, cols] = 0.0
        self.v[rows, cols] = 0.0


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lrs) -> np.ndarray:
    """One bias-corrected Adam step. ``lrs`` broadcasts against ``params``.

    Returns the updated parameters; ``state`` is advanced in place.

    Raises:
        NonFiniteGradient: if any gradient is NaN or infinite.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradient("non-finite gradient", iteration=state.step + 1)
    state.step += 1
    state.m *= BETA1
    state.m += (1 - BETA1) * grads
    state.v *= BETA2
    state.v += (1 - BETA2) * grads * grads
    mhat = state.m / (1 - BETA1**state.step)
    vhat = state.v / (1 - BETA2**state.step)
    return params - np.asarray(lrs) * mhat / (np.sqrt(vhat) + EPS)


def position_lr(cfg: TrainConfig, extent: float, iteration: int) -> float:
    """Log-linear decay from ``lr.position`` to ``lr.position_final`` (both times extent)."""
    frac = min(max((iteration - 1) / max(cfg.iterations - 1, 1), 0.0), 1.0)
    lo, hi = math.log(cfg.lr.position_final), math.log(cfg.lr.position)
    return extent * math.exp(hi + (lo - hi) * frac)


def lr_row(cfg: TrainConfig, extent: float, iteration: int) -> np.ndarray:
    row = np.empty(N_LEARNABLE)
    row[P_COLS] = position_lr(cfg, extent, iteration)
    row[Q_COLS] = cfg.lr.rotation
    row[S_COLS] = cfg.lr.scale
    row[O_COLS] = 0.0 if cfg.freeze_opacity else cfg.lr.opacity
    return row


@dataclass
class TrainingViews:
    cameras: list[Camera]
    images: list[np.ndarray]
    feature_maps: list[np.ndarray]

    def __post_init__(self):
        if not (len(self.cameras) == len(self.images) == len(self.feature_maps)) or not self.cameras:
            raise ValueError("cameras, images and feature maps must be non-empty and aligned")


@dataclass
class StepResult:
    report: L.LossReport
    grad: GradientBuffer
    render: object
    target: int | None = None


def compute_loss(scene: Scene, views: TrainingViews, cfg: TrainConfig, view: int, iteration: int,
                 grad: bool = True, normal_target=None) -> StepResult:
    """Total objective for one training view and, optionally, its gradient.

    ``normal_target`` replaces the render used as the disk-normal target; the
    finite-difference tests pass a fixed render there so the detached target
    does not move with the parameters.
    """
    cam = views.cameras[view]
    out = render(scene, cam)
    lc = cfg.loss
    w = lc.weights()
    if iteration < lc.distortion_start:
        w = dataclasses.replace(w, distortion=0.0)
    thr = lc.mask_threshold
    acc_mask = out.acc if lc.feature_mask else np.ones_like(out.acc)
    r_rgb = L.loss_rgb(out.color, views.images[view], lc.rgb_l1, grad=grad)
    segs, dmdt = out.ray_segments, None
    if lc.distortion_depth == "ndc":
        # map only live slots; the rest of the buffer is uninitialised
        live = np.arange(segs.t.shape[2]) < segs.count[..., None]
        m, dmdt = L.ndc_depth(np.where(live, segs.t, 1.0))
        segs = dataclasses.replace(segs, t=m)
    r_d = L.loss_distortion(segs, grad=grad)
    if grad and dmdt is not None:
        r_d = (r_d[0], r_d[1], r_d[2] * dmdt)
    r_n = L.loss_normal_consistency(out.normal, out.depth, cam, out.acc, thr, grad=grad)
    r_f = L.loss_feature(out.feature, views.feature_maps[view], acc_mask, thr, grad=grad)
    tgt = pick_target(len(views.cameras), view, cfg.seed + cfg.dgpr.seed, iteration)
    dr = loss_dr(scene, views.cameras, views.feature_maps, out if normal_target is None else normal_target,
                 view, tgt, k=cfg.dgpr.k, subset=cfg.dgpr.subset if w.dr > 0 else 0,
                 seed=cfg.seed + cfg.dgpr.seed, iteration=iteration, detach_normal=cfg.dgpr.detach_normal,
                 grad=grad)
    if not grad:
        parts = L.LossReport(r_rgb, r_d, r_n, r_f, dr.df, dr.dn)
        return StepResult(L.total(parts, w), None, out, tgt)
    parts = L.LossReport(r_rgb[0], r_d[0], r_n[0], r_f[0], dr.df, dr.dn)
    try:
        report = L.total(parts, w)
    except NonFinite as exc:
        raise NonFinite(f"iteration {iteration}: {exc}", iteration=iteration) from None
    g_normal = w.normal * r_n[1]
    if dr.normal_upstream is not None:
        g_normal = g_normal + w.dr * dr.normal_upstream
    up = Upstream(color=r_rgb[1], feature=w.feature * r_f[1], depth=w.normal * r_n[2], normal=g_normal,
                  seg_weight=w.distortion * r_d[1], seg_t=w.distortion * r_d[2])
    g = render_backward(scene, cam, out, up)
    if dr.grad is not None and w.dr > 0:
        g += dr.grad.scaled(w.dr)
    return StepResult(report, g, out, tgt)


# ----------------------------------------------------------------------------
# adaptive density control (comparator only)


@dataclass
class _AdcStats:
    grad_sum: np.ndarray
    count: np.ndarray
    next_pixel: int = 0


def _screen_grad(scene: Scene, cam: Camera, gp: np.ndarray) -> np.ndarray:
    # |dL/dp| expressed per NDC unit of the projected centre
    z = np.maximum(scene.p @ cam.R[2] + cam.t[2], 1e-6)
    return np.linalg.norm(gp, axis=1) * z * cam.width / (2.0 * cam.intrinsics.fx)


def _densify(scene: Scene, state: AdamState, stats: _AdcStats, cfg: TrainConfig, rng: np.random.Generator):
    a = cfg.adc
    avg = stats.grad_sum / np.maximum(stats.count, 1)
    hot = avg > a.grad_threshold
    big = np.exp(scene.log_s).max(axis=1) > a.split_scale * scene.extent
    clone = np.flatnonzero(hot & ~big)
    split = np.flatnonzero(hot & big)
    keep = np.ones(len(scene), bool)
    keep[split] = False
    parts = [scene.subset(np.flatnonzero(keep)), scene.subset(clone)]
    m_parts = [state.m[keep], np.zeros((clone.size, N_LEARNABLE))]
    if split.size:
        for _ in range(2):
            child = scene.subset(split)
            R = quat_to_rotmat(child.q)
            s = np.exp(child.log_s)
            off = rng.standard_normal((split.size, 2)) * s
            child.p = child.p + off[:, :1] * R[:, :, 0] + off[:, 1:] * R[:, :, 1]
            child.log_s = child.log_s - math.log(1.6)
            parts.append(child)
            m_parts.append(np.zeros((split.size, N_LEARNABLE)))
    v_parts = [state.v[keep]] + [np.zeros_like(m) for m in m_parts[1:]]
    new = _concat(parts, scene.extent)
    # fresh provenance keys for new splats so their random streams stay distinct
    n_old = int(keep.sum())
    extra = len(new) - n_old
    if extra:
        new.pixel_index[n_old:] = np.arange(stats.next_pixel, stats.next_pixel + extra, dtype=np.int32)
        stats.next_pixel += extra
    alive = new.opacity > a.prune_opacity
    m = np.concatenate(m_parts)[alive]
    v = np.concatenate(v_parts)[alive]
    new = new.subset(np.flatnonzero(alive))
    return new, AdamState(m, v, state.step)


def _concat(scenes: list[Scene], extent: float) -> Scene:
    keys = ("p", "q", "log_s", "opacity_logit", "color", "feature", "view_index", "pixel_index")
    return Scene(*(np.concatenate([getattr(s, k) for s in scenes]) for k in keys), extent=extent)


# ----------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    scene: Scene
    metrics: list[dict] = field(default_factory=list)
    appearance_checksum: str = ""


def train(scene: Scene, views: TrainingViews, cfg: TrainConfig, metrics_path: str | Path | None = None,
          progress_every: int = 0) -> TrainResult:
    """Optimise ``scene`` against the training views.

    Views are visited round-robin. Every ``sgu.every`` iterations all views are
    re-rendered and the selective update runs; moved splats get their position
    moments reset. With ``adc.enabled`` the clone/split/prune comparator runs
    instead of (or, if both are on, alongside) the selective update.
    """
    scene = scene.copy()
    for name in ("p", "q", "log_s", "opacity_logit", "color", "feature"):
        bad = ~np.isfinite(getattr(scene, name))
        if bad.any():
            raise NonFinite(f"initial scene has non-finite {name} (splat {int(np.argwhere(bad)[0][0])})")
    checksum = scene.appearance_checksum()
    state = AdamState.zeros(len(scene))
    rng = np.random.default_rng([cfg.seed, 99])
    V = len(views.cameras)
    stats = None
    if cfg.adc.enabled:
        stats = _AdcStats(np.zeros(len(scene)), np.zeros(len(scene)),
                          next_pixel=int(scene.pixel_index.max(initial=0)) + 1 + (1 << 24))
    if metrics_path is not None:
        Path(metrics_path).unlink(missing_ok=True)
    rows = []
    for it in range(1, cfg.iterations + 1):
        view = (it - 1) % V
        step = compute_loss(scene, views, cfg, view, it)
        g = step.grad
        if cfg.freeze_opacity:
            g.opacity_logit[:] = 0.0
        params = np.concatenate([scene.p, scene.q, scene.log_s, scene.opacity_logit[:, None]], axis=1)
        try:
            params = adam_step(params, g.packed().reshape(-1, N_LEARNABLE), state, lr_row(cfg, scene.extent, it))
        except NonFiniteGradient as exc:
            raise NonFiniteGradient(f"iteration {it}: {exc}", iteration=it) from None
        scene.p = params[:, P_COLS].copy()
        scene.q = normalize_quaternions(params[:, Q_COLS])
        scene.log_s = params[:, S_COLS].copy()
        scene.opacity_logit = params[:, 9].copy()

        if stats is not None:
            stats.grad_sum += _screen_grad(scene, views.cameras[view], g.p)
            stats.count += 1
            a = cfg.adc
            if a.start <= it <= a.stop and it % a.every == 0:
                scene, state = _densify(scene, state, stats, cfg, rng)
                stats.grad_sum = np.zeros(len(scene))
                stats.count = np.zeros(len(scene))

        updated = 0
        if cfg.sgu.enabled and it >= cfg.sgu.start and it % cfg.sgu.every == 0:
            renders = [render(scene, c) for c in views.cameras]
            res = selective_update(scene, renders, views.cameras, views.images, cfg.sgu.half,
                                   seed=cfg.seed, iteration=it)
            state.reset_rows(res.updated, P_COLS)
            updated = res.count

        r = step.report
        row = {"iteration": it, "rgb": r.rgb, "distortion": r.distortion, "normal": r.normal, "fea": r.fea,
               "df": r.df, "dn": r.dn, "total": r.total, "splat_count": len(scene), "updated_count": updated}
        rows.append(row)
        if metrics_path is not None:
            csv_append(metrics_path, row, METRIC_COLUMNS)
        if progress_every and it % progress_every == 0:
            log.info("iter %d total %.5f rgb %.5f splats %d updated %d", it, r.total, r.rgb, len(scene), updated)
    if scene.appearance_checksum() != checksum and not cfg.adc.enabled:
        raise RuntimeError("frozen appearance was modified during training")
    return TrainResult(scene, rows, checksum)
