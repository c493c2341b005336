"""Command-line entry point: ``sparsesplat <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import fuse, io
from .config import TrainConfig
from .errors import DataError, FormatError, NonFinite, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("sparsesplat")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    import numba

    if n < 1:
        raise UsageError("--threads must be >= 1")
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _overrides(extra: list[str]) -> dict[str, str]:
    """Parse trailing ``--dotted.key value`` (or ``--dotted.key=value``) pairs."""
    pairs: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) <= 2:
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for --{key}")
            val = extra[i + 1]
            i += 2
        pairs[key] = val
    return pairs


def _config(args, extra: list[str]) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if getattr(args, "config", None) else TrainConfig()
    pairs = _overrides(extra)
    if args.seed is not None:
        pairs.setdefault("seed", str(args.seed))
    try:
        return cfg.update(pairs)
    except (KeyError, ValueError) as exc:
        raise UsageError(exc.args[0] if exc.args else str(exc)) from None


def _need_dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"scene directory not found: {p}")
    return p


# ----------------------------------------------------------------------------
# subcommands


def cmd_synth(args, extra):
    from .experiments import make_scene_data, write_scene_dir

    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    data = make_scene_data(args.kind, args.views, args.res, args.texture, seed=args.seed or 0,
                           sigma_rel=args.sigma, dropout_frac=args.dropout, outlier_frac=args.outliers)
    out = write_scene_dir(args.out, data)
    print(f"wrote {len(data.cameras)} views at {args.res}x{args.res} to {out}")


def _plane_residual(scene, k: int = 3) -> float:
    # RMS offset of each splat's nearest neighbours from its disk plane
    from scipy.spatial import cKDTree

    from .scene import quat_to_rotmat

    if len(scene) <= k:
        return 0.0
    _, idx = cKDTree(scene.p).query(scene.p, k + 1)
    n = quat_to_rotmat(scene.q)[:, :, 2]
    off = ((scene.p[idx[:, 1:]] - scene.p[:, None, :]) * n[:, None, :]).sum(-1)
    return float(np.sqrt(np.mean(off**2)))


def cmd_init(args, extra):
    from .experiments import init_scene, load_scene_dir

    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    data = load_scene_dir(_need_dir(args.scene))
    scene = init_scene(data, args.depth, args.stride, args.subsample, seed=args.seed or 0, opacity=args.opacity)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    io.write_splats(args.out, scene)
    print(f"splats {len(scene)}  plane-fit residual {_plane_residual(scene):.6g}  extent {scene.extent:.6g}")


def cmd_train(args, extra):
    from .experiments import load_scene_dir
    from .optim import train
    from .plotting import plot_metrics

    cfg = _config(args, extra)
    data = load_scene_dir(_need_dir(args.scene))
    scene = io.read_splats(args.init)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "resolved.cfg")
    res = train(scene, data.views, cfg, metrics_path=out / "metrics.csv", progress_every=args.progress)
    io.write_splats(out / "final.ply", res.scene)
    plot_metrics(res.metrics, out / "metrics.png")
    last = res.metrics[-1]
    print(f"iterations {cfg.iterations}  final total {last['total']:.6g}  rgb {last['rgb']:.6g}  "
          f"splats {len(res.scene)}  -> {out / 'final.ply'}")


def cmd_render(args, extra):
    from .experiments import load_scene_dir
    from .render import render

    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    data = load_scene_dir(_need_dir(args.scene))
    if not 0 <= args.view < len(data.cameras):
        raise UsageError(f"--view must be in [0, {len(data.cameras) - 1}]")
    scene = io.read_splats(args.ckpt)
    out = render(scene, data.cameras[args.view])
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    v = args.view
    io.ppm_write(d / f"color_{v:02d}.ppm", out.color)
    io.pfm_write(d / f"depth_{v:02d}.pfm", out.depth.astype(np.float32))
    io.ppm_write(d / f"normal_{v:02d}.ppm", 0.5 * (out.normal + 1.0))
    io.pfm_write(d / f"acc_{v:02d}.pfm", out.acc.astype(np.float32))
    if args.plots:
        from .plotting import plot_depth_error

        plot_depth_error(np.where(out.acc > 0.5, out.depth, np.nan), data.depths_gt[v], d / f"depth_err_{v:02d}.png")
    print(f"rendered view {v} to {d}")


def cmd_mesh(args, extra):
    from .experiments import extract_mesh, load_scene_dir

    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    data = load_scene_dir(_need_dir(args.scene))
    scene = io.read_splats(args.ckpt)
    mesh = extract_mesh(scene, data.cameras, args.voxel, args.trunc)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    io.write_mesh(args.out, mesh.vertices, mesh.faces)
    print(f"vertices {len(mesh.vertices)}  faces {len(mesh.faces)}  -> {args.out}")


def cmd_eval(args, extra):
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    verts, faces = io.read_mesh(args.mesh)
    gt = io.read_points(args.gt)
    res = fuse.chamfer(fuse.Mesh(verts, faces), gt, args.samples, seed=args.seed or 0)
    print(f"accuracy {res.accuracy:.6g}  completeness {res.completeness:.6g}  average {res.average:.6g}")
    io.csv_append(args.results, {"mesh": str(args.mesh), "gt": str(args.gt), "accuracy": res.accuracy,
                                 "completeness": res.completeness, "average": res.average})
    if args.plots:
        from .plotting import plot_chamfer

        plot_chamfer({Path(args.mesh).stem: (res.accuracy, res.completeness, res.average)},
                     Path(args.results).with_suffix(".png"))


def cmd_ablate(args, extra):
    from .experiments import load_scene_dir, run_suite, write_suite_table

    cfg = _config(args, extra)
    data = load_scene_dir(_need_dir(args.scene))
    results = run_suite(data, args.suite, cfg, Path(args.out) / args.suite, args.samples)
    csv_path, png = write_suite_table(results, args.suite, args.out)
    print("label,accuracy,completeness,average,splats,seconds")
    for r in results:
        c = r.chamfer
        print(f"{r.label},{c.accuracy:.6g},{c.completeness:.6g},{c.average:.6g},{r.splats},{r.seconds:.1f}")
    print(f"table {csv_path}  figure {png}")


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    # SUPPRESS keeps a value given before the subcommand from being reset by the subparser default
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="numba worker threads")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="sparsesplat", description="Sparse-view surface reconstruction with 2D Gaussian disks.",
                parents=[common])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic scene directory")
    s.add_argument("--kind", choices=("sphere", "plane", "boxes"), default="sphere")
    s.add_argument("--texture", choices=("checker", "perlin"), default="checker")
    s.add_argument("--views", type=int, default=3)
    s.add_argument("--res", type=int, default=128)
    s.add_argument("--sigma", type=float, default=0.01, help="relative depth noise")
    s.add_argument("--dropout", type=float, default=0.05)
    s.add_argument("--outliers", type=float, default=0.02)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("init", parents=[common], help="fuse depths into an initial splat checkpoint")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--depth", choices=("mvs", "gt"), default="mvs")
    s.add_argument("--stride", type=int, default=None)
    s.add_argument("--subsample", type=float, default=1.0, help="random fraction of points kept")
    s.add_argument("--opacity", type=float, default=0.9)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("train", parents=[common], help="optimise a checkpoint; --dotted.key value overrides config")
    s.add_argument("--scene", required=True)
    s.add_argument("--init", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--progress", type=int, default=0, help="log every N iterations")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", parents=[common], help="render one view to PPM/PFM buffers")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--view", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--plots", action="store_true", help="also write a depth-error figure")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("mesh", parents=[common], help="TSDF-fuse rendered depths and extract a mesh")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--voxel", type=float, default=fuse.DEFAULT_VOXEL)
    s.add_argument("--trunc", type=float, default=fuse.DEFAULT_TRUNC)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mesh)

    s = sub.add_parser("eval", parents=[common], help="Chamfer distance of a mesh against GT points")
    s.add_argument("--mesh", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--samples", type=int, default=200_000)
    s.add_argument("--results", default="results.csv")
    s.add_argument("--plots", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="paired ablation runs; --dotted.key value overrides config")
    s.add_argument("--scene", required=True)
    s.add_argument("--suite", choices=("init", "color", "dgpr", "sgu", "k"), required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--out", default="ablate")
    s.add_argument("--samples", type=int, default=100_000)
    s.set_defaults(func=cmd_ablate)
    return p


_TAKES_OVERRIDES = {"train", "ablate"}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        for name in ("threads", "seed", "verbose"):
            if not hasattr(args, name):
                setattr(args, name, None)
        if args.command is None:
            raise UsageError("a subcommand is required (see --help)")
        if extra and args.command not in _TAKES_OVERRIDES:
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
        logging.basicConfig(level=logging.INFO if args.verbose or getattr(args, "progress", 0) else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _set_threads(args.threads)
        args.func(args, extra)
        return EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFinite as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
