import matplotlib
import numpy as np
import pytest

from sparsesplat import plotting

PNG = b"\x89PNG\r\n\x1a\n"


def _is_png(path):
    return path.exists() and path.read_bytes()[:8] == PNG


def test_backend_is_headless():
    assert matplotlib.get_backend().lower() == "agg"


def test_figsize_uses_column_width():
    w, h = plotting.figsize(2.0, 0.5)
    assert w == pytest.approx(2 * plotting.COLUMN_WIDTH)
    assert h == pytest.approx(plotting.COLUMN_WIDTH)


def test_plot_metrics_skips_zero_series(tmp_path):
    rows = [{"iteration": i, "total": 1.0 / i, "rgb": 0.5 / i, "distortion": 0.0, "normal": 0.1,
             "fea": 0.2, "df": 0.0, "dn": 0.0} for i in range(1, 20)]
    out = plotting.plot_metrics(rows, tmp_path / "sub" / "metrics.png")
    assert _is_png(out)


def test_plot_ablation_and_chamfer(tmp_path):
    assert _is_png(plotting.plot_ablation(["a", "b", "c"], [0.01, 0.02, 0.015], tmp_path / "abl.png", reference="a"))
    assert _is_png(plotting.plot_ablation([], [], tmp_path / "empty.png"))
    assert _is_png(plotting.plot_chamfer({"mesh": (0.01, 0.02, 0.015), "gt": (0.0, 0.0, 0.0)}, tmp_path / "cd.png"))


def test_plot_depth_error_handles_invalid_pixels(tmp_path):
    ref = np.full((16, 16), 2.0)
    ref[:4] = 0.0
    depth = ref + 0.01 * np.arange(256).reshape(16, 16)
    depth[5, 5] = np.nan
    assert _is_png(plotting.plot_depth_error(depth, ref, tmp_path / "err.png"))
    assert _is_png(plotting.plot_depth_error(depth, np.zeros_like(ref), tmp_path / "none.png"))


def test_figures_are_closed(tmp_path):
    import matplotlib.pyplot as plt

    before = len(plt.get_fignums())
    plotting.plot_ablation(["a"], [1.0], tmp_path / "x.png")
    assert len(plt.get_fignums()) == before
