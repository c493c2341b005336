import numpy as np
import pytest

from sparsesplat import experiments, io
from sparsesplat.config import TrainConfig
from sparsesplat.fuse import ChamferResult


@pytest.fixture(scope="module")
def data():
    return experiments.make_scene_data("sphere", n_views=3, resolution=32, seed=0)


def test_scene_dir_round_trip(data, tmp_path):
    experiments.write_scene_dir(tmp_path, data)
    back = experiments.load_scene_dir(tmp_path)
    assert len(back.cameras) == 3
    for a, b in zip(data.cameras, back.cameras):
        np.testing.assert_allclose(a.pose.rotation, b.pose.rotation, atol=1e-12)
        np.testing.assert_allclose(a.pose.translation, b.pose.translation, atol=1e-12)
    for i in range(3):
        np.testing.assert_allclose(back.images[i], data.images[i], atol=0.5 / 255 + 1e-12)
        np.testing.assert_array_equal(back.depths_gt[i], data.depths_gt[i].astype(np.float32))
        np.testing.assert_array_equal(back.features[i], data.features[i].astype(np.float32))
    np.testing.assert_allclose(back.gt_points, data.gt_points, atol=1e-6)
    assert back.gt_mesh is not None


def test_missing_scene_file(data, tmp_path):
    experiments.write_scene_dir(tmp_path, data)
    (tmp_path / "depth_mvs_01.pfm").unlink()
    with pytest.raises(FileNotFoundError):
        experiments.load_scene_dir(tmp_path)


def test_init_scene_sources_and_subsample(data):
    dense = experiments.init_scene(data)
    sparse = experiments.init_scene(data, subsample=0.01)
    gt = experiments.init_scene(data, source="gt")
    assert 4 <= len(sparse) < 0.02 * len(dense) + 4
    # fewer points means wider disks
    assert np.median(sparse.log_s) > np.median(dense.log_s)
    assert sparse.extent == pytest.approx(dense.extent)
    assert len(gt) > 0
    again = experiments.init_scene(data, subsample=0.01)
    np.testing.assert_array_equal(again.p, sparse.p)
    with pytest.raises(ValueError):
        experiments.init_scene(data, source="lidar")


def test_suites_reference_existing_labels():
    assert set(experiments.REFERENCE) == set(experiments.SUITES)
    for suite, runs in experiments.SUITES.items():
        labels = [r[0] for r in runs]
        assert len(set(labels)) == len(labels)
        assert experiments.REFERENCE[suite] in labels
    for _, overrides, _ in sum(experiments.SUITES.values(), []):
        TrainConfig().update(overrides)  # every override is a valid key


def test_unknown_suite(data):
    with pytest.raises(KeyError):
        experiments.run_suite(data, "nope", TrainConfig(iterations=1))


def test_run_writes_outputs(data, tmp_path):
    r = experiments.run(data, TrainConfig(iterations=3), "tiny", out_dir=tmp_path, samples=2000)
    assert {"resolved.cfg", "metrics.csv", "final.ply"} <= {p.name for p in tmp_path.iterdir()}
    assert len(r.metrics) == 3
    assert np.isfinite(r.chamfer.average)
    assert r.row("s")["label"] == "tiny"


def test_write_suite_table(tmp_path):
    results = [experiments.RunResult("sgu", ChamferResult(0.01, 0.02, 0.015), 10, 1.0),
               experiments.RunResult("adc", ChamferResult(0.02, 0.03, 0.025), 12, 2.0)]
    csv_path, png = experiments.write_suite_table(results, "sgu", tmp_path)
    rows = io.csv_read(csv_path)
    assert [r["label"] for r in rows] == ["sgu", "adc"]
    assert float(rows[1]["average"]) == pytest.approx(0.025)
    assert png.stat().st_size > 0
    # rewriting replaces rather than appends
    experiments.write_suite_table(results[:1], "sgu", tmp_path)
    assert len(io.csv_read(csv_path)) == 1
