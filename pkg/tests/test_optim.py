import numpy as np
import pytest

from sparsesplat import init, synth
from sparsesplat.config import TrainConfig, parse_pairs
from sparsesplat.errors import NonFiniteGradient
from sparsesplat.optim import AdamState, P_COLS, TrainingViews, adam_step, position_lr, train


# ---------------------------------------------------------------- adam

def test_zero_gradient_keeps_params_and_decays_moments():
    st = AdamState.zeros(2, 3)
    st.m[:] = 1.0
    st.v[:] = 4.0
    st.step = 5
    x = np.arange(6.0).reshape(2, 3)
    y = adam_step(x, np.zeros((2, 3)), st, 0.0)
    np.testing.assert_array_equal(y, x)
    np.testing.assert_allclose(st.m, 0.9)
    np.testing.assert_allclose(st.v, 4 * 0.999)


def test_quadratic_converges():
    x = np.array([[1.0]])
    st = AdamState.zeros(1, 1)
    for _ in range(200):
        x = adam_step(x, 2 * x, st, 0.1)
    assert abs(x[0, 0]) < 1e-3


@pytest.mark.parametrize("g", [1e-6, 0.3, -50.0])
def test_first_step_is_lr(g):
    st = AdamState.zeros(1, 1)
    y = adam_step(np.zeros((1, 1)), np.full((1, 1), g), st, 0.01)
    assert y[0, 0] == pytest.approx(-0.01 * np.sign(g), rel=1e-6)


def test_nonfinite_gradient_aborts():
    with pytest.raises(NonFiniteGradient):
        adam_step(np.zeros((1, 2)), np.array([[0.0, np.nan]]), AdamState.zeros(1, 2), 0.1)


def test_reset_rows():
    st = AdamState.zeros(3)
    st.m[:] = 1
    st.v[:] = 1
    st.reset_rows(np.array([1]), P_COLS)
    assert not st.m[1, :3].any() and st.m[1, 3:].all() and st.m[0].all()


def test_position_lr_schedule():
    cfg = TrainConfig(iterations=100)
    assert position_lr(cfg, 2.0, 1) == pytest.approx(2 * 1.6e-4)
    assert position_lr(cfg, 2.0, 100) == pytest.approx(2 * 1.6e-6)
    assert position_lr(cfg, 1.0, 50) < position_lr(cfg, 1.0, 49)


# ---------------------------------------------------------------- config

def test_config_defaults():
    c = TrainConfig()
    assert c.iterations == 7000
    assert (c.loss.l1, c.loss.l2, c.loss.l3, c.loss.l4) == (1000, 0.05, 1, 0.2)
    assert c.sgu.every == 100 and c.sgu.half == 3
    assert c.dgpr.k == 25 and c.dgpr.subset == 4096
    assert (c.lr.rotation, c.lr.scale, c.lr.opacity) == (1e-3, 5e-3, 5e-2)
    assert (c.loss.distortion_depth, c.loss.distortion_start, c.sgu.start) == ("ndc", 3000, 1)


def test_config_round_trip_and_overrides(tmp_path):
    c = TrainConfig().update({"sgu.every": "50", "loss.l1": "0.5", "dgpr.detach_normal": "false", "seed": 3})
    path = tmp_path / "a.cfg"
    c.save(path)
    d = TrainConfig.load(path)
    assert d.flat() == c.flat()
    assert d.sgu.every == 50 and d.loss.l1 == 0.5 and d.dgpr.detach_normal is False and d.seed == 3
    assert parse_pairs("# comment\n\na = 1  # trailing\n") == {"a": "1"}


@pytest.mark.parametrize("pairs, exc", [
    ({"nope": 1}, KeyError), ({"sgu.nope": 1}, KeyError), ({"loss": 1}, KeyError),
    ({"iterations": 0}, ValueError), ({"lr.scale": "-1"}, ValueError), ({"loss.l2": "-0.1"}, ValueError),
    ({"sgu.enabled": "maybe"}, ValueError), ({"dgpr.k": "abc"}, ValueError),
    ({"loss.distortion_depth": "log"}, ValueError),
])
def test_config_rejects(pairs, exc):
    with pytest.raises(exc):
        TrainConfig().update(pairs)


def test_config_rejects_malformed_line():
    with pytest.raises(ValueError):
        TrainConfig.loads("iterations 10\n")


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def plane_views():
    sc = synth.make_scene("plane", "perlin", 32, 3)
    feats = [synth.feature_extract(im) for im in sc.images]
    return sc, feats


def test_noiseless_plane_trend(plane_views):
    sc, feats = plane_views
    scene = init.initialize(sc.depths, sc.cameras, sc.images, feats)
    res = train(scene, TrainingViews(sc.cameras, sc.images, feats), TrainConfig(iterations=200))
    tot = np.array([r["total"] for r in res.metrics])
    means = tot.reshape(4, 50).mean(axis=1)
    assert np.all(np.diff(means) <= 1e-12), means
    assert {r["splat_count"] for r in res.metrics} == {len(scene)}
    assert res.scene.appearance_checksum() == scene.appearance_checksum()


def test_colour_only_fit_converges(plane_views):
    sc, feats = plane_views
    scene = init.initialize(sc.depths, sc.cameras, sc.images, feats)
    cfg = TrainConfig(iterations=150).update({"loss.l3": 0, "loss.l4": 0, "loss.distortion_start": 1})
    res = train(scene, TrainingViews(sc.cameras, sc.images, feats), cfg)
    rgb = np.array([r["rgb"] for r in res.metrics])
    assert rgb[-30:].mean() < rgb[:30].mean()
    for r in res.metrics:
        assert r["total"] == pytest.approx(r["rgb"] + 1000 * r["distortion"] + 0.05 * r["normal"], rel=1e-12)
    assert np.isfinite(res.scene.p).all()


def test_fixed_seed_is_bit_identical(plane_views, tmp_path):
    sc, feats = plane_views
    scene = init.initialize(sc.depths, sc.cameras, sc.images, feats, stride=2)
    views = TrainingViews(sc.cameras, sc.images, feats)
    cfg = TrainConfig(iterations=30).update({"sgu.every": 10})
    train(scene, views, cfg, metrics_path=tmp_path / "a.csv")
    train(scene, views, cfg, metrics_path=tmp_path / "b.csv")
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    assert a.splitlines()[0] == b"iteration,rgb,distortion,normal,fea,df,dn,total,splat_count,updated_count"
    assert len(a.splitlines()) == 31


def test_frozen_opacity(plane_views):
    sc, feats = plane_views
    scene = init.initialize(sc.depths, sc.cameras, sc.images, feats, stride=2)
    res = train(scene, TrainingViews(sc.cameras, sc.images, feats),
                TrainConfig(iterations=10, freeze_opacity=True))
    np.testing.assert_array_equal(res.scene.opacity_logit, scene.opacity_logit)
    assert not np.array_equal(res.scene.p, scene.p)
