"""Shared helpers for the test suite."""

import numpy as np
import pytest
from hypothesis import settings

from sparsesplat.geom import Camera, Intrinsics, Pose

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def simple_camera(f=100.0, c=50.0, size=100, pose=None, near=0.01, far=100.0) -> Camera:
    return Camera(Intrinsics(f, f, c, c, size, size), pose or Pose.identity(), near, far)


def random_camera(rng: np.random.Generator, size=64, dist=3.0) -> Camera:
    """Camera on a sphere of radius ``dist`` looking roughly at the origin."""
    d = rng.normal(size=3)
    eye = dist * d / np.linalg.norm(d)
    target = rng.normal(scale=0.1, size=3)
    up = rng.normal(size=3)
    if abs(np.dot(up / np.linalg.norm(up), (target - eye) / np.linalg.norm(target - eye))) > 0.95:
        up = np.array([0.0, 1.0, 0.0]) if abs(eye[1]) < 2.5 else np.array([1.0, 0.0, 0.0])
    f = 1.2 * size
    return Camera(Intrinsics(f, f, size / 2, size / 2, size, size), Pose.look_at(eye, target, up), 0.1, 10.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance summary

_ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    verdict = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    _ACCEPTANCE.append((str(props["criterion"]), verdict, str(props.get("detail", ""))))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{verdict}  criterion {name}  {detail}")
