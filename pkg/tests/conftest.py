import sys

import numpy as np
import pytest

from vdgs.geometry import Camera, GaussianCloud


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_cloud(n, seed=0, degree=0, spread=0.5, depth=3.0, dtype=np.float64, scale=(0.05, 0.2)):
    rng = np.random.default_rng(seed)
    k = (degree + 1) ** 2
    means = rng.uniform(-spread, spread, size=(n, 3))
    means[:, 2] += depth
    sh = rng.normal(0, 0.1, size=(n, 3, k))
    sh[:, :, 0] = rng.uniform(-1.5, 1.5, size=(n, 3))
    return GaussianCloud(
        means=means.astype(dtype),
        log_scales=np.log(rng.uniform(*scale, size=(n, 3))).astype(dtype),
        rotations=rng.normal(size=(n, 4)).astype(dtype),
        opacity_logits=rng.normal(0, 1.5, size=n).astype(dtype),
        sh=sh.astype(dtype),
        sh_degree=degree,
    )


def axis_camera(size=32, f=40.0, **kw):
    return Camera(size, size, f, f, size / 2, size / 2, np.eye(4), **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
