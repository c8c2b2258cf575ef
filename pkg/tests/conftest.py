import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from splatsweep.camera import Intrinsics, OrbitSpec, orbit_camera  # noqa: E402
from splatsweep.gsmath import GaussianCloud, num_sh_coeffs, rgb_to_sh0  # noqa: E402


def random_cloud(rng, n, degree=0, spread=0.4, scale=(0.05, 0.25), sh_noise=0.1):
    k = num_sh_coeffs(degree)
    sh = rng.normal(0.0, sh_noise, (n, k, 3))
    sh[:, 0, :] = rgb_to_sh0(rng.uniform(0.2, 0.8, (n, 3)))
    return GaussianCloud(
        rng.uniform(-spread, spread, (n, 3)),
        rng.normal(size=(n, 4)),
        np.log(rng.uniform(scale[0], scale[1], (n, 3))),
        rng.normal(0.0, 1.5, n),
        sh,
        degree,
    )


def small_camera(size=32, elevation=20.0, azimuth=30.0, radius=2.5):
    return orbit_camera(OrbitSpec(elevation, azimuth, radius), Intrinsics(width=size, height=size))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting --------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): test belongs to acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    entry = _CRITERIA.setdefault(mark.args[0], {"ok": True, "details": []})
    entry["ok"] &= rep.passed
    details = [v for k, v in item.user_properties if k == "detail"]
    if rep.failed and not details:
        details = [f"{item.name} failed"]
    entry["details"] += details


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if e['ok'] else 'FAIL'}  {'; '.join(e['details'])}")
