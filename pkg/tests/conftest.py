import numpy as np
import pytest

from dvoslam.camera import PinholeIntrinsics
from dvoslam.geometry import RigidPose
from dvoslam.synthscene import default_scene, render_frame


@pytest.fixture(scope="session")
def small_camera():
    return PinholeIntrinsics(250.0, 250.0, 159.5, 119.5, 320, 240)


@pytest.fixture(scope="session")
def small_scene(small_camera):
    return default_scene(small_camera)


@pytest.fixture(scope="session")
def first_frame(small_scene):
    return render_frame(small_scene, RigidPose())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, shown at the end of every run
_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "measured")
    status = "PASS" if rep.passed else "FAIL"
    _CRITERIA[number] = f"criterion {number:2d} {status}  {title}" + (f"  [{detail}]" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
