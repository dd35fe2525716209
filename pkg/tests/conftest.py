import numpy as np
import pytest

from viper import quaternion as quat
from viper.rod import RodState, make_rest_pose


def helix_centers(n=9, radius=0.3, pitch=0.2, turns=1.0):
    t = np.linspace(0.0, 2 * np.pi * turns, n)
    return np.column_stack([radius * np.cos(t), radius * np.sin(t), pitch * t])


def perturbed_state(rest, rng, amount=0.05):
    n, m = rest.vertex_count, rest.element_count
    frames = quat.mul(rest.frames, quat.exp(rng.normal(scale=amount * 4, size=(m, 3))))
    return RodState(
        rest.centers + rng.normal(scale=amount, size=(n, 3)),
        rest.scales * (1.0 + rng.uniform(-0.3, 0.3, n)),
        frames,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def helix_rest():
    return make_rest_pose(helix_centers(), np.linspace(0.05, 0.08, 9), scales=np.linspace(0.9, 1.2, 9))


_acceptance = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        detail = dict(report.user_properties).get("detail", "")
        name = report.nodeid.split("::")[-1].removeprefix("test_").replace("_", " ")
        _acceptance.append(f"{'PASS' if report.passed else 'FAIL'}  {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if _acceptance:
        terminalreporter.section("acceptance")
        for line in _acceptance:
            terminalreporter.write_line(line)
