import numpy as np
import pytest

from refrax.geometry import Medium, MediumMap, make_box, make_sphere
from refrax.lightpath import Scene

ACCEPTANCE_LINES = []


def record(criterion, passed, detail):
    line = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[-1])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def glass():
    return MediumMap({1: Medium(1.5)})


@pytest.fixture(scope="session")
def sphere_scene(glass):
    return Scene(make_sphere(0.5, 3), glass)


@pytest.fixture(scope="session")
def box_scene(glass):
    return Scene(make_box((0.8, 0.8, 0.8)), glass)
