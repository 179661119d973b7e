import time

import numpy as np
import pytest

from filmhom.cell import build_density_table
from filmhom.geometry import AffinePlane, Sphere
from filmhom.integrand import Constant, IntegrandSpec, Laminate1D

NORTH = np.array([0.0, 0.0, 1.0])


@pytest.fixture(scope="session")
def sphere():
    return Sphere(1.0)


@pytest.fixture(scope="session")
def plane():
    return AffinePlane((0, 0, 0), (0, 0, 1))


@pytest.fixture(scope="session")
def square():
    return IntegrandSpec(Constant(1.0), 2.0)


@pytest.fixture(scope="session")
def laminate():
    return IntegrandSpec(Laminate1D(1.0, 4.0, 0.5, 1), 2.0)


@pytest.fixture(scope="session")
def laminate_table(laminate, sphere):
    """m = 5 laminate table at the north pole; build time is kept for the runtime criterion."""
    t0 = time.perf_counter()
    table = build_density_table(laminate, sphere, [NORTH], xi_max=0.4, m=5, t_list=(1, 2), n=8)
    table.build_seconds = time.perf_counter() - t0
    return table


@pytest.fixture(scope="session")
def square_table(square, sphere):
    return build_density_table(square, sphere, [NORTH], xi_max=1.0, m=3, t_list=(1, 2), n=4)


_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion; returns the pass flag."""
    def record(number, title, passed, detail, seconds):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail} ({seconds:.1f} s)"
        _ACCEPTANCE.append((number, line))
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
