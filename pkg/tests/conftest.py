import warnings

import numpy as np
import pytest

from ouscore import GaussianMixture, NoiseSchedule, RadonNikodym


def mixture_1d():
    return GaussianMixture([0.4, 0.6], [-1.0, 1.0], [0.6, 1.0])


def mixture_2d():
    return GaussianMixture([0.4, 0.6], [[-1.0, 0.5], [1.0, -0.3]], [0.6, [[1.0, 0.2], [0.2, 0.8]]])


def gaussian_1d(m=1.0):
    return GaussianMixture.gaussian([m], 1.0)


def gaussian_2d():
    return GaussianMixture.gaussian([1.0, 0.5], 1.0)


TARGETS = {
    "gauss-1d": gaussian_1d,
    "mix-1d": mixture_1d,
    "gauss-2d": gaussian_2d,
    "mix-2d": mixture_2d,
}


def unit_schedule(horizon=1.0):
    # short horizons are wanted in tests; silence the low-total-noise warning
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return NoiseSchedule.constant(1.0, horizon)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=sorted(TARGETS))
def target(request):
    return TARGETS[request.param]()


@pytest.fixture
def standard_rnd():
    return RadonNikodym(GaussianMixture.gaussian([0.0], 1.0), 1.0)


# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
