import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bjsfod.estimators import DeconvolutionDesign, FitConfig
from bjsfod.model import ResponseKernel
from bjsfod.sphere import design_for_count, icosphere_grid

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# lines printed by the acceptance suite, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def dense():
    return icosphere_grid(4)


@pytest.fixture(scope="session")
def kernel3000():
    return ResponseKernel(1.7e-3, 3e-4, 3000.0, 1.0, 16)


@pytest.fixture(scope="session")
def grad91():
    return design_for_count(91).directions


@pytest.fixture(scope="session")
def design91(grad91, kernel3000, dense):
    return DeconvolutionDesign(grad91, kernel3000, FitConfig(l_max=10, l_max_super=12), dense)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
