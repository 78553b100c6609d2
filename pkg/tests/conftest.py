import sys

import numpy as np
import pytest

from itasim.mobilebert import ModelConfig, build_mobilebert, make_inputs


@pytest.fixture(scope="session")
def two_layer():
    g = build_mobilebert(ModelConfig(n_layers=2))
    return g, make_inputs(g, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
