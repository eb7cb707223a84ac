import sys

import hypothesis
import numpy as np
import pytest

from ilhf import datagen
from ilhf.rng import stream

hypothesis.settings.register_profile("default", max_examples=30, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def processes():
    return datagen.sample_process_params(stream(7, 0, "process"), d=2, perturbation_variance=0.3)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if acceptance is None or not acceptance.REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(acceptance.REPORT):
        terminalreporter.write_line(line)
