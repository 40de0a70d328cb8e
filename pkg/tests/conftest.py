import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from pfdistill.synthdata import GeneratorConfig, generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_gen():
    return GeneratorConfig(num_users=60, num_items=40, num_records=1200, split=1000, top_items=10,
                           seed=3)


@pytest.fixture(scope="session")
def small_data(small_gen):
    return generate(small_gen)


@pytest.fixture(scope="session")
def small_ctr_gen():
    return GeneratorConfig(num_users=60, num_items=40, num_records=1200, split=1000, top_items=10,
                           task="ctr", seed=5)


@pytest.fixture(scope="session")
def small_ctr_data(small_ctr_gen):
    return generate(small_ctr_gen)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
