import time

import numpy as np
import pytest
import torch

from advtex.data import SyntheticSceneSpec, generate_synthetic
from advtex.detector import TrainConfig, build_detector
from advtex.detector.training import train_from_spec


@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    """The default 22 x 5 synthetic dataset at 320 x 240."""
    return generate_synthetic(SyntheticSceneSpec(), tmp_path_factory.mktemp("synthetic"))


TIMINGS = {}
# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def detector_a():
    t = time.time()
    model = train_from_spec(TrainConfig(arch="grid", seed=0))
    TIMINGS["train_a"] = time.time() - t
    return model


@pytest.fixture(scope="session")
def detector_b():
    return train_from_spec(TrainConfig(arch="two_stage", seed=0))


@pytest.fixture
def untrained_grid():
    torch.manual_seed(3)
    return build_detector({"arch": "grid"}).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
