import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rwce.data import SyntheticSpec, generate_synthetic, standardize  # noqa: E402
from rwce.trainer import TrainingConfig, train  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record_criterion():
    def record(number, name, passed, detail=""):
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {name} {detail}".rstrip())
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def benchmark():
    """Default synthetic benchmark: K=10, d=32, 8k/1k/1k/2k, standardized."""
    return standardize(generate_synthetic(SyntheticSpec(seed=0)))


@pytest.fixture(scope="session")
def small_data():
    return standardize(generate_synthetic(SyntheticSpec(
        seed=3, n_classes=4, n_features=6, n_train=400, n_val=100, n_cal=200, n_test=200)))


@pytest.fixture(scope="session")
def rwce_run(benchmark):
    """The default 40-epoch RWCE run, one checkpoint per epoch."""
    return train(TrainingConfig(loss="RWCE"), benchmark)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
