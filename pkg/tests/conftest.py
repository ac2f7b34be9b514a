import numpy as np
import pytest

from batchrl.harness import ExperimentConfig, generate_batch
from batchrl.model import ModelTrainConfig, train_system_model

TINY_MODEL = ModelTrainConfig(
    restarts=2, max_epochs=150, patience=30, future=10, hidden=8, horizon_c=6, horizon_f=3,
    max_train_windows=300, max_val_windows=200,
)


@pytest.fixture(scope="session")
def tiny_batch():
    cfg = ExperimentConfig(set_points=(20, 50, 80), trajectories=3, batch_length=150, noise=0.0, master_seed=5)
    return generate_batch(cfg)


@pytest.fixture(scope="session")
def tiny_model(tiny_batch):
    return train_system_model(tiny_batch, TINY_MODEL, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary ------------------------------------------------------------------

CRITERIA: dict = {}


def record_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    CRITERIA[number] = (name, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        name, passed, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {name}: {'PASS' if passed else 'FAIL'} ({detail})")
