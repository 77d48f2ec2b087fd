import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from blmrobust.data import make_dataset
from blmrobust.model import ArchConfig, build_model
from blmrobust.threat import StructuredBudget
from blmrobust.training import TrainConfig, finetune_adversarial, finetune_config, train_clean
from blmrobust.attack import PgdConfig

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

DESK = ArchConfig(scale_factor=0.125)
BUDGET = StructuredBudget.from_pair(0.10, 0.02)
CLEAN_TRAIN = TrainConfig(epochs=10, batch_size=32, learning_rate=0.05, seed=0)
FINETUNE = finetune_config(
    TrainConfig(epochs=3, batch_size=32, learning_rate=0.01, seed=0), BUDGET,
    adv_fraction=0.5, pgd=PgdConfig(steps=10, seed=0))


def random_window(rng, W=32):
    """Positive two-channel window with a bump, well away from sigma_min."""
    t = np.arange(W)
    bump = np.exp(-0.5 * ((t - rng.uniform(0, W)) / rng.uniform(2, 6)) ** 2)
    x = np.column_stack([1.0 - 0.5 * bump, 0.3 + 0.8 * bump])
    return x + 0.03 * rng.normal(size=(W, 2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_params():
    return build_model(DESK, 0)


@pytest.fixture(scope="session")
def dataset():
    return make_dataset(seed=0)


@pytest.fixture(scope="session")
def clean_run(dataset):
    return train_clean(build_model(DESK, 0), dataset, CLEAN_TRAIN)


@pytest.fixture(scope="session")
def clean_model(clean_run):
    return clean_run[0]


@pytest.fixture(scope="session")
def adv_run(clean_model, dataset):
    return finetune_adversarial(clean_model, dataset, FINETUNE)


# one PASS/FAIL line per acceptance criterion at the end of the run
_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    num = int(report.nodeid.split("test_criterion_")[1].split("_")[0])
    if report.when == "call" or report.failed:
        _CRITERIA[num] = _CRITERIA.get(num, True) and report.passed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if _CRITERIA[num] else 'FAIL'}")
