import numpy as np
import pytest

from autolambda import autodiff as ad
from autolambda.config import RunConfig


@pytest.fixture(autouse=True)
def debug_mode():
    # NaN screening on every op while testing
    ad.set_debug(True)
    yield
    ad.set_debug(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(**overrides) -> RunConfig:
    """A tiny family and budget so unit tests stay fast."""
    cfg = RunConfig.from_dict({
        "family": {"num_tasks": 2, "input_dim": 8, "features_per_task": 4, "rho": [[1, 0.5], [0.5, 1]], "n_train": 128, "n_val": 64, "n_test": 64},
        "network": {"trunk_layers": [8]},
        "training": {"steps": 10, "batch_size": 16, "lr": 0.05, "eval_every": 5},
    })
    return cfg.replace(**overrides) if overrides else cfg


@pytest.fixture
def small_cfg():
    return small_config()


ACCEPTANCE_LINES = []


def report(criterion: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
