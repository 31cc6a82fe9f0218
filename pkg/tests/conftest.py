import time
from typing import NamedTuple

import numpy as np
import pytest

from ddegen.datasets import make_synthetic
from ddegen.dde import DdeTrainConfig, LrDecay, train_dde
from ddegen.network import MlpConfig

# Small residual nets keep the trained-model oracles within the time budget
# of a single CPU core; the default 25x32 architecture is exercised by the
# kernel tests and the benchmark.
ORACLE_NET = MlpConfig(2, 1, 3, 32)


def gaussian_oracle_config(steps: int = 20000) -> DdeTrainConfig:
    return DdeTrainConfig(batch_size=512, steps=steps, lr=2e-3, lr_decay=LrDecay(2.0, 2500),
                          sigma_start=0.5, sigma_end=0.5, seed=0)


@pytest.fixture(scope="session")
def gaussian_data():
    return make_synthetic("gaussian", 100000, seed=0)


class OracleRun(NamedTuple):
    model: object
    state: object
    seconds: float


@pytest.fixture(scope="session")
def gaussian_oracle(gaussian_data):
    """DDE trained on N(0, I2) with sigma_eta = 0.5, its training state and wall time."""
    t0 = time.perf_counter()
    model, state = train_dde(gaussian_data, ORACLE_NET, gaussian_oracle_config())
    return OracleRun(model, state, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def spiral_models():
    data = make_synthetic("two_spirals", 50000, seed=0)
    out = {}
    for sigma in (0.05, 0.2):
        cfg = DdeTrainConfig(batch_size=512, steps=4000, lr=2e-3, lr_decay=LrDecay(2.0, 1000),
                             sigma_start=sigma, sigma_end=sigma, seed=1)
        out[sigma] = train_dde(data, MlpConfig(2, 1, 4, 32), cfg)[0]
    return out


def grid_points(lo=-2.0, hi=2.0, n=41):
    g = np.linspace(lo, hi, n)
    gx, gy = np.meshgrid(g, g)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


# One line per acceptance criterion, filled in by tests/test_acceptance.py.
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
