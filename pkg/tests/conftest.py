import numpy as np
import pytest

from stealthsim.dynamics import ControllerModel, PlantModel
from stealthsim.models import cartpole_controller, cartpole_plant, lqg_build


def scalar_plant(f, h=None, noise_var=1.0, **kw):
    return PlantModel(1, 1, 1, f, h or (lambda x: x.copy()), noise_var * np.eye(1), noise_var * np.eye(1), **kw)


def constant_controller(value):
    return ControllerModel(0, lambda X, y: X[..., :0],
                           lambda X, y: np.full(y.shape[:-1] + (1,), float(value)), np.zeros(0))


@pytest.fixture(scope="session")
def cartpole():
    plant = cartpole_plant()
    return plant, cartpole_controller(plant)


@pytest.fixture(scope="session")
def scalar_lqg():
    return lqg_build(2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
