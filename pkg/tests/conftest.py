import importlib.resources as resources

import pytest

from gaitlab.robot import load_robot_model
from gaitlab.sim import SimConfig


def config_text(name: str) -> str:
    return resources.files("gaitlab.configs").joinpath(name).read_text()


@pytest.fixture(scope="session")
def model():
    return load_robot_model(config_text("biped.yaml"))


@pytest.fixture(scope="session")
def sim_config():
    return SimConfig()


def finite_difference_grad(loss_fn, params: dict, h: float = 1e-5) -> dict:
    """Central finite differences of a scalar loss over a params dict."""
    import numpy as np

    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = loss_fn(params)
            flat[i] = orig - h
            lo = loss_fn(params)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * h)
        grads[name] = g
    return grads
