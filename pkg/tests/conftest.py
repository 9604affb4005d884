import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from msldp.homogenize import solve_at
from msldp.model import build_model
from msldp.torus import TorusGrid


def langevin_spec(Q="cos(2*pi*y)+sin(2*pi*y)", V="1.5*(x^2-1)^2", D=1,
                  a=2, kappa=1, x0=-1):
    return {"dim": 1, "Q": Q, "V": V, "D": D, "b": "-dQ/dy", "c": "-dV/dx",
            "sigma": "sqrt(2*D)", "a": a, "kappa": kappa, "x0": x0}


@pytest.fixture(scope="session")
def figure1_model():
    """Rough double-well Langevin model (Regime 1)."""
    return build_model(langevin_spec())


@pytest.fixture(scope="session")
def figure1_point(figure1_model):
    """Homogenization data of the rough double-well at x = -1, n = 512."""
    return solve_at(figure1_model, [-1.0], TorusGrid(1, 512))


@pytest.fixture(scope="session")
def trivial_r2_model():
    """Constant-coefficient Regime-2 model, sigma = 1.5."""
    return build_model({"dim": 1, "b": "0", "c": "0", "sigma": "1.5",
                        "a": 1, "kappa": 1, "x0": 0})


def rng(seed=0):
    return np.random.default_rng(seed)
