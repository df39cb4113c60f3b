import numpy as np
import pytest

from nedf.fields import AnalyticOracle, Sphere
from nedf.geometry import vec3
from nedf.model import PROFILES, new_model, train

TRAIN_SEED = 20240501


@pytest.fixture(scope="session")
def trained_sphere():
    """One desk-profile distillation of the unit sphere, shared by every
    acceptance test that needs a trained model (training cost is paid once,
    inside the distillation criterion's budget)."""
    oracle = AnalyticOracle(Sphere(vec3(0, 0, 0), 1.0))
    rng = np.random.default_rng(TRAIN_SEED)
    profile = PROFILES["desk"]
    model = new_model(oracle, rng, profile=profile)
    train(model, oracle, rng, iterations=profile.iterations,
          batch_size=profile.batch_size, lr=profile.lr)
    return model, oracle
