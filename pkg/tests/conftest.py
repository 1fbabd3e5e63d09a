import numpy as np
import pytest
from hypothesis import settings

from drnkit.datagen import gen_synthetic_main
from drnkit.glm import fit_gamma_glm

settings.register_profile("repo", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def small_synth():
    return gen_synthetic_main(n_train=1500, n_val=500, n_test=500, seed=3)


@pytest.fixture(scope="session")
def small_glm(small_synth):
    tr = small_synth[0]
    return fit_gamma_glm(tr.X, tr.y, tr.feature_names)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
