import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hazecascade.scatter import FogParams, SceneSpec, gen_dataset

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """12 train / 6 val / 2 test records on 64x64 canvases with default fog."""
    out = tmp_path_factory.mktemp("corpus")
    return gen_dataset(SceneSpec(seed=3), 12, 6, 2, FogParams(), out)


@pytest.fixture
def rand():
    return np.random.default_rng(1234)
