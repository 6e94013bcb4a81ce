"""共享测试夹具"""

import copy
from typing import Any

import pytest

from dp_fedsam.config import RunConfigFile, apply_overrides, build_config
from dp_fedsam.data import synth_dataset
from dp_fedsam.models import Activation, ModelSpec

SMALL_CONFIG: dict[str, Any] = {
    "variant": "dp_fedsam",
    "rounds": 3,
    "master_seed": 0,
    "eval_every": 1,
    "model": {"layer_sizes": [8, 16, 3], "activation": "relu"},
    "optimizer": {"learning_rate": 0.1, "rho": 0.1, "local_steps": 3, "batch_size": 16},
    "dp": {"clip_threshold": 0.2, "noise_multiplier": 0.95, "client_sample_ratio": 0.5},
    "partition": {"num_clients": 10, "dirichlet_alpha": 0.6, "seed": 0},
    "data": {"classes": 3, "dims": 8, "n": 900, "separation": 3.0, "seed": 0},
}


@pytest.fixture
def small_config_data() -> dict[str, Any]:
    return copy.deepcopy(SMALL_CONFIG)


@pytest.fixture
def make_config():
    """make_config("rounds=5", "variant=dp_fedavg") -> RunConfigFile"""

    def factory(*overrides: str) -> RunConfigFile:
        return build_config(apply_overrides(copy.deepcopy(SMALL_CONFIG), list(overrides)))

    return factory


@pytest.fixture
def tanh_spec() -> ModelSpec:
    return ModelSpec((4, 6, 3), Activation.TANH)


@pytest.fixture
def blobs():
    return synth_dataset(classes=3, dims=4, n=300, separation=3.0, seed=0)
