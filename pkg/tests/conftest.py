import numpy as np
import pytest
import torch

from semgan.pipeline import TrainConfig
from semgan.scenegen import SceneSpec, render_scene

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def synthetic_set():
    return [render_scene(SceneSpec(style="synthetic", seed=100 + i)) for i in range(12)]


@pytest.fixture(scope="session")
def night_set():
    return [render_scene(SceneSpec(style="night_like", seed=7100 + i)) for i in range(12)]


@pytest.fixture(scope="session")
def night_test_set():
    return [render_scene(SceneSpec(style="night_like", seed=7900 + i)) for i in range(6)]


@pytest.fixture
def tiny_cfg():
    """Budget small enough for unit tests, large enough to move the losses."""
    return TrainConfig(
        gan_steps=6,
        detector_steps=25,
        finetune_steps=8,
        batch_size=4,
        eval_every=5,
        checkpoint_every=3,
        seed=11,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
