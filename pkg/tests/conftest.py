import numpy as np
import pytest

from mmtl.model import MultiModalLM
from mmtl.training import TrainConfig, default_model_config, train
from mmtl.world import gen_world, make_prompt

TINY = dict(n_layers=3, n_heads=2, d_model=16, d_mlp=32, d_vision=8)


def randomized(model: MultiModalLM, scale: float = 0.3, seed: int = 0) -> MultiModalLM:
    """Copy with larger random weights so attention and GELU are far from linear."""
    rng = np.random.default_rng(seed)
    params = {n: (t.data + rng.normal(0, scale, t.shape)) for n, t in model.params.items()}
    return MultiModalLM(model.config, params)


@pytest.fixture(scope="session")
def small_world():
    return gen_world(10, 2, seed=3, attrs_per_relation=3)


@pytest.fixture(scope="session")
def tiny_model(small_world):
    return randomized(MultiModalLM(default_model_config(small_world, **TINY)))


@pytest.fixture(scope="session")
def image_prompt(small_world):
    f = small_world.single_facts("train")[0]
    return make_prompt(small_world, f, small_world.templates_for(f.relation)[0], 11)


@pytest.fixture(scope="session")
def trained_small(small_world):
    """A small model trained to memorize the small world."""
    model = MultiModalLM(default_model_config(small_world, n_layers=4, n_heads=2, d_model=32, d_mlp=128,
                                              d_vision=16))
    res = train(model, small_world, TrainConfig(epochs=120, batch_size=8, lr=2e-3, target_accuracy=1.0,
                                                 eval_every=10))
    return res


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
