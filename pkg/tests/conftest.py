from typing import Callable, Optional

import hypothesis
import numpy as np
import pytest

from pytaps import adapter
from pytaps.config import RunConfig, load_config

np.seterr(all="warn")

# torch calls inside property tests are too slow for the default deadline
hypothesis.settings.register_profile("pytaps", deadline=None, max_examples=100)
hypothesis.settings.register_profile("fast", deadline=None, max_examples=10)
hypothesis.settings.load_profile("pytaps")

SMALL_RUN = {
    "world.k_classes": 3,
    "world.dim": 8,
    "world.n_source": 50,
    "world.stream_len": 120,
    "policy.t_min": 20,
    "buffer_capacity": 12,
    "minibatch": 4,
    "views": 8,
}


@pytest.fixture
def small_cfg() -> Callable[..., RunConfig]:
    """Factory of quick episode configs; keyword overrides use ``__`` for dots."""

    def build(**overrides) -> RunConfig:
        flat = dict(SMALL_RUN)
        flat.update({key.replace("__", "."): value for key, value in overrides.items()})
        return load_config(overrides=flat)

    return build


@pytest.fixture
def make_model() -> Callable[..., adapter.PromptModel]:
    """Factory of random prompt models."""

    def build(
        dim: int = 4,
        k_classes: int = 3,
        n_layers: int = 2,
        temperature: float = 1.0,
        seed: int = 0,
        prompt: Optional[np.ndarray] = None,
    ) -> adapter.PromptModel:
        rng = np.random.default_rng(seed)
        weights = adapter.random_layer_weights(dim, n_layers, 1.0, rng)
        prototypes = rng.standard_normal((k_classes, dim))
        if prompt is None:
            prompt = 0.1 * rng.standard_normal(dim)
        return adapter.PromptModel(weights, prototypes, temperature, prompt=prompt)

    return build


@pytest.fixture
def two_class_model() -> adapter.PromptModel:
    """Identity encoder in 2d with axis prototypes and a near-zero temperature.

    Inputs ``(5, -5)`` and ``(-5, 5)`` are predicted as class 0 and class 1 with
    probability 1 in float64.
    """
    return adapter.PromptModel([np.eye(2)], np.eye(2), 1e-4)
