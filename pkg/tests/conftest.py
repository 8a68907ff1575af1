"""
Shared fixtures: seeded generators, tiny model specs and datasets.
"""

import numpy as np
import pytest

from equirobust import models
from equirobust.data import Dataset, make_synthetic
from equirobust.schemas import ModelSpec, NamedModelSpec, ScaleSet

TINY_PLAN = [4, 4, 8, 8]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_spec(architecture_id: str, seed: int = 0, num_classes: int = 4, channels: int = 1,
              image_size: int = 8, name: str | None = None) -> ModelSpec:
    kw = dict(architecture_id=architecture_id, depth=4, channel_plan=list(TINY_PLAN), num_classes=num_classes,
              in_channels=channels, image_size=image_size, seed=seed,
              scale_set=ScaleSet(factors=[0.75, 1.0, 1.25]))
    if name is not None:
        return NamedModelSpec(name=name, **kw)
    return ModelSpec(**kw)


def linear_model(seed: int, num_classes: int = 3, channels: int = 1, image_size: int = 4):
    """A flatten → dense model with random weights drawn from `seed`."""
    spec = ModelSpec(architecture_id="linear", num_classes=num_classes, in_channels=channels,
                     image_size=image_size, seed=seed)
    model = models.build(spec)
    r = np.random.default_rng(seed + 1000)
    dense = model.layers[1]
    dense.weight.data = r.normal(size=dense.weight.shape)
    dense.bias.data = r.normal(scale=0.1, size=dense.bias.shape)
    return model


@pytest.fixture
def tiny_bars():
    return make_synthetic("oriented_bars", 32, image_size=8, num_classes=4, channels=1, seed=0)


@pytest.fixture
def separable_pair():
    """Two classes split by mean brightness: dark images vs bright images."""
    r = np.random.default_rng(3)
    n = 40
    labels = np.arange(n) % 2
    base = np.where(labels[:, None, None, None] == 1, 0.7, 0.3)
    images = np.clip(base + r.uniform(-0.1, 0.1, size=(n, 1, 4, 4)), 0.0, 1.0)
    return Dataset(images, labels, 2, provenance={"source": "fixture"})
