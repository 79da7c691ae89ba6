import numpy as np
import pytest
import torch

from uod.data import default_recipes, synth_domain
from uod.pipeline import DomainData

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_domains():
    """Two 64 x 64 synthetic domains with 20 images each (16 train / 4 test)."""
    out = []
    for d, recipe in enumerate(default_recipes(2, 64, 20)):
        spec, records, splits = synth_domain(recipe, d)
        out.append(DomainData(spec, records, splits))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(0)
