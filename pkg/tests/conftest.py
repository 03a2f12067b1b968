import numpy as np
import pytest

from graphma.graphs import GeneratorConfig, generate_synthetic
from graphma.model import ModelConfig


@pytest.fixture(scope="session")
def small_ds():
    return generate_synthetic(GeneratorConfig(num_graphs=40, nodes_min=4, nodes_max=9, seed=3))


@pytest.fixture
def tiny_config(small_ds):
    return ModelConfig.for_dataset(small_ds, num_layers=2, hidden_dim=8, num_heads=2, ffn_dim=12,
                                   pe_dim=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
