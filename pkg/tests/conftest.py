import numpy as np
import pytest

from loopqlab.data import zipf_markov_streams
from loopqlab.looplm import ModelConfig, init_model


def tiny_config(**kw):
    base = dict(vocab=64, d=16, n_heads=2, d_ff=32, T=3, L=2, init_std=0.2)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return init_model(tiny_config(), seed=0)


@pytest.fixture
def tokens():
    return zipf_markov_streams(6, 8, vocab=64, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
