import os

# Point the run registry at in-memory SQLite before any module creates the engine.
os.environ["SDFLOW_DATABASE_URL"] = "sqlite://"

import numpy as np
import pytest

from models.schemas import FlowConfig, MetricConfig, ScaffoldConfig, VqConfig
from services.dataset_service import gen_sines
from services.tokenizer_service import train_vqvae


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_vq_config():
    return VqConfig(seq_len=8, features=2, downsample=4, codebook_size=8, code_dim=8, hidden=8,
                    enc_dec_layers=1, epochs=3, batch_size=16)


@pytest.fixture
def tiny_flow_config():
    return FlowConfig(d_model=16, layers=1, heads=2, ode_steps=4, train_steps=5, batch_size=8)


@pytest.fixture
def tiny_scaffold_config():
    return ScaffoldConfig(rank=3)


@pytest.fixture
def fast_metric_config():
    return MetricConfig(hidden=8, iterations=60, batch_size=32, learning_rate=1e-2)


@pytest.fixture
def tiny_windows():
    return gen_sines(64, 8, features=2, seed=0).windows


@pytest.fixture
def toy_tokenizer(tiny_windows, tiny_vq_config):
    tokenizer, _ = train_vqvae(tiny_windows, tiny_vq_config, seed=0)
    return tokenizer
