import numpy as np
import pytest
import torch

from radiomsm.model import ModelConfig, build_model
from radiomsm.spectro import SpectroParams


@pytest.fixture
def tiny_params():
    return SpectroParams(fft_size=64, window_size=32, hop_size=32, sentence_rows=8, n_tokens=4, token_width=3)


@pytest.fixture
def tiny_model(tiny_params):
    return build_model(ModelConfig.for_params(tiny_params, hidden=4, n_layers=2, seg_hidden=3), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
