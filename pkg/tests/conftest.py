from pathlib import Path

import numpy as np
import pytest

from app_logger import shutdown_logger
from data import synthetic_fallback
from model import FFArch, init


@pytest.fixture(autouse=True)
def _reset_logger():
    yield
    shutdown_logger()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_data():
    """200 / 50 объектов, d = 8, K = 3"""
    return synthetic_fallback(200, 50, d=8, num_classes=3, seed=0)


@pytest.fixture
def small_ff():
    return init(FFArch((16,), input_dim=8, output_dim=3), seed=0)


@pytest.fixture
def run_dir(tmp_path) -> Path:
    d = tmp_path / "run"
    d.mkdir()
    return d

