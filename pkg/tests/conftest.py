"""Shared fixtures: seeded generators, small models and configs, an isolated runs directory."""

import numpy as np
import pytest

from config import RunConfig
from gridcode import two_module_code
from model import init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_params():
    """N=8, H=16: for training-mode paths and gradient checks."""
    return init_params(n_units=8, hidden=16, rng=np.random.default_rng(7))


@pytest.fixture
def small_params():
    """N=32, H=16: wide enough that evaluation rollouts never collapse."""
    return init_params(n_units=32, hidden=16, rng=np.random.default_rng(11))


@pytest.fixture
def tiny_config():
    return RunConfig().with_overrides(
        n_units=8,
        hidden_units=16,
        batch_size=4,
        trajectory_length=5,
        max_steps=6,
        checkpoint_every=3,
        log_every=1,
        learning_rate=1e-3,
    )


@pytest.fixture
def oracle_code():
    return two_module_code()


@pytest.fixture
def runs_dir(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("GRIDSSL_RUNS_DIR", str(root))
    return root
