import numpy as np
import pytest

from pvilab.config import load_config
from pvilab.model import DiTConfig


def tiny_dit(**over) -> DiTConfig:
    base = dict(n_blocks=2, hidden=16, heads=4, horizon=4, action_dim=2,
                state_dim=3, cond_len=3, cond_dim=8)
    base.update(over)
    return DiTConfig(**base)


def fast_overrides(**kv) -> list:
    """Minute-scale training config as CLI-style override strings."""
    base = {
        "task.n_demos": 24, "task.eval_rollouts": 20,
        "train.steps": 25, "train.batch": 8, "train.seed": 3,
    }
    base.update(kv)
    return [f"--{key}={value}" for key, value in base.items()]


@pytest.fixture
def fast_cfg():
    def make(**kv):
        return load_config(overrides=fast_overrides(**kv))
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(0)
