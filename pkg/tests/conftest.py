import numpy as np
import pytest

from shaderflow.lora import CONDITIONS
from shaderflow.model import DiT, ModelConfig, make_synthetic_dataset
from shaderflow.rng import Xoshiro256


def randomize_adapters(model, rng, scale=0.5):
    """Give every adapter a non-zero B so condition deltas actually show up."""
    for blk in model.blocks:
        for c in CONDITIONS:
            for a in blk.adapters[c].values():
                a.B.data = rng.uniforms(a.B.shape, -scale, scale)
    return model


def make_model(seed=0, grid=4, d=8, n_blocks=2, n_heads=1, rank=2):
    rng = Xoshiro256(seed)
    cfg = ModelConfig(d_model=d, n_blocks=n_blocks, n_heads=n_heads, lora_rank=rank, grid=grid)
    return randomize_adapters(DiT(cfg, rng, zero_head=False), rng)


@pytest.fixture
def model():
    return make_model(0)


@pytest.fixture
def cond():
    return make_synthetic_dataset(1, 4, 3)[0].cond


@pytest.fixture
def rng():
    return Xoshiro256(1234)


def max_abs(a, b):
    a = getattr(a, "data", a)
    b = getattr(b, "data", b)
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))
