from __future__ import annotations

import numpy as np
import pytest

from maskmatch.config import TrainConfig
from maskmatch.encoder import Encoder
from maskmatch.nn import ParamStore
from maskmatch.tensor import Tensor

TINY = dict(
    image_size=32,
    d_model=8,
    heads=2,
    pos_ffn=16,
    ca_ffn=16,
    num_proposals=4,
    batch_size=1,
    episodes=6,
    workers=2,
    log_every=1000,
)


@pytest.fixture
def tiny_config() -> TrainConfig:
    return TrainConfig(pos_iterations=3, mm_iterations=3, **TINY)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def store() -> ParamStore:
    return ParamStore()


@pytest.fixture
def tiny_encoder() -> Encoder:
    return Encoder(channels=8, seed=0)


def leaf(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)
