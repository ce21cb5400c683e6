from __future__ import annotations

import numpy as np
import pytest

from maskmatch.encoder import Encoder
from maskmatch.utils import ConfigError, ContractError, DimensionError


def test_pyramid_shapes(tiny_encoder):
    pyr = tiny_encoder.encode(np.zeros((3, 64, 64)))
    assert pyr.shapes() == [(8, 16, 16), (8, 8, 8), (8, 4, 4), (8, 2, 2)]
    assert [t.shape for t in pyr.levels] == [(8, 8, 8), (8, 4, 4), (8, 2, 2)]
    assert pyr.channels == 8


def test_size_must_be_divisible_by_32(tiny_encoder):
    with pytest.raises(ConfigError) as exc:
        tiny_encoder.encode(np.zeros((3, 48, 48)))
    assert exc.value.key == "image_size"


def test_expects_rgb(tiny_encoder):
    with pytest.raises(DimensionError):
        tiny_encoder.encode(np.zeros((1, 32, 32)))


def test_gradient_request_is_refused(tiny_encoder):
    with pytest.raises(ContractError):
        tiny_encoder.encode(np.zeros((3, 32, 32)), requires_grad=True)


def test_features_carry_no_gradient(tiny_encoder, rng):
    pyr = tiny_encoder.encode(rng.random((3, 32, 32)))
    assert not any(t.requires_grad for t in (pyr.F2, pyr.F3, pyr.F4, pyr.F5))


def test_weights_are_read_only_and_seeded():
    a, b, c = Encoder(8, seed=3), Encoder(8, seed=3), Encoder(8, seed=4)
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()
    w, _ = a._stages[0]
    with pytest.raises(ValueError):
        w[0, 0, 0, 0] = 1.0


def test_encode_does_not_change_weights(tiny_encoder, rng):
    before = tiny_encoder.fingerprint()
    tiny_encoder.encode(rng.random((3, 32, 32)))
    assert tiny_encoder.fingerprint() == before


def test_features_are_non_negative(tiny_encoder, rng):
    pyr = tiny_encoder.encode(rng.random((3, 32, 32)))
    assert all((t.data >= 0).all() for t in pyr.levels)
