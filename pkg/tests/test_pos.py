from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskmatch.encoder import Encoder
from maskmatch.nn import ParamStore
from maskmatch.pos import (
    PotentialObjectsSegmenter,
    ProposalSet,
    dice_cost_matrix,
    dice_loss,
    downsample_nearest,
    hungarian,
    pos_loss,
    upsample_nearest,
)
from maskmatch.tensor import Tensor, backward, check_gradients
from maskmatch.utils import ConfigError, DimensionError, DomainError


def _proposals(masks: np.ndarray, requires_grad: bool = False) -> ProposalSet:
    return ProposalSet(masks=Tensor(masks, requires_grad=requires_grad), embeddings=Tensor(np.zeros((masks.shape[0], 4))))


def test_dice_of_perfect_prediction_is_zero():
    gt = np.zeros((4, 4))
    gt[1:3, 1:3] = 1.0
    assert dice_loss(Tensor(gt), gt).item() == pytest.approx(0.0, abs=1e-12)


def test_dice_of_disjoint_masks():
    gt = np.zeros((2, 2))
    gt[0, 0] = 1.0
    pred = np.zeros((2, 2))
    pred[1, 1] = 1.0
    # 1 - (0 + 1) / (1 + 1 + 1)
    assert dice_loss(Tensor(pred), gt).item() == pytest.approx(2.0 / 3.0)


def test_dice_shape_mismatch():
    with pytest.raises(DimensionError):
        dice_loss(Tensor(np.zeros((2, 2))), np.zeros((3, 3)))


def test_dice_gradient(rng):
    p = Tensor(rng.random((4, 4)), requires_grad=True)
    gt = (rng.random((4, 4)) > 0.5).astype(float)
    assert check_gradients(lambda: dice_loss(p, gt), [p]) < 1e-5


def test_hungarian_square_example():
    cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
    a = hungarian(cost)
    assert a.total_cost == pytest.approx(5.0)
    assert sorted(g for _, g in a.pairs) == [0, 1, 2]


def test_hungarian_more_proposals_than_objects():
    cost = np.array([[0.9], [0.1], [0.5]])
    a = hungarian(cost)
    assert a.pairs == [(1, 0)]
    assert a.total_cost == pytest.approx(0.1)


def test_hungarian_too_many_objects():
    with pytest.raises(ConfigError) as exc:
        hungarian(np.zeros((2, 3)))
    assert exc.value.key == "num_proposals"


def test_hungarian_rejects_non_finite():
    with pytest.raises(DomainError):
        hungarian(np.array([[np.nan, 1.0], [1.0, 0.0]]))


def _brute_force(cost: np.ndarray) -> float:
    n, g = cost.shape
    return min(sum(cost[p[j], j] for j in range(g)) for p in itertools.permutations(range(n), g))


@settings(max_examples=200, deadline=None)
@given(
    n=st.integers(1, 6),
    data=st.data(),
    seed=st.integers(0, 2**32 - 1),
)
def test_hungarian_matches_brute_force(n, data, seed):
    g = data.draw(st.integers(1, n))
    cost = np.random.default_rng(seed).random((n, g))
    a = hungarian(cost)
    assert a.total_cost == pytest.approx(_brute_force(cost), rel=1e-12, abs=1e-12)
    proposals = [p for p, _ in a.pairs]
    assert len(set(proposals)) == len(proposals) == g


def test_dice_cost_matrix_matches_dice_loss(rng):
    masks = rng.random((3, 4, 4))
    gts = [(rng.random((4, 4)) > 0.5).astype(float) for _ in range(2)]
    c = dice_cost_matrix(masks, gts)
    assert c.shape == (3, 2)
    for n in range(3):
        for g in range(2):
            assert c[n, g] == pytest.approx(dice_loss(Tensor(masks[n]), gts[g]).item())


def test_pos_loss_zero_when_a_proposal_matches_each_object():
    gts = [np.zeros((4, 4)), np.zeros((4, 4))]
    gts[0][:2] = 1.0
    gts[1][2:, 2:] = 1.0
    masks = np.stack([np.full((4, 4), 0.3), gts[1], gts[0]])
    assert pos_loss(_proposals(masks), gts).item() == pytest.approx(0.0, abs=1e-12)


def test_unmatched_proposals_get_no_gradient():
    gt = np.zeros((4, 4))
    gt[:2] = 1.0
    props = _proposals(np.stack([np.full((4, 4), 0.5), gt * 0.9 + 0.05]), requires_grad=True)
    backward(pos_loss(props, [gt]))
    np.testing.assert_array_equal(props.masks.grad[0], np.zeros((4, 4)))
    assert np.abs(props.masks.grad[1]).sum() > 0


def test_pos_loss_needs_objects_of_matching_size():
    props = _proposals(np.full((2, 4, 4), 0.5))
    with pytest.raises(DimensionError):
        pos_loss(props, [])
    with pytest.raises(DimensionError):
        pos_loss(props, [np.zeros((8, 8))])


def test_nearest_resampling_round_trip():
    m = np.arange(16).reshape(4, 4) % 3 == 0
    np.testing.assert_array_equal(downsample_nearest(upsample_nearest(m, 4), 4), m)


@pytest.fixture
def segmenter(store, rng):
    return PotentialObjectsSegmenter(store, rng, d_model=8, heads=2, d_ffn=16, num_proposals=5)


def test_proposals_shape_and_range(segmenter, rng):
    pyr = Encoder(8, seed=0).encode(rng.random((3, 64, 64)))
    props = segmenter.propose(pyr)
    assert props.masks.shape == (5, 16, 16)
    assert props.count == 5 and props.hw == (16, 16)
    assert props.masks.data.min() >= 0.0 and props.masks.data.max() <= 1.0
    assert props.binarized().dtype == bool


def test_segmenter_parameter_names(segmenter, store):
    names = store.names("pos")
    assert "pos.query_embed" in names
    assert {n.split(".")[2] for n in names if n.startswith("pos.decoder.")} == {"0", "1", "2"}
    assert "pos.mask_proj.weight" in names


def test_segmenter_rejects_wrong_width(segmenter, rng):
    pyr = Encoder(16, seed=0).encode(rng.random((3, 32, 32)))
    with pytest.raises(DimensionError):
        segmenter.propose(pyr)


def test_segmenter_bad_settings(store, rng):
    with pytest.raises(ConfigError):
        PotentialObjectsSegmenter(store, rng, d_model=8, heads=2, num_proposals=0)
    with pytest.raises(ConfigError):
        PotentialObjectsSegmenter(ParamStore(), rng, d_model=8, heads=2, positional_encoding="learned")


def test_pos_loss_gradient_through_segmenter(store, rng):
    seg = PotentialObjectsSegmenter(store, rng, d_model=4, heads=2, d_ffn=8, num_proposals=3)
    pyr = Encoder(4, seed=1).encode(rng.random((3, 32, 32)))
    gt = np.zeros((8, 8))
    gt[2:6, 1:5] = 1.0
    inputs = [store["pos.query_embed"], store["pos.mask_proj.weight"], store["pos.decoder.2.ffn.1.weight"]]
    assert check_gradients(lambda: pos_loss(seg.propose(pyr), [gt]), inputs) < 1e-5
