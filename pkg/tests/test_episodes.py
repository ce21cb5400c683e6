from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskmatch.episodes import (
    IDENTITY,
    META_KEYS,
    NUM_FOLDS,
    SHAPE_CLASSES,
    Transform,
    augment,
    augment_scene,
    draw_transform,
    dump_episode,
    generate_scene,
    load_dump_meta,
    render_shape,
    sample_episode,
    split_classes,
    verify_dump,
)
from maskmatch.utils import ConfigError


def test_split_classes_partition_every_fold():
    everything = sorted(c.id for c in SHAPE_CLASSES)
    for fold in range(NUM_FOLDS):
        train, test = split_classes("train", fold), split_classes("test", fold)
        assert test == [2 * fold, 2 * fold + 1]
        assert not set(train) & set(test)
        assert sorted(train + test) == everything


def test_split_classes_rejects_bad_input():
    with pytest.raises(ConfigError) as exc:
        split_classes("val")
    assert exc.value.key == "split"
    with pytest.raises(ConfigError) as exc:
        split_classes("train", NUM_FOLDS)
    assert exc.value.key == "fold"


@pytest.mark.parametrize("kind", sorted({c.kind for c in SHAPE_CLASSES}))
def test_every_shape_renders(kind):
    mask = render_shape(kind, (32, 32), 16.0, 16.0, 6.0, 0.3)
    assert mask.dtype == bool and mask.shape == (32, 32)
    assert 10 < mask.sum() < 32 * 32


def test_ring_has_a_hole():
    mask = render_shape("ring", (32, 32), 16.0, 16.0, 10.0, 0.0)
    assert not mask[16, 16] and mask[16, 7]


def test_unknown_shape_kind():
    with pytest.raises(ConfigError):
        render_shape("hexagon", (8, 8), 4.0, 4.0, 2.0, 0.0)


def test_scene_is_deterministic():
    a = generate_scene(17, "train", image_size=32)
    b = generate_scene(17, "train", image_size=32)
    np.testing.assert_array_equal(a.image, b.image)
    assert [o.class_id for o in a.objects] == [o.class_id for o in b.objects]
    for x, y in zip(a.objects, b.objects):
        np.testing.assert_array_equal(x.mask, y.mask)


def test_scene_image_range_and_shape():
    scene = generate_scene(3, "test", image_size=64)
    assert scene.image.shape == (3, 64, 64)
    assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), split=st.sampled_from(["train", "test"]), fold=st.integers(0, NUM_FOLDS - 1))
def test_scene_invariants(seed, split, fold):
    scene = generate_scene(seed, split, image_size=32, fold=fold)
    allowed = set(split_classes(split, fold))
    assert {o.class_id for o in scene.objects} <= allowed
    union = np.zeros((32, 32), dtype=bool)
    for obj in scene.objects:
        assert not (union & obj.mask).any()
        union |= obj.mask
    assert not union.all()


def test_forced_class_is_present_and_visible():
    for seed in range(20):
        scene = generate_scene(seed, "train", image_size=32, include=5)
        assert 5 in scene.class_ids
        assert scene.class_mask(5).any()


def test_forced_class_must_belong_to_split():
    with pytest.raises(ConfigError) as exc:
        generate_scene(0, "train", include=0)
    assert exc.value.key == "class_id"


def test_episode_shapes_and_class():
    ep = sample_episode(5, "test", k=3, image_size=32)
    assert ep.k == 3
    assert ep.class_id in split_classes("test")
    assert ep.support_class == ep.class_id
    assert ep.query.shape == (3, 32, 32)
    assert ep.query_gt.shape == (32, 32) and ep.query_gt.any()
    for img, mask in ep.supports:
        assert img.shape == (3, 32, 32)
        assert mask.any()
    assert ep.query_objects


def test_episode_is_deterministic():
    a = sample_episode(11, "train", k=2, image_size=32)
    b = sample_episode(11, "train", k=2, image_size=32)
    np.testing.assert_array_equal(a.query, b.query)
    np.testing.assert_array_equal(a.query_gt, b.query_gt)
    for (ia, ma), (ib, mb) in zip(a.supports, b.supports):
        np.testing.assert_array_equal(ia, ib)
        np.testing.assert_array_equal(ma, mb)


def test_more_shots_extend_the_same_episode():
    one = sample_episode(8, "test", k=1, image_size=32)
    five = sample_episode(8, "test", k=5, image_size=32)
    assert one.class_id == five.class_id
    np.testing.assert_array_equal(one.query, five.query)
    np.testing.assert_array_equal(one.supports[0][0], five.supports[0][0])
    np.testing.assert_array_equal(one.supports[0][1], five.supports[0][1])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_train_and_test_episodes_never_share_classes(seed):
    train = sample_episode(seed, "train", image_size=32)
    test = sample_episode(seed, "test", image_size=32)
    assert train.class_id not in split_classes("test")
    assert test.class_id in split_classes("test")


def test_mismatched_support_uses_another_class():
    for seed in range(10):
        ep = sample_episode(seed, "test", image_size=32, mismatched=True)
        assert ep.support_class != ep.class_id
        assert ep.support_class in split_classes("test")


def test_zero_shots_is_a_config_error():
    with pytest.raises(ConfigError) as exc:
        sample_episode(0, "test", k=0)
    assert exc.value.key == "shots"


def test_identity_transform():
    arr = np.arange(2 * 4 * 4).reshape(2, 4, 4)
    np.testing.assert_array_equal(IDENTITY.apply(arr), arr)


def test_flip_is_an_involution():
    arr = np.random.default_rng(0).random((3, 8, 8))
    flip = Transform(flip=True)
    np.testing.assert_array_equal(flip.apply(arr), arr[..., ::-1])
    np.testing.assert_array_equal(flip.apply(flip.apply(arr)), arr)


def test_crop_resize_selects_window():
    arr = np.arange(16).reshape(4, 4)
    out = Transform(top=2, left=2, height=2, width=2).apply(arr)
    np.testing.assert_array_equal(out, [[10, 10, 11, 11], [10, 10, 11, 11], [14, 14, 15, 15], [14, 14, 15, 15]])


def test_full_scale_draw_is_a_plain_flip_or_identity():
    rng = np.random.default_rng(3)
    t = draw_transform(rng, (16, 16), flip_prob=1.0, scale_range=(1.0, 1.0))
    assert t == Transform(flip=True, top=0, left=0, height=16, width=16)
    t = draw_transform(rng, (16, 16), flip_prob=0.0, scale_range=(1.0, 1.0))
    arr = rng.random((16, 16))
    np.testing.assert_array_equal(t.apply(arr), arr)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_transform_commutes_with_masking(seed):
    rng = np.random.default_rng(seed)
    image = rng.random((3, 16, 16))
    mask = rng.random((16, 16)) > 0.5
    t = draw_transform(rng, (16, 16))
    np.testing.assert_array_equal(t.apply(image * mask), t.apply(image) * t.apply(mask))


def test_augment_keeps_masks_aligned_and_non_empty():
    ep = sample_episode(2, "train", k=2, image_size=32)
    aug = augment(ep, seed=9)
    assert aug.query.shape == ep.query.shape
    assert aug.query_gt.any()
    assert len(aug.query_objects) == len(ep.query_objects)
    assert all(m.any() for _, m in aug.supports)
    assert aug.class_id == ep.class_id


def test_augment_without_flip_or_scale_is_identity():
    ep = sample_episode(4, "train", image_size=32)
    aug = augment(ep, seed=1, flip_prob=0.0, scale_range=(1.0, 1.0))
    np.testing.assert_array_equal(aug.query, ep.query)
    np.testing.assert_array_equal(aug.query_gt, ep.query_gt)


def test_forced_flip_flips_query_and_mask_together():
    ep = sample_episode(4, "train", image_size=32)
    aug = augment(ep, seed=1, flip_prob=1.0, scale_range=(1.0, 1.0))
    np.testing.assert_array_equal(aug.query, ep.query[..., ::-1])
    np.testing.assert_array_equal(aug.query_gt, ep.query_gt[..., ::-1])
    np.testing.assert_array_equal(aug.supports[0][1], ep.supports[0][1][..., ::-1])


def test_augment_is_train_only():
    with pytest.raises(ConfigError):
        augment(sample_episode(0, "test", image_size=32), seed=0)
    with pytest.raises(ConfigError):
        augment_scene(generate_scene(0, "test", image_size=32), seed=0)


def test_augment_scene_keeps_instances():
    scene = generate_scene(6, "train", image_size=32, include=3)
    aug = augment_scene(scene, seed=2)
    assert [o.class_id for o in aug.objects] == [o.class_id for o in scene.objects]
    assert np.logical_or.reduce([o.mask for o in aug.objects]).any()


def test_dump_and_verify(tmp_path):
    ep = sample_episode(12, "test", k=2, image_size=32)
    out = dump_episode(ep, tmp_path)
    assert out.name == "episode-test-000012"
    assert sorted(p.name for p in out.iterdir()) == [
        "meta.json",
        "query.png",
        "query_mask.png",
        "support_0.png",
        "support_0_mask.png",
        "support_1.png",
        "support_1_mask.png",
    ]
    ok, msg = verify_dump(out)
    assert ok and msg == "OK"
    meta = load_dump_meta(out)
    assert set(META_KEYS) <= set(meta)
    assert meta["k"] == 2 and meta["class_id"] == ep.class_id and meta["image_size"] == 32


def test_verify_flags_missing_and_broken_files(tmp_path):
    out = dump_episode(sample_episode(1, "test", image_size=32), tmp_path)
    (out / "support_0_mask.png").unlink()
    ok, msg = verify_dump(out)
    assert not ok and "missing support_0_mask.png" in msg

    (out / "meta.json").write_text("{not json", encoding="utf-8")
    ok, msg = verify_dump(out)
    assert not ok and "meta.json" in msg

    ok, msg = verify_dump(tmp_path / "nope")
    assert not ok and msg.startswith("missing dir")


def test_verify_flags_missing_meta_keys(tmp_path):
    out = dump_episode(sample_episode(1, "test", image_size=32), tmp_path)
    meta = json.loads((out / "meta.json").read_text(encoding="utf-8"))
    del meta["split"]
    (out / "meta.json").write_text(json.dumps(meta), encoding="utf-8")
    ok, msg = verify_dump(out)
    assert not ok and "meta.json missing split" in msg
