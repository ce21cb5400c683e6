from __future__ import annotations

import numpy as np
import pytest

from maskmatch.checkpoint import FORMAT_VERSION, MAGIC, _PREFIX, file_digest, load_checkpoint, save_checkpoint
from maskmatch.optim import OptimizerState
from maskmatch.utils import CheckpointError, CheckpointVersionError


@pytest.fixture
def params():
    return {"pos.w": np.arange(6.0).reshape(2, 3), "mm.b": np.array([0.5, -1.25])}


def test_save_load(tmp_path, params):
    opt = OptimizerState(step=3, m={"mm.b": np.array([0.1, 0.2])}, v={"mm.b": np.array([0.01, 0.02])})
    path = save_checkpoint(
        tmp_path / "a.ckpt", params, config={"d_model": 8}, seeds={"seed": 4}, optimizer=opt, meta={"stage": "pos"}
    )
    ck = load_checkpoint(path)
    assert sorted(ck.params) == ["mm.b", "pos.w"]
    np.testing.assert_array_equal(ck.params["pos.w"], params["pos.w"])
    assert ck.config == {"d_model": 8}
    assert ck.seeds == {"seed": 4}
    assert ck.meta == {"stage": "pos"}
    assert ck.optimizer.step == 3
    np.testing.assert_array_equal(ck.optimizer.v["mm.b"], [0.01, 0.02])
    assert ck.version == FORMAT_VERSION


def test_bytes_are_deterministic(tmp_path, params):
    a = save_checkpoint(tmp_path / "a.ckpt", params, config={"x": 1, "a": 2})
    b = save_checkpoint(tmp_path / "b.ckpt", dict(reversed(list(params.items()))), config={"a": 2, "x": 1})
    assert a.read_bytes() == b.read_bytes()
    assert file_digest(a) == file_digest(b)


def test_no_temporary_file_left_behind(tmp_path, params):
    save_checkpoint(tmp_path / "sub" / "a.ckpt", params)
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["a.ckpt"]


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")
    with pytest.raises(CheckpointError):
        file_digest(tmp_path / "absent.ckpt")


def test_newer_version_is_refused(tmp_path, params):
    path = save_checkpoint(tmp_path / "a.ckpt", params)
    raw = bytearray(path.read_bytes())
    _, _, hlen = _PREFIX.unpack_from(raw, 0)
    raw[: _PREFIX.size] = _PREFIX.pack(MAGIC, FORMAT_VERSION + 1, hlen)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError) as exc:
        load_checkpoint(path)
    assert exc.value.found == FORMAT_VERSION + 1
    assert exc.value.exit_code == 1


def test_foreign_file_is_refused(tmp_path):
    path = tmp_path / "notes.ckpt"
    path.write_bytes(b"hello world, not a checkpoint at all")
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_truncated_payload(tmp_path, params):
    path = save_checkpoint(tmp_path / "a.ckpt", params)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError) as exc:
        load_checkpoint(path)
    assert "truncated payload" in str(exc.value)


def test_shape_that_disagrees_with_payload(tmp_path, params):
    path = save_checkpoint(tmp_path / "a.ckpt", params)
    raw = path.read_bytes()
    assert b'"shape":[2,3]' in raw
    path.write_bytes(raw.replace(b'"shape":[2,3]', b'"shape":[3,3]'))
    with pytest.raises(CheckpointError) as exc:
        load_checkpoint(path)
    assert "corrupt tensor entry" in str(exc.value)
    assert exc.value.exit_code == 1


def test_optimizer_moments_are_stored_as_tensors(tmp_path, params):
    opt = OptimizerState(step=1, m={"mm.b": np.array([0.1, 0.2])}, v={"mm.b": np.array([0.3, 0.4])})
    ck = load_checkpoint(save_checkpoint(tmp_path / "a.ckpt", params, optimizer=opt))
    np.testing.assert_array_equal(ck.optimizer.m["mm.b"], [0.1, 0.2])
    assert sorted(ck.params) == ["mm.b", "pos.w"]
