from __future__ import annotations

import json
from pathlib import Path

import pytest

from maskmatch.config import (
    REQUIRED_FILE_KEYS,
    TrainConfig,
    from_dict,
    load_config,
    read_config_file,
    resolve_config_path,
    write_config,
)
from maskmatch.utils import CONFIG_DIR_ENV, ConfigError


def _write(path: Path, data) -> Path:
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def test_defaults():
    cfg = TrainConfig()
    assert cfg.base_lr == 1e-4
    assert cfg.weight_decay == 5e-2
    assert cfg.poly_power == 0.9
    assert (cfg.lambda_mask, cfg.lambda_contrast) == (10.0, 6.0)
    assert cfg.flags.sa and cfg.flags.ca and cfg.flags.lm
    assert cfg.iterations_for("pos") == 2000 and cfg.iterations_for("mm") == 1000


def test_explicit_iterations_win():
    cfg = TrainConfig(iterations=7)
    assert cfg.iterations_for("pos") == cfg.iterations_for("mm") == 7


@pytest.mark.parametrize(
    "changes, key",
    [
        ({"image_size": 48}, "image_size"),
        ({"d_model": 10, "heads": 4}, "heads"),
        ({"num_proposals": 1}, "num_proposals"),
        ({"stage": "warmup"}, "stage"),
        ({"ca_mode": "deep"}, "ca_mode"),
        ({"dropout": 1.0}, "dropout"),
        ({"fold": 4}, "fold"),
        ({"iterations": -1}, "iterations"),
        ({"positional_encoding": "sine", "d_model": 6, "heads": 2}, "d_model"),
    ],
)
def test_validation_names_the_key(changes, key):
    with pytest.raises(ConfigError) as exc:
        TrainConfig(**changes)
    assert exc.value.key == key
    assert exc.value.exit_code == 2


def test_single_proposal_allowed_without_contrastive():
    assert TrainConfig(num_proposals=1, use_contrastive=False).num_proposals == 1


def test_unknown_key():
    with pytest.raises(ConfigError) as exc:
        from_dict({"learning_rate": 0.1})
    assert exc.value.key == "learning_rate"


@pytest.mark.parametrize(
    "key, value",
    [("d_model", "32"), ("d_model", 3.5), ("d_model", True), ("sa", 1), ("base_lr", "fast"), ("blend", 0)],
)
def test_type_errors(key, value):
    with pytest.raises(ConfigError) as exc:
        from_dict({key: value})
    assert exc.value.key == key


def test_ints_are_accepted_for_floats():
    cfg = from_dict({"base_lr": 1, "iterations": None})
    assert cfg.base_lr == 1.0 and isinstance(cfg.base_lr, float)
    assert cfg.iterations is None


def test_required_file_keys(tmp_path):
    data = {"image_size": 32, "d_model": 8, "num_proposals": 4}
    for missing in REQUIRED_FILE_KEYS:
        partial = {k: v for k, v in data.items() if k != missing}
        path = _write(tmp_path / f"no-{missing}.json", partial)
        with pytest.raises(ConfigError) as exc:
            read_config_file(path)
        assert exc.value.key == missing


def test_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError) as exc:
        read_config_file(path)
    assert exc.value.key == "config"


def test_precedence_defaults_file_overrides(tmp_path):
    path = _write(tmp_path / "c.json", {"image_size": 32, "d_model": 8, "num_proposals": 4, "heads": 2, "seed": 5})
    cfg = load_config(path, {"seed": 9, "shots": None})
    assert cfg.image_size == 32 and cfg.heads == 2
    assert cfg.seed == 9
    assert cfg.shots == 1
    assert cfg.pos_iterations == 2000


def test_config_dir_from_environment(tmp_path, monkeypatch):
    _write(tmp_path / "tiny.json", {"image_size": 32, "d_model": 8, "num_proposals": 4, "heads": 2})
    monkeypatch.setenv(CONFIG_DIR_ENV, str(tmp_path))
    monkeypatch.chdir(tmp_path.parent)
    assert resolve_config_path("tiny") == tmp_path / "tiny.json"
    assert load_config("tiny").d_model == 8


def test_missing_config_file(tmp_path, monkeypatch):
    monkeypatch.delenv(CONFIG_DIR_ENV, raising=False)
    with pytest.raises(ConfigError) as exc:
        resolve_config_path(tmp_path / "absent.json")
    assert exc.value.key == "config"


def test_write_then_load(tmp_path, tiny_config):
    path = tmp_path / "out.json"
    write_config(tiny_config, path)
    assert load_config(path) == tiny_config


def test_with_overrides_validates():
    cfg = TrainConfig()
    assert cfg.with_overrides(shots=5).shots == 5
    with pytest.raises(ConfigError):
        cfg.with_overrides(shots=0)


def test_fingerprint_tracks_content():
    assert TrainConfig().fingerprint() == TrainConfig().fingerprint()
    assert TrainConfig().fingerprint() != TrainConfig(seed=1).fingerprint()
