from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union, get_type_hints

from .matching import BLEND_MODES, CA_MODES, LAMBDA_CONTRAST, LAMBDA_MASK, MatcherFlags
from .utils import ConfigError, config_dir

STAGES = ("pos", "mm", "joint")
MIOU_MODES = ("pixels", "episodes")
POSITIONAL_ENCODINGS = ("off", "sine")
REQUIRED_FILE_KEYS = ("image_size", "d_model", "num_proposals")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "pos"
    iterations: Optional[int] = None  # None: stage default below
    pos_iterations: int = 2000
    mm_iterations: int = 1000
    batch_size: int = 1
    base_lr: float = 1e-4
    weight_decay: float = 5e-2
    poly_power: float = 0.9
    lambda_mask: float = LAMBDA_MASK
    lambda_contrast: float = LAMBDA_CONTRAST
    use_contrastive: bool = True
    grad_clip: float = 0.0
    seed: int = 0
    # architecture
    image_size: int = 64
    d_model: int = 32
    heads: int = 4
    pos_ffn: int = 64
    num_proposals: int = 16
    encoder_seed: int = 0
    positional_encoding: str = "off"
    dropout: float = 0.0
    # matching module
    sa: bool = True
    ca: bool = True
    lm: bool = True
    ca_mode: str = "learned"
    ca_ffn: int = 64
    ca_layers: int = 1
    blend: str = "softmax"
    # data
    shots: int = 1
    fold: int = 0
    augment: bool = True
    mismatched_support: bool = False
    # evaluation
    episodes: int = 200
    eval_seed: int = 0
    miou_mode: str = "pixels"
    workers: int = 4
    log_every: int = 50

    def __post_init__(self):
        validate(self)

    @property
    def flags(self) -> MatcherFlags:
        return MatcherFlags(sa=self.sa, ca=self.ca, lm=self.lm, ca_mode=self.ca_mode, blend=self.blend)

    def iterations_for(self, stage: Optional[str] = None) -> int:
        if self.iterations is not None:
            return self.iterations
        stage = stage or self.stage
        return self.pos_iterations if stage == "pos" else self.mm_iterations

    def with_overrides(self, **changes: Any) -> "TrainConfig":
        return from_dict({**self.to_dict(), **changes})

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")).hexdigest()


def _check(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(key, message)


def validate(cfg: TrainConfig) -> None:
    _check(cfg.stage in STAGES, "stage", f"expected one of {STAGES}, got {cfg.stage!r}")
    for key in ("iterations", "pos_iterations", "mm_iterations"):
        value = getattr(cfg, key)
        _check(value is None or value >= 0, key, f"must be >= 0, got {value}")
    _check(cfg.batch_size >= 1, "batch_size", f"must be >= 1, got {cfg.batch_size}")
    _check(cfg.base_lr > 0, "base_lr", f"must be > 0, got {cfg.base_lr}")
    _check(cfg.weight_decay >= 0, "weight_decay", f"must be >= 0, got {cfg.weight_decay}")
    _check(cfg.poly_power >= 0, "poly_power", f"must be >= 0, got {cfg.poly_power}")
    _check(cfg.lambda_mask >= 0, "lambda_mask", f"must be >= 0, got {cfg.lambda_mask}")
    _check(cfg.lambda_contrast >= 0, "lambda_contrast", f"must be >= 0, got {cfg.lambda_contrast}")
    _check(cfg.grad_clip >= 0, "grad_clip", f"must be >= 0 (0 disables), got {cfg.grad_clip}")
    _check(cfg.image_size > 0 and cfg.image_size % 32 == 0, "image_size", f"must be a positive multiple of 32, got {cfg.image_size}")
    _check(cfg.heads >= 1 and cfg.d_model % cfg.heads == 0, "heads", f"d_model={cfg.d_model} is not divisible by heads={cfg.heads}")
    _check(cfg.num_proposals >= 1, "num_proposals", f"must be >= 1, got {cfg.num_proposals}")
    _check(
        not (cfg.use_contrastive and cfg.num_proposals < 2),
        "num_proposals",
        "contrastive loss needs at least two proposals",
    )
    _check(cfg.pos_ffn >= 1, "pos_ffn", f"must be >= 1, got {cfg.pos_ffn}")
    _check(cfg.ca_ffn >= 1, "ca_ffn", f"must be >= 1, got {cfg.ca_ffn}")
    _check(cfg.ca_layers >= 1, "ca_layers", f"must be >= 1, got {cfg.ca_layers}")
    _check(
        cfg.positional_encoding in POSITIONAL_ENCODINGS,
        "positional_encoding",
        f"expected one of {POSITIONAL_ENCODINGS}, got {cfg.positional_encoding!r}",
    )
    _check(
        cfg.positional_encoding == "off" or cfg.d_model % 4 == 0,
        "d_model",
        "sine positional encoding needs d_model divisible by 4",
    )
    _check(0.0 <= cfg.dropout < 1.0, "dropout", f"must lie in [0, 1), got {cfg.dropout}")
    _check(cfg.ca_mode in CA_MODES, "ca_mode", f"expected one of {CA_MODES}, got {cfg.ca_mode!r}")
    _check(cfg.blend in BLEND_MODES, "blend", f"expected one of {BLEND_MODES}, got {cfg.blend!r}")
    _check(cfg.shots >= 1, "shots", f"must be >= 1, got {cfg.shots}")
    _check(0 <= cfg.fold < 4, "fold", f"expected 0..3, got {cfg.fold}")
    _check(cfg.episodes >= 1, "episodes", f"must be >= 1, got {cfg.episodes}")
    _check(cfg.miou_mode in MIOU_MODES, "miou_mode", f"expected one of {MIOU_MODES}, got {cfg.miou_mode!r}")
    _check(cfg.workers >= 1, "workers", f"must be >= 1, got {cfg.workers}")
    _check(cfg.log_every >= 1, "log_every", f"must be >= 1, got {cfg.log_every}")
    for key in ("seed", "eval_seed", "encoder_seed"):
        _check(getattr(cfg, key) >= 0, key, "seeds must be non-negative")


_HINTS: Optional[Dict[str, Any]] = None


def _field_types() -> Dict[str, Any]:
    global _HINTS
    if _HINTS is None:
        _HINTS = get_type_hints(TrainConfig)
    return _HINTS


def _coerce(key: str, value: Any) -> Any:
    hint = _field_types()[key]
    if hint == Optional[int]:
        if value is None:
            return None
        hint = int
    if hint is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(key, f"expected a boolean, got {value!r}")
    if hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(key, f"expected an integer, got {value!r}")
    if hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(key, f"expected a number, got {value!r}")
    if hint is str:
        if isinstance(value, str):
            return value
        raise ConfigError(key, f"expected a string, got {value!r}")
    raise ConfigError(key, f"unsupported field type {hint!r}")


def from_dict(data: Mapping[str, Any], base: Optional[TrainConfig] = None) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(key, "unknown config key")
    values = {k: _coerce(k, v) for k, v in data.items()}
    return replace(base, **values) if base is not None else TrainConfig(**values)


def resolve_config_path(name: Union[str, Path]) -> Path:
    """A path if it exists, otherwise ``$MASKMATCH_CONFIG_DIR/NAME.json``."""
    p = Path(name)
    if p.exists():
        return p
    root = config_dir()
    if root is not None:
        candidate = root / (p.name if p.suffix == ".json" else f"{p.name}.json")
        if candidate.exists():
            return candidate
    raise ConfigError("config", f"config file not found: {name}")


def read_config_file(path: Path) -> Dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from e
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path}: top level must be an object")
    for key in REQUIRED_FILE_KEYS:
        if key not in data:
            raise ConfigError(key, f"missing required key in {path}")
    return data


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> TrainConfig:
    """defaults < config file < overrides; ``None`` override values are skipped."""
    data: Dict[str, Any] = {}
    if path is not None:
        data.update(read_config_file(resolve_config_path(path)))
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return from_dict(data)


def write_config(cfg: TrainConfig, path: Path) -> None:
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
