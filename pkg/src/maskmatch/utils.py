from __future__ import annotations

import hashlib
import os
from pathlib import Path
from typing import Optional

import numpy as np


CONFIG_DIR_ENV = "MASKMATCH_CONFIG_DIR"


class MaskMatchError(Exception):
    exit_code = 1


class ConfigError(MaskMatchError):
    exit_code = 2

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config error [{key}]: {message}")


class DimensionError(MaskMatchError, ValueError):
    pass


class DomainError(MaskMatchError, ArithmeticError):
    pass


class ContractError(MaskMatchError):
    pass


class CheckpointError(MaskMatchError, OSError):
    exit_code = 1


class CheckpointVersionError(CheckpointError):
    def __init__(self, path: Path, found: object, expected: object):
        self.path = path
        self.found = found
        self.expected = expected
        super().__init__(f"checkpoint version mismatch in {path}: found {found}, expected {expected}")


def ensure_dir(p: Path) -> None:
    p.mkdir(parents=True, exist_ok=True)


def abspath(p: str | Path) -> str:
    return str(Path(p).resolve())


def git_blob_hash(p: Path) -> str:
    """Content hash computed the way `git hash-object` does for a blob."""
    data = Path(p).read_bytes()
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def config_dir(base: Optional[dict] = None) -> Optional[Path]:
    env = dict(os.environ)
    if base:
        env.update(base)
    raw = env.get(CONFIG_DIR_ENV)
    return Path(raw) if raw else None


def derive_rng(*keys: int) -> np.random.Generator:
    # SeedSequence mixes every key, so streams for (seed, role, index) never collide
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))
