from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import numpy as np

from .optim import OptimizerState, restore_state, state_arrays
from .utils import CheckpointError, CheckpointVersionError, ensure_dir, git_blob_hash

MAGIC = b"MMCKPT\r\n"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")  # magic, version, header length
GROUPS = ("param", "adam_m", "adam_v")


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    config: Dict[str, Any] = field(default_factory=dict)
    seeds: Dict[str, int] = field(default_factory=dict)
    optimizer: Optional[OptimizerState] = None
    meta: Dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _encode(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(
    path: Path,
    params: Mapping[str, np.ndarray],
    config: Optional[Mapping[str, Any]] = None,
    seeds: Optional[Mapping[str, int]] = None,
    optimizer: Optional[OptimizerState] = None,
    meta: Optional[Mapping[str, Any]] = None,
) -> Path:
    """Write a self-describing container: fixed prefix, sorted JSON header, raw little-endian float64 payload.

    Output bytes depend only on the arguments, so identical runs give identical files.
    """
    groups: Dict[str, Mapping[str, np.ndarray]] = {"param": params}
    if optimizer is not None:
        groups.update(state_arrays(optimizer))
    entries = []
    chunks = []
    offset = 0
    for group in GROUPS:
        for name in sorted(groups.get(group, {})):
            arr = np.asarray(groups[group][name], dtype=np.float64)
            data = _encode(arr)
            entries.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
            chunks.append(data)
            offset += len(data)
    header = {
        "config": dict(config or {}),
        "meta": dict(meta or {}),
        "optimizer_step": optimizer.step if optimizer is not None else None,
        "seeds": {k: int(v) for k, v in (seeds or {}).items()},
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    ensure_dir(path.parent)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as f:
        f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)))
        f.write(blob)
        for c in chunks:
            f.write(c)
    tmp.replace(path)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointVersionError(path, "truncated header", FORMAT_VERSION)
    magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointVersionError(path, f"magic {magic!r}", f"magic {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(path, version, FORMAT_VERSION)
    start = _PREFIX.size
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {e}") from e
    payload = memoryview(raw)[start + hlen :]
    groups: Dict[str, Dict[str, np.ndarray]] = {g: {} for g in GROUPS}
    for entry in header.get("tensors", []):
        try:
            lo, n, name = entry["offset"], entry["nbytes"], entry["name"]
            if lo + n > len(payload):
                raise CheckpointError(f"truncated payload in {path} at {name}")
            arr = np.frombuffer(payload[lo : lo + n], dtype="<f8").astype(np.float64)
            groups[entry["group"]][name] = arr.reshape(entry["shape"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"corrupt tensor entry in {path}: {e}") from e
    opt = None
    if header.get("optimizer_step") is not None:
        opt = restore_state(int(header["optimizer_step"]), groups["adam_m"], groups["adam_v"])
    return Checkpoint(
        params=groups["param"],
        config=header.get("config", {}),
        seeds=header.get("seeds", {}),
        optimizer=opt,
        meta=header.get("meta", {}),
        version=version,
    )


def file_digest(path: Path) -> str:
    if not Path(path).is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return git_blob_hash(Path(path))
