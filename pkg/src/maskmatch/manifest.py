from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .utils import abspath, ensure_dir, git_blob_hash

MANIFEST_NAME = "manifest.jsonl"


@dataclass
class RunManifest:
    command: str
    config: Dict[str, Any]
    seeds: Dict[str, int] = field(default_factory=dict)
    checkpoints: Dict[str, str] = field(default_factory=dict)  # role -> path
    outputs: Dict[str, str] = field(default_factory=dict)  # path -> content hash
    argv: List[str] = field(default_factory=list)

    def add_outputs(self, paths: Sequence[Path]) -> None:
        for p in paths:
            if Path(p).is_file():
                self.outputs[abspath(p)] = git_blob_hash(Path(p))


def write_manifest(out_dir: Path, manifest: RunManifest) -> Path:
    """Append one JSON line to ``<out_dir>/manifest.jsonl``; earlier lines are never rewritten."""
    ensure_dir(out_dir)
    path = out_dir / MANIFEST_NAME
    line = json.dumps(asdict(manifest), sort_keys=True, ensure_ascii=False)
    with path.open("a", encoding="utf-8") as f:
        f.write(line + "\n")
    return path


def read_manifests(out_dir: Path) -> List[Dict[str, Any]]:
    path = out_dir / MANIFEST_NAME
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def last_manifest(out_dir: Path) -> Optional[Dict[str, Any]]:
    items = read_manifests(out_dir)
    return items[-1] if items else None
