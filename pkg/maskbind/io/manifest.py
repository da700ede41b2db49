"""manifest.py - run manifests (config hash, code version, seeds) written as JSON."""

from __future__ import annotations

import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

from maskbind import __version__
from maskbind.errors import ContainerError
from maskbind.schema import MANIFEST_SCHEMA, Manifest, validate_json


def build_manifest(command: str, config_hash: str, seeds: Iterable[int],
                   files: Optional[List[str]] = None,
                   checkpoint_hash: Optional[str] = None,
                   entities: Optional[Dict[str, Any]] = None,
                   extra: Optional[Dict[str, Any]] = None) -> Manifest:
    manifest: Manifest = {
        "command": command,
        "config_hash": config_hash,
        "code_version": __version__,
        "seeds": [int(s) for s in seeds],
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    if files is not None:
        manifest["files"] = list(files)
    if checkpoint_hash is not None:
        manifest["checkpoint_hash"] = checkpoint_hash
    if entities is not None:
        manifest["entities"] = entities
    if extra is not None:
        manifest["extra"] = extra
    validate_json(manifest, MANIFEST_SCHEMA, "manifest")
    return manifest


def write_manifest(path: Path, command: str, config_hash: str, seeds: Iterable[int],
                   **kwargs: Any) -> Manifest:
    manifest = build_manifest(command, config_hash, seeds, **kwargs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, ensure_ascii=False)
    return manifest


def read_manifest(path: Path) -> Manifest:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ContainerError(f"{path}: not valid JSON ({e})") from e
    validate_json(data, MANIFEST_SCHEMA, f"manifest {path}")
    return data


def manifest_matches(path: Path, config_hash: str) -> bool:
    """True when `path` exists and records the same config hash."""
    if not Path(path).is_file():
        return False
    try:
        return read_manifest(path).get("config_hash") == config_hash
    except ContainerError:
        return False


__all__ = ["build_manifest", "write_manifest", "read_manifest", "manifest_matches"]
