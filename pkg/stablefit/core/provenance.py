"""
Provenance manifests for stablefit commands.

Every command writes ``manifest.txt``: one ``key=value`` line per entry,
keys in insertion order. Values are canonical strings (JSON for
structures, ``repr`` for floats) so a manifest is byte-stable across
repeated runs and parses back to the values it recorded. No timestamps.
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from .ids import file_hash
from .types import flatten_dict
from .validate import ArtifactMissingError, StabilityValidationError

MANIFEST_NAME = "manifest.txt"


def canonical_value(value: Any) -> str:
    """
    Convert any value to its canonical manifest string.

    Args:
        value: Value to canonicalize

    Returns:
        Canonical string representation
    """
    if isinstance(value, str):
        return value.replace("\n", " ").strip()
    if isinstance(value, bool) or value is None or isinstance(value, (dict, list, tuple)):
        return json.dumps(value, sort_keys=True, separators=(",", ":"))
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Manifest:
    """Ordered key-value provenance record for one command."""

    def __init__(self, command: str, version: str):
        self.entries: List[Tuple[str, str]] = []
        self.add("tool", "stablefit")
        self.add("version", version)
        self.add("command", command)

    def add(self, key: str, value: Any) -> None:
        if "=" in key or "\n" in key:
            raise StabilityValidationError(f"invalid manifest key: {key!r}")
        self.entries.append((key, canonical_value(value)))

    def add_input(self, role: str, digest: str) -> None:
        self.add(f"input.{role}", digest)

    def add_config(self, config: Dict[str, Any], prefix: str = "config") -> None:
        """Echo a config dict as ``config.<dotted.path>=<json>`` lines."""
        for path, value in flatten_dict(config).items():
            self.entries.append((f"{prefix}.{path}", json.dumps(value, sort_keys=True, separators=(",", ":"))))

    def add_artifacts(self, out_dir: Path, names: List[str]) -> None:
        for name in names:
            self.add(f"artifact.{name}", file_hash(out_dir / name))

    def render(self) -> str:
        return "".join(f"{key}={value}\n" for key, value in self.entries)

    def write(self, out_dir: Union[str, Path]) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.render())
        return path


def read_manifest(path: Union[str, Path]) -> Dict[str, str]:
    """
    Parse a manifest file into an ordered dict.

    Raises:
        ArtifactMissingError: If the file does not exist
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise ArtifactMissingError(f"manifest not found: {path}", path=str(path))
    entries: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise StabilityValidationError(f"malformed manifest line in {path}: {line!r}")
            entries[key] = value
    return entries


def config_entries(entries: Dict[str, str], prefix: str = "config") -> Dict[str, Any]:
    """Extract ``config.*`` lines back into a nested dict."""
    nested: Dict[str, Any] = {}
    marker = prefix + "."
    for key, raw in entries.items():
        if not key.startswith(marker):
            continue
        node = nested
        parts = key[len(marker):].split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = json.loads(raw)
    return nested


def input_digest(entries: Dict[str, str], role: str) -> Optional[str]:
    return entries.get(f"input.{role}")
