"""
Run configuration helpers

Strict JSON loading for the dataclass configs and the RunManifest written
next to every command's outputs.
"""

import dataclasses
import json
import logging
import platform
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

from mra_errors import ConfigError

logger = logging.getLogger(__name__)

__version__ = "0.3.0"

MANIFEST_NAME = "manifest.json"
MANIFEST_SUFFIX = ".manifest.json"


def load_json_object(path: Path) -> Dict[str, Any]:
    """Read a JSON file whose top level is an object"""
    path = Path(path)
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError("config file not found", path=str(path))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}", path=str(path))
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object", path=str(path))
    return data


def check_keys(cls, data: Dict[str, Any], what: str) -> None:
    """Reject keys that are not fields of the dataclass `cls`"""
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {what} key {unknown[0]!r}", unknown=unknown)


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def manifest_path_for(output: Path) -> Path:
    """manifest.json inside an output directory, <file>.manifest.json beside a file"""
    output = Path(output)
    if output.is_dir() or not output.suffix:
        return output / MANIFEST_NAME
    return output.with_name(output.name + MANIFEST_SUFFIX)


@dataclass
class RunManifest:
    """Record of one command invocation; see docs/MANIFEST_SCHEMA.md"""
    command: str
    argv: List[str]
    config: Dict[str, Any] = field(default_factory=dict)
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    seeds: Dict[str, int] = field(default_factory=dict)
    tool_version: str = __version__
    python_version: str = field(default_factory=platform.python_version)
    started_at: str = field(default_factory=utc_now)
    finished_at: Optional[str] = None

    def finish(self) -> "RunManifest":
        self.finished_at = utc_now()
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True, default=str)
        logger.debug("Wrote manifest %s", path)
        return path

    @classmethod
    def from_file(cls, path: Path) -> "RunManifest":
        data = load_json_object(path)
        check_keys(cls, data, "manifest")
        for required in ("command", "argv"):
            if required not in data:
                raise ConfigError(f"manifest lacks {required!r}", path=str(path))
        return cls(**data)
