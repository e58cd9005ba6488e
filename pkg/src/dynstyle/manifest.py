"""Run manifests: what a command will read and write, recorded before it writes anything else."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__

MANIFEST_NAME = "manifest.json"


def sha256_path(path) -> str:
    """Digest of a file, or of a directory tree (relative names + bytes, sorted)."""
    p = Path(path)
    h = hashlib.sha256()
    if p.is_file():
        h.update(p.read_bytes())
        return h.hexdigest()
    if not p.is_dir():
        raise FileNotFoundError(f"input not found: {p}")
    for f in sorted(x for x in p.rglob("*") if x.is_file()):
        h.update(f.relative_to(p).as_posix().encode())
        h.update(b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)      # label -> {"path", "sha256"}
    artifacts: list = field(default_factory=list)   # output paths relative to the run directory
    options: dict = field(default_factory=dict)
    tool_version: str = __version__

    def add_input(self, label: str, path) -> None:
        self.inputs[label] = {"path": str(path), "sha256": sha256_path(path)}

    def to_json(self) -> str:
        doc = {"tool": "dynstyle", "tool_version": self.tool_version, "command": self.command,
               "config": self.config, "seeds": self.seeds, "inputs": self.inputs,
               "artifacts": sorted(self.artifacts), "options": self.options}
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / MANIFEST_NAME
        path.write_text(self.to_json())
        return path
