"""Run manifests: what was run, with which config, and digests of every output."""

from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__

MANIFEST_NAME = "manifest.json"


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: list[str]
    config_digest: str
    seeds: list[int]
    versions: dict[str, str] = field(default_factory=dict)
    files: list[dict] = field(default_factory=list)

    @classmethod
    def for_run(cls, command: list[str], config_digest: str, seeds) -> "RunManifest":
        versions = {"ccein": __version__, "numpy": np.__version__, "python": platform.python_version()}
        return cls(list(command), config_digest, [int(s) for s in seeds], versions)

    def collect(self, run_dir: Path) -> None:
        """List every file under ``run_dir`` except the manifest itself, in sorted order."""
        self.files = []
        for path in sorted(p for p in run_dir.rglob("*") if p.is_file()):
            rel = path.relative_to(run_dir).as_posix()
            if rel == MANIFEST_NAME:
                continue
            self.files.append({"path": rel, "sha256": sha256_file(path), "bytes": path.stat().st_size})

    def dumps(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, run_dir: Path) -> Path:
        self.collect(run_dir)
        out = run_dir / MANIFEST_NAME
        out.write_text(self.dumps())
        return out


def verify(run_dir: Path) -> list[str]:
    """Paths whose current digest differs from the manifest (or that vanished)."""
    data = json.loads((run_dir / MANIFEST_NAME).read_text())
    bad = []
    for entry in data["files"]:
        path = run_dir / entry["path"]
        if not path.is_file() or sha256_file(path) != entry["sha256"]:
            bad.append(entry["path"])
    return bad
