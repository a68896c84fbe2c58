"""Run directories and their manifests.

Every CLI command writes ``manifest.json`` next to its outputs. The manifest
holds everything needed to replay the run; ``content_hash`` covers all of it
except wall-clock timestamps, so two replays under the determinism flag hash
identically.
"""

from __future__ import annotations

import hashlib
import json
import platform
import subprocess
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from .. import __version__
from ..errors import InputError

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return ""
    return out.stdout.strip() if out.returncode == 0 else ""


def code_version() -> dict:
    return {"package": __version__, "git": _git_revision(), "torch": torch.__version__,
            "numpy": np.__version__, "python": platform.python_version()}


def now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict = field(default_factory=dict)
    code: dict = field(default_factory=code_version)
    datasets: dict = field(default_factory=dict)
    poison_manifest: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    started: str = field(default_factory=now)
    finished: str = ""
    version: int = MANIFEST_VERSION

    def add_result(self, run_dir, relpath: str, digest: str = "") -> None:
        """Record an output file relative to the run directory. Checkpoints pass a
        weights digest, since pickled containers are not byte-stable."""
        path = Path(run_dir) / relpath
        if not path.exists():
            raise InputError(f"result file missing: {path}")
        self.results[relpath] = digest or file_digest(path)

    def content(self) -> dict:
        d = asdict(self)
        d.pop("started")
        d.pop("finished")
        return d

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.content(), sort_keys=True).encode()).hexdigest()

    def save(self, run_dir) -> Path:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        if not self.finished:
            self.finished = now()
        d = asdict(self)
        d["content_hash"] = self.content_hash()
        path = run_dir / MANIFEST_NAME
        path.write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, run_dir) -> "RunManifest":
        path = Path(run_dir)
        path = path / MANIFEST_NAME if path.is_dir() else path
        if not path.exists():
            raise InputError(f"no run manifest at {path}")
        d = json.loads(path.read_text())
        d.pop("content_hash", None)
        return cls(**d)


def seeds_of(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k == "seed" or k.endswith(".seed")}
