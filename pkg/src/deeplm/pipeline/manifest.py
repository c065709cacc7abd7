"""Per-stage run manifests with content digests and staleness checks.

``manifests/<stage>.json`` lists the config hash, seed, versions and the
sha256 of every file the stage read or wrote. Wall-clock timestamps go to
``manifests/<stage>.timestamps.json`` so the manifest itself is reproducible.
"""

from __future__ import annotations

import hashlib
import json
import platform
import time
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import pandas as pd
import scipy

from .. import __version__
from ..errors import StageError, StalenessError


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def artifact_digest(path) -> str:
    """Digest of a file, or of a directory as the digest of its sorted listing."""
    path = Path(path)
    if path.is_dir():
        h = hashlib.sha256()
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(f.relative_to(path).as_posix().encode() + b"\0" + file_digest(f).encode() + b"\n")
        return h.hexdigest()
    return file_digest(path)


def versions() -> dict:
    return {
        "deeplm": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


class StageRun:
    """Records the inputs a stage reads and the outputs it writes.

    ``require(path)`` checks an upstream artifact exists and still has the
    digest its producing stage recorded, then logs it as an input.
    """

    def __init__(self, out_dir, stage: str, config, seed: int):
        self.out_dir = Path(out_dir)
        self.stage = stage
        self.config = config
        self.seed = seed
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self._started = time.time()

    def rel(self, path) -> str:
        return Path(path).resolve().relative_to(self.out_dir.resolve()).as_posix()

    def require(self, path, producer: Optional[str] = None) -> Path:
        path = Path(path)
        if not path.exists():
            hint = f" (run `{producer}` first)" if producer else ""
            raise StageError(f"missing upstream artifact {path}{hint}")
        digest = artifact_digest(path)
        rel = self.rel(path)
        recorded = recorded_digest(self.out_dir, rel)
        if recorded is not None and recorded != digest:
            raise StalenessError(f"{path} changed after it was produced; rerun the stage that writes it")
        self.inputs[rel] = digest
        return path

    def produced(self, paths: Iterable) -> None:
        for p in paths:
            self.outputs[self.rel(p)] = artifact_digest(p)

    def manifest(self) -> dict:
        return {
            "stage": self.stage,
            "config_hash": self.config.digest(),
            "seed": self.seed,
            "versions": versions(),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
        }

    def write(self) -> Path:
        mdir = self.out_dir / "manifests"
        mdir.mkdir(parents=True, exist_ok=True)
        path = mdir / f"{self.stage}.json"
        path.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        stamps = {"started": self._started, "finished": time.time()}
        (mdir / f"{self.stage}.timestamps.json").write_text(json.dumps(stamps, indent=2) + "\n")
        return path


def load_manifests(out_dir) -> dict:
    mdir = Path(out_dir) / "manifests"
    if not mdir.is_dir():
        return {}
    return {
        p.stem: json.loads(p.read_text())
        for p in sorted(mdir.glob("*.json"))
        if not p.name.endswith(".timestamps.json")
    }


def recorded_digest(out_dir, rel_path: str) -> Optional[str]:
    """Digest a stage recorded for the output ``rel_path``, if any."""
    for m in load_manifests(out_dir).values():
        if rel_path in m.get("outputs", {}):
            return m["outputs"][rel_path]
    return None
