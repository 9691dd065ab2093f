"""Run directories, experiment manifests, digests and orphan detection.

A run directory is content-addressed by the digest of its resolved config,
holds exactly one ``manifest.json`` and every output file that manifest
lists (paths relative to the run directory, each with its SHA-256).
"""
from __future__ import annotations

import hashlib
import json
import os
import subprocess
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

from filelock import FileLock, Timeout

from . import __version__
from .errors import DiffProbeError

MANIFEST = "manifest.json"
LOCK = ".lock"
WORKSPACE_ENV = "DIFFPROBE_WORKSPACE"


class RunLockedError(DiffProbeError):
    """Another invocation holds the run directory's lock."""


def workspace_root(default: str | Path = "workspace") -> Path:
    return Path(os.environ.get(WORKSPACE_ENV, default)).resolve()


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class ExperimentManifest:
    command: str
    config: dict
    config_digest: str
    seed: int
    code_version: str = field(default_factory=code_version)
    inputs: dict = field(default_factory=dict)    # name -> digest
    outputs: dict = field(default_factory=dict)   # relpath -> sha256
    children: list = field(default_factory=list)  # relpaths of nested manifests
    metrics: dict = field(default_factory=dict)
    deterministic: bool = False
    wall_time: float = 0.0
    status: str = "running"
    error: str | None = None
    created: float = field(default_factory=time.time)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentManifest":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class RunDir:
    """Owns one run directory: output registration and manifest writing."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)

    def file(self, rel: str) -> Path:
        p = self.path / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    @property
    def manifest_path(self) -> Path:
        return self.path / MANIFEST

    def load(self) -> ExperimentManifest | None:
        try:
            return read_manifest(self.manifest_path)
        except FileNotFoundError:
            return None

    def write(self, manifest: ExperimentManifest) -> Path:
        tmp = self.path / (MANIFEST + ".tmp")
        with open(tmp, "w") as fh:
            json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        os.replace(tmp, self.manifest_path)
        return self.manifest_path

    def register(self, manifest: ExperimentManifest, *rels: str) -> None:
        for rel in rels:
            manifest.outputs[str(rel)] = file_digest(self.path / rel)

    @contextmanager
    def lock(self, timeout: float = 0):
        lock = FileLock(str(self.path / LOCK))
        try:
            lock.acquire(timeout=timeout)
        except Timeout:
            raise RunLockedError(f"run directory {self.path} is locked by another invocation")
        try:
            yield
        finally:
            lock.release()
            try:
                (self.path / LOCK).unlink()
            except FileNotFoundError:
                pass


def read_manifest(path: str | Path) -> ExperimentManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    with open(path) as fh:
        return ExperimentManifest.from_dict(json.load(fh))


def verify_manifest(run_dir: str | Path) -> list[str]:
    """Problems found with a run: missing or tampered outputs, bad status."""
    run_dir = Path(run_dir)
    try:
        m = read_manifest(run_dir)
    except FileNotFoundError:
        return [f"{run_dir}: no manifest"]
    except (json.JSONDecodeError, TypeError) as exc:
        return [f"{run_dir}: unreadable manifest ({exc})"]
    problems = []
    if m.status != "completed":
        problems.append(f"{run_dir}: status is {m.status!r}")
    for rel, digest in m.outputs.items():
        p = run_dir / rel
        if not p.exists():
            problems.append(f"{p}: listed output is missing")
            continue
        actual = file_digest(p)
        if actual != digest:
            problems.append(f"{p}: digest mismatch (manifest {digest[:12]}, file {actual[:12]})")
    for child in m.children:
        problems.extend(verify_manifest((run_dir / child).parent))
    return problems


def find_manifests(root: str | Path) -> list[Path]:
    return sorted(Path(root).rglob(MANIFEST))


def find_orphans(root: str | Path) -> list[Path]:
    """Files under ``root`` that no manifest claims (locks and manifests excluded)."""
    root = Path(root)
    claimed = set()
    for mpath in find_manifests(root):
        try:
            m = read_manifest(mpath)
        except (json.JSONDecodeError, TypeError):
            continue
        claimed.add(mpath.resolve())
        for rel in m.outputs:
            claimed.add((mpath.parent / rel).resolve())
    orphans = []
    for p in root.rglob("*"):
        if p.is_file() and p.name != LOCK and p.resolve() not in claimed:
            orphans.append(p)
    return sorted(orphans)
