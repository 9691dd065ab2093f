"""Feature extraction f(x0, t, b): noise to step t, tap block b, pool, cache.

Flattening is channel-major: a pooled map ``[N, C, p, p]`` becomes
``[N, C * p * p]`` with the channel as the slowest index, i.e. a plain
``reshape``; :func:`unflatten` inverts it exactly.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import UNet, weight_digest
from .errors import CorruptCacheError, InvalidInputError, ProvenanceError
from .schedule import NoiseSchedule, q_sample

CACHE_SCHEMA = 1

# best reported ImageNet setting, relative to the 37-block reference registry
DEFAULT_T = 90
DEFAULT_BLOCK = 24


@dataclass(frozen=True)
class FeatureRequest:
    t: int = DEFAULT_T
    b: int = DEFAULT_BLOCK
    pool: int = 1
    seed: int = 0
    flatten: bool = True

    def validate(self, T: int, registry) -> None:
        if not 1 <= self.t <= T:
            raise InvalidInputError(f"t={self.t} outside [1, {T}]")
        registry[self.b]
        if self.pool < 1:
            raise InvalidInputError(f"pool must be >= 1, got {self.pool}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FeatureRecord:
    data: torch.Tensor                 # [N, C*p*p] or [N, C, p, p], float32
    request: FeatureRequest
    channels: int
    checkpoint_hash: str
    dataset_split_id: str
    labels: torch.Tensor | None = None

    @property
    def maps(self) -> torch.Tensor:
        """The pooled maps ``[N, C, p, p]`` regardless of storage layout."""
        if self.request.flatten:
            return unflatten(self.data, self.channels, self.request.pool)
        return self.data

    @property
    def flat(self) -> torch.Tensor:
        return self.data if self.request.flatten else flatten(self.data)

    def content_digest(self) -> str:
        return _sha(self.data)


def _sha(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().contiguous().numpy().tobytes()).hexdigest()


def pool_activation(act: torch.Tensor, p: int) -> torch.Tensor:
    """Adaptive average pool ``[N, C, H, W]`` to ``[N, C, p, p]``."""
    if not isinstance(p, int) or p < 1:
        raise InvalidInputError(f"pool size must be a positive integer, got {p!r}")
    if act.dim() != 4:
        raise InvalidInputError(f"expected [N, C, H, W], got shape {tuple(act.shape)}")
    if p > min(act.shape[-2:]):
        raise InvalidInputError(f"pool {p} larger than map {tuple(act.shape[-2:])}")
    if act.shape[-2:] == (p, p):
        return act
    return F.adaptive_avg_pool2d(act, p)


def flatten(maps: torch.Tensor) -> torch.Tensor:
    return maps.reshape(maps.shape[0], -1)


def unflatten(data: torch.Tensor, channels: int, p: int) -> torch.Tensor:
    if data.shape[1] != channels * p * p:
        raise InvalidInputError(f"feature length {data.shape[1]} != {channels}*{p}^2")
    return data.reshape(data.shape[0], channels, p, p)


def draw_noise(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    """The fixed noise for a request seed: one draw per image, never per epoch."""
    return torch.randn(shape, generator=torch.Generator().manual_seed(int(seed)), dtype=dtype)


@torch.no_grad()
def extract_many(model: UNet, sched: NoiseSchedule, x0: torch.Tensor, t: int,
                 blocks: Sequence[int], pools: Sequence[int], seed: int = 0,
                 flatten_out: bool = True, checkpoint_hash: str | None = None,
                 split_id: str = "", labels: torch.Tensor | None = None,
                 batch_size: int = 256, eps: torch.Tensor | None = None) -> dict:
    """Extract every ``(b, p)`` combination at one step with a single pass per batch.

    Returns ``{(b, p): FeatureRecord}``. Noise is drawn for the whole of
    ``x0`` up front, so the result does not depend on ``batch_size``.
    """
    if x0.dim() != 4 or x0.shape[0] < 1:
        raise InvalidInputError(f"x0 must be a non-empty [N, C, H, W] batch, got {tuple(x0.shape)}")
    for b in blocks:
        for p in pools:
            FeatureRequest(t=t, b=b, pool=p, seed=seed).validate(sched.T, model.registry)
    if checkpoint_hash is None:
        checkpoint_hash = weight_digest(model)
    was_training = model.training
    model.eval()
    if eps is None:
        eps = draw_noise(x0.shape, seed, x0.dtype)
    elif eps.shape != x0.shape:
        raise InvalidInputError("eps must match x0 in shape")
    chunks = {(b, p): [] for b in blocks for p in pools}
    for start in range(0, x0.shape[0], batch_size):
        xb = x0[start:start + batch_size]
        tb = torch.full((xb.shape[0],), t, dtype=torch.long)
        x_t = q_sample(xb, tb, eps[start:start + batch_size], sched).x_t
        _, acts = model(x_t, tb, taps=set(blocks))
        for b in blocks:
            for p in pools:
                pooled = pool_activation(acts[b], p).float()
                chunks[(b, p)].append(flatten(pooled) if flatten_out else pooled)
    model.train(was_training)
    out = {}
    for (b, p), parts in chunks.items():
        req = FeatureRequest(t=t, b=b, pool=p, seed=seed, flatten=flatten_out)
        out[(b, p)] = FeatureRecord(
            data=torch.cat(parts).contiguous(), request=req,
            channels=model.registry[b].out_channels, checkpoint_hash=checkpoint_hash,
            dataset_split_id=split_id, labels=None if labels is None else labels.clone())
    return out


def extract_features(model: UNet, sched: NoiseSchedule, x0: torch.Tensor,
                     req: FeatureRequest, **kwargs) -> FeatureRecord:
    """f(x0, t, b) pooled to ``req.pool`` and tagged with its provenance."""
    req.validate(sched.T, model.registry)
    recs = extract_many(model, sched, x0, req.t, [req.b], [req.pool], seed=req.seed,
                        flatten_out=req.flatten, **kwargs)
    return recs[(req.b, req.pool)]


# ---------------------------------------------------------------- cache

def cache_key(checkpoint_hash: str, split_id: str, req: FeatureRequest) -> str:
    blob = json.dumps([checkpoint_hash, split_id, req.t, req.b, req.pool, req.seed,
                       req.flatten]).encode()
    return hashlib.sha256(blob).hexdigest()[:24]


def cache_path(root: str | Path, rec_or_hash, split_id: str | None = None,
               req: FeatureRequest | None = None) -> Path:
    if isinstance(rec_or_hash, FeatureRecord):
        rec = rec_or_hash
        return Path(root) / f"{cache_key(rec.checkpoint_hash, rec.dataset_split_id, rec.request)}.npy"
    return Path(root) / f"{cache_key(rec_or_hash, split_id, req)}.npy"


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def write_cache(rec: FeatureRecord, path: str | Path) -> Path:
    """Write ``path`` (raw float32 array) and ``path.json`` (metadata + digest).

    Both files are written to temporaries and renamed into place, data first,
    so a reader never sees a sidecar describing a half-written array.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = rec.data.detach().to(torch.float32).contiguous().numpy()
    meta = {
        "schema_version": CACHE_SCHEMA,
        "request": rec.request.to_dict(),
        "channels": rec.channels,
        "checkpoint_hash": rec.checkpoint_hash,
        "dataset_split_id": rec.dataset_split_id,
        "shape": list(arr.shape),
        "dtype": "float32",
        "sha256": hashlib.sha256(arr.tobytes()).hexdigest(),
        "labels": None if rec.labels is None else rec.labels.tolist(),
    }
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.save(fh, arr, allow_pickle=False)
    os.replace(tmp, path)
    tmp_meta = path.with_name(path.name + ".json.tmp")
    with open(tmp_meta, "w") as fh:
        json.dump(meta, fh, indent=1)
    os.replace(tmp_meta, _sidecar(path))
    return path


_META_FIELDS = ("schema_version", "request", "channels", "checkpoint_hash",
                "dataset_split_id", "shape", "dtype", "sha256", "labels")


def read_cache(path: str | Path, expected_checkpoint: str | None = None) -> FeatureRecord:
    """Load a cached record, verifying schema, shape and content digest."""
    path = Path(path)
    try:
        with open(_sidecar(path)) as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise CorruptCacheError(path, "sidecar", "metadata file missing") from None
    except json.JSONDecodeError as exc:
        raise CorruptCacheError(path, "sidecar", str(exc)) from None
    for key in _META_FIELDS:
        if key not in meta:
            raise CorruptCacheError(path, key, "missing from metadata")
    if meta["schema_version"] != CACHE_SCHEMA:
        raise CorruptCacheError(path, "schema_version", f"got {meta['schema_version']!r}")
    try:
        req = FeatureRequest(**meta["request"])
    except TypeError as exc:
        raise CorruptCacheError(path, "request", str(exc)) from None
    try:
        arr = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise CorruptCacheError(path, "data", "array file missing") from None
    except (ValueError, OSError, EOFError) as exc:
        raise CorruptCacheError(path, "data", str(exc)) from None
    if list(arr.shape) != meta["shape"]:
        raise CorruptCacheError(path, "shape", f"{list(arr.shape)} != {meta['shape']}")
    if arr.dtype != np.float32:
        raise CorruptCacheError(path, "dtype", str(arr.dtype))
    if hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest() != meta["sha256"]:
        raise CorruptCacheError(path, "sha256", "content digest mismatch")
    if expected_checkpoint is not None and meta["checkpoint_hash"] != expected_checkpoint:
        raise ProvenanceError("feature cache checkpoint", expected_checkpoint,
                              meta["checkpoint_hash"])
    labels = None if meta["labels"] is None else torch.tensor(meta["labels"], dtype=torch.long)
    return FeatureRecord(data=torch.from_numpy(arr.copy()), request=req,
                         channels=meta["channels"], checkpoint_hash=meta["checkpoint_hash"],
                         dataset_split_id=meta["dataset_split_id"], labels=labels)
