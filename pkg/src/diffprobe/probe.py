"""Training and evaluating classification heads on diffusion features.

Two regimes:

* :func:`train_probe` works on cached :class:`FeatureRecord` pairs, so the
  backbone is frozen by construction (the linear-probe setting).
* :func:`train_probe_live` extracts features on the fly, optionally letting
  gradients flow into the backbone (``recipe.frozen = False``, finetuning).

Features are standardised with training-split statistics instead of a batch
norm layer. Logit ties in :func:`evaluate` resolve to the lowest class index.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .backbone import UNet, weight_digest
from .data import AUGMENTATIONS, _augment
from .errors import InvalidConfigError, InvalidInputError, ProvenanceError, TrainingDivergedError
from .features import FeatureRecord, FeatureRequest, draw_noise, flatten, pool_activation
from .heads import Head, HeadConfig, build_head, head_forward
from .schedule import NoiseSchedule, q_sample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProbeRecipe:
    epochs: int = 28
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    gamma: float = 0.1
    period: int = 8
    batch_size: int = 64
    augmentation: tuple = ("center_crop", "horizontal_flip")
    frozen: bool = True

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        object.__setattr__(self, "augmentation", tuple(self.augmentation))
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise InvalidConfigError("epochs must be >= 1")
        if not 0 < self.gamma <= 1:
            raise InvalidConfigError("gamma must lie in (0, 1]")
        if not isinstance(self.period, int) or self.period < 1:
            raise InvalidConfigError("period must be >= 1")
        if self.lr <= 0 or self.batch_size < 1:
            raise InvalidConfigError("lr and batch_size must be positive")
        unknown = set(self.augmentation) - set(AUGMENTATIONS)
        if unknown:
            raise InvalidConfigError(f"unknown augmentation(s): {sorted(unknown)}")

    def lr_at(self, epoch: int) -> float:
        """Step decay: ``lr * gamma ** (epoch // period)`` with 0-based epochs."""
        return self.lr * self.gamma ** (epoch // self.period)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["augmentation"] = list(self.augmentation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeRecipe":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfigError(f"unknown recipe keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ProbeResult:
    top1_accuracy: float
    best_epoch: int
    per_epoch_losses: list
    per_epoch_val_accuracy: list
    lr_trace: list
    head_params: int
    wall_time: float = 0.0
    manifest: str | None = None
    head: Head | None = field(default=None, repr=False, compare=False)

    def metrics(self) -> dict:
        d = asdict(self)
        d.pop("head")
        return d


class Standardizer:
    """Per-dimension (flat) or per-channel (maps) z-scoring with frozen statistics."""

    def __init__(self, x: torch.Tensor):
        dims = (0,) if x.dim() == 2 else (0, 2, 3)
        self.mean = x.mean(dim=dims, keepdim=True)
        std = x.std(dim=dims, keepdim=True, unbiased=False)
        self.std = torch.where(std > 1e-6, std, torch.ones_like(std))

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / self.std

    def state(self) -> dict:
        return {"mean": self.mean, "std": self.std}


@torch.no_grad()
def predict(head: Head, x: torch.Tensor, batch_size: int = 1024) -> torch.Tensor:
    was_training = head.training
    head.eval()
    out = torch.cat([head_forward(head, x[i:i + batch_size])
                     for i in range(0, x.shape[0], batch_size)])
    head.train(was_training)
    return out


def accuracy_from_logits(logits: torch.Tensor, labels: torch.Tensor) -> float:
    """Top-1 accuracy; ``argmax`` returns the first maximal index, so ties go low."""
    if logits.dim() != 2 or logits.shape[0] != labels.shape[0]:
        raise InvalidInputError(
            f"logits {tuple(logits.shape)} incompatible with {labels.shape[0]} labels")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]):
        raise InvalidInputError(f"labels outside [0, {logits.shape[1]})")
    if labels.numel() == 0:
        raise InvalidInputError("no samples to evaluate")
    return float((logits.argmax(dim=1) == labels).double().mean())


def evaluate(head: Head, features: torch.Tensor, labels: torch.Tensor) -> float:
    """Top-1 accuracy of ``head`` on already-standardised features."""
    if labels.numel() and int(labels.max()) >= head.config.num_classes:
        raise InvalidInputError(
            f"label {int(labels.max())} exceeds head output dimension {head.config.num_classes}")
    return accuracy_from_logits(predict(head, features), labels)


def _head_input(rec: FeatureRecord, cfg: HeadConfig) -> torch.Tensor:
    return rec.flat if cfg.flat_input else rec.maps


def check_provenance(train: FeatureRecord, val: FeatureRecord, cfg: HeadConfig,
                     expected_checkpoint: str | None = None) -> None:
    """Raise :class:`ProvenanceError` unless the pair can feed ``cfg``."""
    if train.labels is None or val.labels is None:
        raise InvalidInputError("feature records must carry labels for probing")
    if train.dataset_split_id == val.dataset_split_id:
        raise ProvenanceError("train/val split", "two disjoint splits",
                              f"both {train.dataset_split_id!r}")
    if train.checkpoint_hash != val.checkpoint_hash:
        raise ProvenanceError("validation features checkpoint",
                              train.checkpoint_hash, val.checkpoint_hash)
    if expected_checkpoint is not None and train.checkpoint_hash != expected_checkpoint:
        raise ProvenanceError("feature checkpoint", expected_checkpoint, train.checkpoint_hash)
    for key in ("t", "b", "pool"):
        a, b = getattr(train.request, key), getattr(val.request, key)
        if a != b:
            raise ProvenanceError(f"feature request {key}", a, b)
    if train.channels != cfg.input_channels:
        raise ProvenanceError("head input channels", cfg.input_channels, train.channels)
    if cfg.flat_input and train.request.pool != cfg.pool:
        raise ProvenanceError("head pool size", cfg.pool, train.request.pool)


def _make_optimizer(params, recipe: ProbeRecipe):
    return torch.optim.Adam(params, lr=recipe.lr, betas=recipe.betas,
                            weight_decay=recipe.weight_decay)


def _check_finite(loss: torch.Tensor, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite probe loss {loss.item()} at epoch {epoch}, step {step}; "
            "try a smaller learning rate")


def _log_epoch(fh, epoch, loss, lr, acc):
    line = f"epoch={epoch} loss={loss:.6f} lr={lr:.3e} val_acc={acc:.4f}"
    log.info(line)
    if fh is not None:
        fh.write(line + "\n")
        fh.flush()


def train_probe(train: FeatureRecord, val: FeatureRecord, head_cfg: HeadConfig,
                recipe: ProbeRecipe = ProbeRecipe(), seed: int = 0,
                expected_checkpoint: str | None = None,
                train_flipped: FeatureRecord | None = None,
                log_path: str | Path | None = None) -> ProbeResult:
    """Fit a head on frozen cached features and report best-epoch validation accuracy.

    ``train_flipped`` optionally holds features of the horizontally flipped
    training images; when given and flipping is in the recipe, each sample
    is served flipped with probability 1/2 per epoch.
    """
    start = time.perf_counter()
    check_provenance(train, val, head_cfg, expected_checkpoint)
    if train_flipped is not None:
        check_provenance(train_flipped, val, head_cfg, expected_checkpoint)
    x_tr = _head_input(train, head_cfg)
    norm = Standardizer(x_tr)
    x_tr = norm(x_tr)
    x_fl = None
    if train_flipped is not None and "horizontal_flip" in recipe.augmentation:
        x_fl = norm(_head_input(train_flipped, head_cfg))
    x_va = norm(_head_input(val, head_cfg))
    y_tr, y_va = train.labels, val.labels
    if int(torch.cat([y_tr, y_va]).max()) >= head_cfg.num_classes:
        raise InvalidInputError("labels exceed the head's class count")

    head = build_head(head_cfg, seed)
    opt = _make_optimizer(head.parameters(), recipe)
    gen = torch.Generator().manual_seed(int(seed))
    losses, accs, lrs = [], [], []
    best_acc, best_epoch, best_state = -1.0, 0, None
    fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(recipe.epochs):
            lr = recipe.lr_at(epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            head.train()
            order = torch.randperm(len(y_tr), generator=gen)
            flips = torch.rand(len(y_tr), generator=gen) < 0.5 if x_fl is not None else None
            total, count = 0.0, 0
            for step, i in enumerate(range(0, len(order), recipe.batch_size)):
                idx = order[i:i + recipe.batch_size]
                xb = x_tr[idx]
                if flips is not None:
                    xb = torch.where(flips[idx].reshape(-1, *[1] * (xb.dim() - 1)),
                                     x_fl[idx], xb)
                loss = F.cross_entropy(head(xb), y_tr[idx])
                _check_finite(loss, epoch, step)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            acc = evaluate(head, x_va, y_va)
            losses.append(total / count)
            accs.append(acc)
            lrs.append(lr)
            _log_epoch(fh, epoch, losses[-1], lr, acc)
            if acc > best_acc:
                best_acc, best_epoch = acc, epoch
                best_state = copy.deepcopy(head.state_dict())
    finally:
        if fh is not None:
            fh.close()
    head.load_state_dict(best_state)
    head.standardizer = norm
    return ProbeResult(top1_accuracy=best_acc, best_epoch=best_epoch, per_epoch_losses=losses,
                       per_epoch_val_accuracy=accs, lr_trace=lrs,
                       head_params=sum(p.numel() for p in head.parameters()),
                       wall_time=time.perf_counter() - start, head=head)


def _live_features(model: UNet, sched: NoiseSchedule, x0, eps, req: FeatureRequest,
                   cfg: HeadConfig) -> torch.Tensor:
    t = torch.full((x0.shape[0],), req.t, dtype=torch.long)
    x_t = q_sample(x0, t, eps, sched).x_t
    _, acts = model(x_t, t, taps={req.b})
    pooled = pool_activation(acts[req.b], req.pool)
    return flatten(pooled) if cfg.flat_input else pooled


def train_probe_live(model: UNet, sched: NoiseSchedule, train_images, train_labels,
                     val_images, val_labels, req: FeatureRequest, head_cfg: HeadConfig,
                     recipe: ProbeRecipe = ProbeRecipe(), seed: int = 0,
                     log_path: str | Path | None = None) -> ProbeResult:
    """Train with on-the-fly extraction; ``recipe.frozen=False`` also updates the backbone.

    Noise is fixed per image (drawn once from ``req.seed``) while image-space
    augmentation is redrawn every epoch. With ``frozen=True`` the backbone
    weight digest is verified unchanged at the end.
    """
    start = time.perf_counter()
    req.validate(sched.T, model.registry)
    if model.registry[req.b].out_channels != head_cfg.input_channels:
        raise ProvenanceError("head input channels", head_cfg.input_channels,
                              model.registry[req.b].out_channels)
    if head_cfg.flat_input and head_cfg.pool != req.pool:
        raise ProvenanceError("head pool size", head_cfg.pool, req.pool)
    digest_before = weight_digest(model)
    eps_tr = draw_noise(train_images.shape, req.seed, train_images.dtype)
    eps_va = draw_noise(val_images.shape, req.seed, val_images.dtype)
    for p in model.parameters():
        p.requires_grad_(not recipe.frozen)
    model.eval()
    with torch.no_grad():
        norm = Standardizer(torch.cat([
            _live_features(model, sched, train_images[i:i + 256], eps_tr[i:i + 256], req, head_cfg)
            for i in range(0, len(train_labels), 256)]))
    head = build_head(head_cfg, seed)
    params = list(head.parameters()) + ([] if recipe.frozen else list(model.parameters()))
    opt = _make_optimizer(params, recipe)
    gen = torch.Generator().manual_seed(int(seed))
    aug = tuple(a for a in recipe.augmentation if a != "center_crop")
    res = train_images.shape[-1]
    losses, accs, lrs = [], [], []
    best_acc, best_epoch, best_state = -1.0, 0, None
    fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(recipe.epochs):
            lr = recipe.lr_at(epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            head.train()
            order = torch.randperm(len(train_labels), generator=gen)
            total, count = 0.0, 0
            for step, i in enumerate(range(0, len(order), recipe.batch_size)):
                idx = order[i:i + recipe.batch_size]
                xb = train_images[idx]
                if aug:
                    xb = _augment(xb, aug, res, gen)
                with torch.set_grad_enabled(not recipe.frozen):
                    feats = _live_features(model, sched, xb, eps_tr[idx], req, head_cfg)
                loss = F.cross_entropy(head(norm(feats)), train_labels[idx])
                _check_finite(loss, epoch, step)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            with torch.no_grad():
                feats = torch.cat([
                    _live_features(model, sched, val_images[i:i + 256], eps_va[i:i + 256],
                                   req, head_cfg)
                    for i in range(0, len(val_labels), 256)])
            acc = evaluate(head, norm(feats), val_labels)
            losses.append(total / count)
            accs.append(acc)
            lrs.append(lr)
            _log_epoch(fh, epoch, losses[-1], lr, acc)
            if acc > best_acc:
                best_acc, best_epoch = acc, epoch
                best_state = copy.deepcopy(head.state_dict())
    finally:
        if fh is not None:
            fh.close()
        for p in model.parameters():
            p.requires_grad_(True)
    if recipe.frozen and weight_digest(model) != digest_before:
        raise RuntimeError("frozen probe modified backbone weights")
    head.load_state_dict(best_state)
    head.standardizer = norm
    return ProbeResult(top1_accuracy=best_acc, best_epoch=best_epoch, per_epoch_losses=losses,
                       per_epoch_val_accuracy=accs, lr_trace=lrs,
                       head_params=sum(p.numel() for p in head.parameters()),
                       wall_time=time.perf_counter() - start, head=head)


def save_result(result: ProbeResult, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        json.dump(result.metrics(), fh, indent=2)
    return path
