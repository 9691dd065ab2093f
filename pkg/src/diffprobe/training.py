"""Diffusion pre-training loop and self-describing checkpoints.

A checkpoint directory holds ``model.pt`` (state dict), ``train_state.pt``
(optimizer, sampling generator, step, loss history) and ``checkpoint.json``
(backbone config, its digest, registry listing, seed, step count, schedule
parameters and the weight digest used as the checkpoint hash).
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch

from .backbone import BackboneConfig, UNet, build_backbone, weight_digest
from .errors import CorruptCacheError, ProvenanceError, TrainingDivergedError
from .schedule import NoiseSchedule, build_linear_schedule, q_sample, simple_loss

CHECKPOINT_SCHEMA = 1


@dataclass
class TrainState:
    model: UNet
    sched: NoiseSchedule
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    step: int = 0
    losses: list = field(default_factory=list)
    seed: int = 0


def init_training(cfg: BackboneConfig, sched: NoiseSchedule, lr: float = 5e-4,
                  seed: int = 0) -> TrainState:
    model, _ = build_backbone(cfg, seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(int(seed) + 1)
    return TrainState(model, sched, opt, gen, seed=seed)


def train_steps(state: TrainState, images: torch.Tensor, steps: int, batch_size: int = 32,
                flip: bool = True, on_step: Callable | None = None) -> TrainState:
    """Advance ``state`` to ``steps`` total optimisation steps.

    Each step samples (x0, t, eps) from the state's own generator, so a run
    split across a checkpoint/resume boundary is bitwise identical to an
    uninterrupted one. ``on_step(state, loss)`` is called after every step.
    """
    model, sched, opt, gen = state.model, state.sched, state.optimizer, state.generator
    model.train()
    n = images.shape[0]
    while state.step < steps:
        idx = torch.randint(0, n, (batch_size,), generator=gen)
        x0 = images[idx]
        if flip:
            mask = torch.rand(batch_size, generator=gen) < 0.5
            x0 = torch.where(mask[:, None, None, None], x0.flip(-1), x0)
        t = torch.randint(1, sched.T + 1, (batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        x_t = q_sample(x0, t, eps, sched).x_t
        loss = simple_loss(model(x_t, t), eps)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite diffusion loss at step {state.step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        state.step += 1
        state.losses.append(loss.item())
        if on_step is not None:
            on_step(state, state.losses[-1])
    return state


def smoothed(losses, window: int = 20) -> tuple[float, float]:
    """(initial, final) trailing-window means of a loss curve."""
    w = max(1, min(window, len(losses)))
    return (sum(losses[:w]) / w, sum(losses[-w:]) / w)


def save_checkpoint(state: TrainState, path: str | Path) -> dict:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    cfg = state.model.config
    meta = {
        "schema_version": CHECKPOINT_SCHEMA,
        "backbone": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "registry": state.model.registry.to_list(),
        "seed": state.seed,
        "step": state.step,
        "schedule": state.sched.params(),
        "weight_digest": weight_digest(state.model),
    }
    for name, obj in (("model.pt", state.model.state_dict()),
                      ("train_state.pt", {"optimizer": state.optimizer.state_dict(),
                                          "generator": state.generator.get_state(),
                                          "step": state.step, "losses": state.losses})):
        tmp = path / (name + ".tmp")
        torch.save(obj, tmp)
        os.replace(tmp, path / name)
    tmp = path / "checkpoint.json.tmp"
    with open(tmp, "w") as fh:
        json.dump(meta, fh, indent=2)
    os.replace(tmp, path / "checkpoint.json")
    return meta


def read_checkpoint_meta(path: str | Path) -> dict:
    path = Path(path)
    try:
        with open(path / "checkpoint.json") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CorruptCacheError(path, "checkpoint.json", "missing") from None
    except json.JSONDecodeError as exc:
        raise CorruptCacheError(path, "checkpoint.json", str(exc)) from None


def load_checkpoint(path: str | Path, lr: float = 5e-4,
                    with_train_state: bool = False) -> tuple[UNet, NoiseSchedule, dict] | TrainState:
    """Rebuild the model (and optionally the full training state) from ``path``.

    The loaded weights are re-digested and compared with the recorded
    checkpoint hash.
    """
    path = Path(path)
    meta = read_checkpoint_meta(path)
    cfg = BackboneConfig.from_dict(meta["backbone"])
    sp = meta["schedule"]
    sched = build_linear_schedule(sp["T"], sp["beta_start"], sp["beta_end"])
    model, _ = build_backbone(cfg, meta["seed"])
    try:
        model.load_state_dict(torch.load(path / "model.pt", weights_only=True))
    except (FileNotFoundError, RuntimeError, EOFError) as exc:
        raise CorruptCacheError(path, "model.pt", str(exc)) from None
    digest = weight_digest(model)
    if digest != meta["weight_digest"]:
        raise ProvenanceError("checkpoint weights", meta["weight_digest"], digest)
    if not with_train_state:
        return model, sched, meta
    ts = torch.load(path / "train_state.pt", weights_only=False)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    opt.load_state_dict(ts["optimizer"])
    gen = torch.Generator()
    gen.set_state(ts["generator"])
    return TrainState(model, sched, opt, gen, step=ts["step"], losses=list(ts["losses"]),
                      seed=meta["seed"])
