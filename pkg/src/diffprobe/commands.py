"""Command bodies shared by the CLI and the replay harness.

Each ``cmd_*`` resolves its config, claims the content-addressed run
directory ``<workspace>/runs/<command>-<digest>``, does its work and writes
a manifest. A completed, verified run directory is returned untouched on a
repeated identical invocation.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import tempfile
import time
import traceback
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import cka as cka_mod
from .backbone import weight_digest
from .config import (CkaConfig, ExtractConfig, ProbeConfig, SampleConfig, SweepConfig,
                     TrainDiffusionConfig, load_config)
from .data import ImageDataset, load_image_folder, make_synthetic
from .errors import InvalidConfigError, ProvenanceError
from .features import (FeatureRequest, cache_path, extract_features, extract_many, read_cache,
                       write_cache)
from .heads import head_param_count
from .probe import save_result, train_probe, train_probe_live
from .runs import (ExperimentManifest, RunDir, config_digest, file_digest, read_manifest,
                   verify_manifest, workspace_root)
from .schedule import build_linear_schedule, ddpm_sample
from .sweep import (FeatureSource, SweepGrid, default_b_values, default_t_values, plot_heatmaps,
                    run_sweep, write_sweep_table)
from .training import (init_training, load_checkpoint, save_checkpoint, smoothed, train_steps)

log = logging.getLogger(__name__)

CHECKPOINT_FILES = ("checkpoint/model.pt", "checkpoint/train_state.pt", "checkpoint/checkpoint.json")


# ---------------------------------------------------------------- helpers

@contextmanager
def _deterministic(enabled: bool):
    prev = torch.are_deterministic_algorithms_enabled()
    if enabled:
        torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def load_dataset(cfg) -> ImageDataset:
    if cfg.dataset_source == "synthetic":
        return make_synthetic(cfg.dataset_classes, cfg.dataset_per_class, cfg.resolution,
                              seed=cfg.dataset_seed)
    return load_image_folder(cfg.dataset_path, cfg.resolution, on_corrupt=cfg.on_corrupt)


def dataset_digest(ds: ImageDataset) -> str:
    h = hashlib.sha256(json.dumps(ds.spec.to_dict(), sort_keys=True).encode())
    for split in sorted(ds.images):
        h.update(ds.images[split].numpy().tobytes())
        h.update(ds.labels[split].numpy().tobytes())
    return h.hexdigest()


def resolve_checkpoint(path: str, workspace: Path) -> Path:
    """Accept a train run directory or a bare checkpoint directory."""
    p = Path(path)
    if not p.is_absolute() and not p.exists():
        p = workspace / p
    if (p / "checkpoint" / "checkpoint.json").exists():
        problems = [x for x in verify_manifest(p)] if (p / "manifest.json").exists() else []
        if problems:
            raise ProvenanceError("checkpoint run", "a completed run with intact outputs",
                                  "; ".join(problems))
        return p / "checkpoint"
    if (p / "checkpoint.json").exists():
        return p
    raise InvalidConfigError(f"no checkpoint found at {path}")


def open_checkpoint(path: str, expected_digest: str | None, workspace: Path):
    model, sched, meta = load_checkpoint(resolve_checkpoint(path, workspace))
    if expected_digest is not None and meta["weight_digest"] != expected_digest:
        raise ProvenanceError("checkpoint", expected_digest, meta["weight_digest"])
    return model, sched, meta


def _execute(command: str, cfg, workspace: Path, body, deterministic: bool = False,
             resume: bool = False) -> tuple[ExperimentManifest, Path]:
    config = cfg.to_dict()
    digest = config_digest(config)
    run = RunDir(workspace / "runs" / f"{command}-{digest[:12]}")
    with run.lock():
        existing = run.load()
        if existing is not None and existing.status == "completed" \
                and not verify_manifest(run.path):
            log.info("%s already complete at %s", command, run.path)
            return existing, run.path
        manifest = ExperimentManifest(command=command, config=config, config_digest=digest,
                                      seed=cfg.seed, deterministic=deterministic)
        start = time.perf_counter()
        try:
            with _deterministic(deterministic):
                torch.manual_seed(cfg.seed)
                body(run, manifest, resume)
            manifest.status = "completed"
        except BaseException as exc:
            manifest.status = "failed"
            manifest.error = f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=4)}"
            manifest.wall_time = time.perf_counter() - start
            run.write(manifest)
            raise
        manifest.wall_time = time.perf_counter() - start
        run.write(manifest)
    return manifest, run.path


# ---------------------------------------------------------------- commands

def cmd_train_diffusion(cfg: TrainDiffusionConfig, workspace: Path, deterministic=False,
                        resume=False):
    def body(run: RunDir, m: ExperimentManifest, resume: bool):
        ds = load_dataset(cfg)
        images, _ = ds.split("train")
        m.inputs["dataset"] = dataset_digest(ds)
        bcfg = cfg.backbone()
        sched = build_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        ckpt = run.path / "checkpoint"
        logp = run.file("train.log")
        if resume and (ckpt / "checkpoint.json").exists():
            state = load_checkpoint(ckpt, lr=cfg.lr, with_train_state=True)
            log.info("resuming from step %d", state.step)
        else:
            state = init_training(bcfg, sched, lr=cfg.lr, seed=cfg.seed)
            logp.write_text("")
        with open(logp, "a") as fh:
            def on_step(st, loss):
                if st.step % cfg.log_every == 0 or st.step == cfg.steps:
                    window = st.losses[-cfg.smoothing_window:]
                    fh.write(f"step={st.step} loss={loss:.6f} "
                             f"smoothed={sum(window) / len(window):.6f}\n")
                    fh.flush()
                if st.step % cfg.checkpoint_every == 0:
                    save_checkpoint(st, ckpt)

            train_steps(state, images, cfg.steps, cfg.batch_size, flip=cfg.horizontal_flip,
                        on_step=on_step)
        meta = save_checkpoint(state, ckpt)
        with open(run.file("loss.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            w.writerows((i + 1, repr(v)) for i, v in enumerate(state.losses))
        _plot_loss(state.losses, cfg.smoothing_window, run.file("loss.png"))
        first, last = smoothed(state.losses, cfg.smoothing_window)
        m.metrics = {"steps": state.step, "initial_smoothed_loss": first,
                     "final_smoothed_loss": last, "loss_ratio": last / first,
                     "weight_digest": meta["weight_digest"],
                     "parameters": sum(p.numel() for p in state.model.parameters())}
        run.register(m, *CHECKPOINT_FILES, "loss.csv", "train.log", "loss.png")

    return _execute("train-diffusion", cfg, workspace, body, deterministic, resume)


def _plot_loss(losses, window, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    arr = np.asarray(losses)
    kernel = np.ones(min(window, len(arr))) / min(window, len(arr))
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.arange(1, len(arr) + 1), arr, lw=0.5, alpha=0.4, label="loss")
    ax.plot(np.arange(len(kernel), len(arr) + 1), np.convolve(arr, kernel, mode="valid"),
            lw=1.2, label=f"mean over {len(kernel)}")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def cmd_sample(cfg: SampleConfig, workspace: Path, deterministic=False, resume=False):
    def body(run, m, resume):
        model, sched, meta = open_checkpoint(cfg.checkpoint, cfg.checkpoint_digest, workspace)
        m.inputs["checkpoint"] = meta["weight_digest"]
        x = ddpm_sample(model, sched, cfg.n, cfg.seed, clip=cfg.clip)
        np.save(run.file("samples.npy"), x.numpy())
        _save_grid(x, run.file("samples.png"))
        m.metrics = {"n": cfg.n, "mean": float(x.mean()), "std": float(x.std()),
                     "finite": bool(torch.isfinite(x).all()),
                     "sha256": hashlib.sha256(x.numpy().tobytes()).hexdigest()}
        run.register(m, "samples.npy", "samples.png")

    return _execute("sample", cfg, workspace, body, deterministic, resume)


def _save_grid(x: torch.Tensor, path):
    from PIL import Image

    n = x.shape[0]
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    c, h, w = x.shape[1:]
    grid = torch.zeros(c, rows * h, cols * w)
    for i in range(n):
        r, q = divmod(i, cols)
        grid[:, r * h:(r + 1) * h, q * w:(q + 1) * w] = x[i]
    pix = ((grid.clamp(-1, 1) + 1) * 127.5).round().byte().permute(1, 2, 0).numpy()
    Image.fromarray(pix).resize((cols * w * 4, rows * h * 4), Image.NEAREST).save(path)


def cmd_extract(cfg: ExtractConfig, workspace: Path, deterministic=False, resume=False):
    def body(run, m, resume):
        model, sched, meta = open_checkpoint(cfg.checkpoint, cfg.checkpoint_digest, workspace)
        ds = load_dataset(cfg)
        m.inputs.update(checkpoint=meta["weight_digest"], dataset=dataset_digest(ds))
        x, y = ds.split(cfg.split)
        req = FeatureRequest(t=cfg.t, b=cfg.b, pool=cfg.pool, seed=cfg.seed, flatten=cfg.flatten)
        rec = extract_features(model, sched, x, req, checkpoint_hash=meta["weight_digest"],
                               split_id=ds.split_id(cfg.split), labels=y)
        path = write_cache(rec, cache_path(run.path / "features", rec))
        rel = path.relative_to(run.path).as_posix()
        m.metrics = {"shape": list(rec.data.shape), "channels": rec.channels,
                     "content_sha256": rec.content_digest(), "cache": rel}
        run.register(m, rel, rel[:-4] + ".json")

    return _execute("extract", cfg, workspace, body, deterministic, resume)


def cmd_probe(cfg: ProbeConfig, workspace: Path, deterministic=False, resume=False):
    def body(run, m, resume):
        model, sched, meta = open_checkpoint(cfg.checkpoint, cfg.checkpoint_digest, workspace)
        ds = load_dataset(cfg)
        m.inputs.update(checkpoint=meta["weight_digest"], dataset=dataset_digest(ds))
        ck = meta["weight_digest"]
        req = FeatureRequest(t=cfg.t, b=cfg.b, pool=cfg.pool, seed=cfg.feature_seed)
        req.validate(sched.T, model.registry)
        channels = model.registry[cfg.b].out_channels
        head_cfg = cfg.head_config(channels, cfg.pool, ds.spec.num_classes)
        recipe = cfg.recipe()
        logp = run.file("probe.log")
        logp.write_text("")
        outputs = ["probe.log", "result.json", "head.pt"]
        if recipe.frozen:
            recs = {}
            for name, split, flip in (("train", "train", False), ("val", cfg.val_split, False),
                                      ("flip", "train", True)):
                if name == "flip" and "horizontal_flip" not in recipe.augmentation:
                    continue
                x, y = ds.split(split)
                sid = ds.split_id(split) + (":hflip" if flip else "")
                rec = extract_features(model, sched, x.flip(-1) if flip else x, req,
                                       checkpoint_hash=ck, split_id=sid, labels=y)
                path = write_cache(rec, cache_path(run.path / "features", rec))
                rel = path.relative_to(run.path).as_posix()
                outputs += [rel, rel[:-4] + ".json"]
                # the probe consumes the cache, exactly as a later re-run would
                recs[name] = read_cache(path, expected_checkpoint=ck)
            res = train_probe(recs["train"], recs["val"], head_cfg, recipe, seed=cfg.seed,
                              expected_checkpoint=ck, train_flipped=recs.get("flip"),
                              log_path=logp)
        else:
            xtr, ytr = ds.split("train")
            xva, yva = ds.split(cfg.val_split)
            res = train_probe_live(model, sched, xtr, ytr, xva, yva, req, head_cfg, recipe,
                                   seed=cfg.seed, log_path=logp)
        save_result(res, run.file("result.json"))
        torch.save({"head": res.head.state_dict(), "head_config": head_cfg.to_dict(),
                    "standardizer": res.head.standardizer.state(), "checkpoint": ck},
                   run.file("head.pt"))
        m.metrics = res.metrics()
        m.metrics.update(family=head_cfg.family, head_param_formula=head_param_count(head_cfg),
                         t=cfg.t, b=cfg.b, pool=cfg.pool)
        run.register(m, *outputs)

    return _execute("probe", cfg, workspace, body, deterministic, resume)


def cmd_sweep(cfg: SweepConfig, workspace: Path, deterministic=False, resume=False):
    def body(run, m, resume):
        model, sched, meta = open_checkpoint(cfg.checkpoint, cfg.checkpoint_digest, workspace)
        ds = load_dataset(cfg)
        m.inputs.update(checkpoint=meta["weight_digest"], dataset=dataset_digest(ds))
        recipe = cfg.recipe()
        reg = model.registry
        first_b = (cfg.b_values or default_b_values(reg))[0]
        grid = SweepGrid(
            t_values=tuple(cfg.t_values or default_t_values(sched.T)),
            b_values=tuple(cfg.b_values or default_b_values(reg)),
            pool_values=tuple(cfg.pool_values),
            head=cfg.head_config(reg[first_b].out_channels, cfg.pool_values[0],
                                 ds.spec.num_classes),
            recipe=recipe, master_seed=cfg.seed, feature_seed=cfg.feature_seed)
        source = FeatureSource(model, sched, ds, seed=cfg.feature_seed,
                               flipped="horizontal_flip" in recipe.augmentation,
                               val_split=cfg.val_split)
        result = run_sweep(grid, source, budget=cfg.budget, out_dir=run.path, parent=m,
                           deterministic=deterministic)
        write_sweep_table(result, run.file("sweep.csv"))
        heatmaps = plot_heatmaps(result.accuracies(), run.path)
        best = {"t": None, "b": None, "pool": None, "accuracy": None}
        if result.best is not None:
            t, b, p = result.best
            best = {"t": t, "b": b, "pool": p, "accuracy": result.table[result.best].top1_accuracy}
        with open(run.file("best.json"), "w") as fh:
            json.dump(best, fh, indent=2)
        m.metrics = {"best": best, "cells": {f"{t},{b},{p}": v.top1_accuracy
                                             for (t, b, p), v in sorted(result.table.items())},
                     "failed": sum(1 for v in result.table.values()
                                   if not hasattr(v, "per_epoch_losses"))}
        run.register(m, "sweep.csv", "best.json",
                     *[h.relative_to(run.path).as_posix() for h in heatmaps])

    return _execute("sweep", cfg, workspace, body, deterministic, resume)


def cmd_cka(cfg: CkaConfig, workspace: Path, deterministic=False, resume=False):
    def body(run, m, resume):
        model_a, sched_a, meta_a = open_checkpoint(cfg.checkpoint, cfg.checkpoint_digest, workspace)
        if cfg.checkpoint_b:
            model_b, sched_b, meta_b = open_checkpoint(cfg.checkpoint_b, None, workspace)
        else:
            model_b, sched_b, meta_b = model_a, sched_a, meta_a
        ds = load_dataset(cfg)
        m.inputs.update(checkpoint_a=meta_a["weight_digest"], checkpoint_b=meta_b["weight_digest"],
                        dataset=dataset_digest(ds))
        x, _ = ds.split(cfg.split)
        if cfg.max_samples:
            x = x[:cfg.max_samples]
        t_b = cfg.t_b if cfg.t_b is not None else cfg.t_a
        seed_b = cfg.seed_b if cfg.seed_b is not None else cfg.seed
        blocks_a = cfg.blocks or model_a.registry.indices
        blocks_b = cfg.blocks or model_b.registry.indices
        layers = []
        for model, sched, meta, t, seed, blocks, tag in (
                (model_a, sched_a, meta_a, cfg.t_a, cfg.seed, blocks_a, "a"),
                (model_b, sched_b, meta_b, t_b, seed_b, blocks_b, "b")):
            recs = extract_many(model, sched, x, t, blocks, [cfg.pool], seed=seed,
                                checkpoint_hash=meta["weight_digest"])
            layers.append([cka_mod.FeatureMatrix(
                recs[(b, cfg.pool)].data.double().numpy(),
                {"model": tag, "ckpt": meta["weight_digest"][:8], "b": b, "t": t,
                 "pool": cfg.pool}) for b in blocks])
        mat = cka_mod.cka_matrix(layers[0], layers[1])
        cka_mod.write_cka_table(mat, run.file("cka.csv"))
        cka_mod.plot_cka(mat, run.file("cka.png"),
                         title=f"linear CKA: t={cfg.t_a} vs t={t_b}, pool {cfg.pool}")
        early, late = cka_mod.quadrant_means(mat.values)
        m.metrics = {"values": [[None if np.isnan(v) else float(v) for v in row]
                                for row in mat.values],
                     "early_quadrant_mean": early, "late_quadrant_mean": late,
                     "degenerate": len(mat.degenerate), "estimator": mat.estimator,
                     "n_samples": int(x.shape[0])}
        run.register(m, "cka.csv", "cka.png")

    return _execute("cka", cfg, workspace, body, deterministic, resume)


COMMANDS = {
    "train-diffusion": cmd_train_diffusion,
    "sample": cmd_sample,
    "extract": cmd_extract,
    "probe": cmd_probe,
    "sweep": cmd_sweep,
    "cka": cmd_cka,
}


def run_command(command: str, config: dict, workspace: Path | None = None,
                deterministic: bool = False, resume: bool = False):
    workspace = Path(workspace) if workspace is not None else workspace_root()
    cfg = load_config(command, None, config)
    return COMMANDS[command](cfg, workspace, deterministic=deterministic, resume=resume)


def replay(manifest_path: str | Path, workspace: Path | None = None) -> tuple[dict, dict]:
    """Re-run a recorded command from its manifest alone into a fresh workspace.

    Returns ``(original_metrics, replayed_metrics)``. Deterministic mode is
    always on for the replay.
    """
    m = read_manifest(manifest_path)
    if m.command not in COMMANDS:
        raise InvalidConfigError(f"cannot replay command {m.command!r}")
    own_tmp = workspace is None
    ws = Path(tempfile.mkdtemp(prefix="replay-")) if own_tmp else Path(workspace)
    new, _ = run_command(m.command, m.config, ws, deterministic=True)
    return m.metrics, new.metrics


def comparable_metrics(metrics: dict) -> dict:
    """Drop timing fields, which legitimately differ between replays."""
    skip = {"wall_time"}
    return {k: v for k, v in metrics.items() if k not in skip}
