"""Grid search over (t, b, p) with resumable cells and Fig.-3 style output.

Cells are trained independently with a fresh head and a seed derived from
``(master_seed, t, b, p)``. When an output directory is given, each finished
cell writes its own manifest under ``cells/``; a restarted sweep loads those
instead of retraining.

``select_best`` breaks accuracy ties by smaller t, then smaller b, then smaller p.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import torch

from .backbone import UNet, weight_digest
from .data import ImageDataset
from .errors import EmptySweepError, InvalidConfigError
from .features import extract_many
from .heads import HeadConfig
from .probe import ProbeRecipe, ProbeResult, save_result, train_probe
from .runs import ExperimentManifest, RunDir, config_digest, read_manifest
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

REFERENCE_T_GRID = (1, 5, 10, 25, 50, 90, 150, 250, 500, 999)


def default_t_values(T: int) -> list[int]:
    """The roughly log-spaced reference grid, rescaled from 1000 steps to ``T``."""
    vals = sorted({min(T, max(1, round(t * T / 1000))) for t in REFERENCE_T_GRID})
    return vals


def default_b_values(registry, count: int = 5) -> list[int]:
    """``count`` blocks at even spacing centred on the bottleneck."""
    n, mid = len(registry), registry.bottleneck
    step = max(1, (n - 1) // max(1, count - 1))
    half = count // 2
    vals = {min(n, max(1, mid + i * step)) for i in range(-half, count - half)}
    return sorted(vals)


def cell_seed(master_seed: int, t: int, b: int, p: int) -> int:
    blob = f"{master_seed}:{t}:{b}:{p}".encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:4], "little")


@dataclass(frozen=True)
class SweepGrid:
    t_values: tuple
    b_values: tuple
    pool_values: tuple
    head: HeadConfig
    recipe: ProbeRecipe = ProbeRecipe()
    master_seed: int = 0
    feature_seed: int = 0

    def __post_init__(self):
        for name in ("t_values", "b_values", "pool_values"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise InvalidConfigError(f"sweep axis {name} is empty")
            object.__setattr__(self, name, vals)

    def cells(self):
        return [(t, b, p) for t in self.t_values for b in self.b_values for p in self.pool_values]


@dataclass
class CellFailure:
    diagnostic: str
    top1_accuracy: float = float("nan")


@dataclass
class SweepResult:
    table: dict                 # (t, b, p) -> ProbeResult | CellFailure
    best: tuple | None
    provenance: str | None = None

    def accuracies(self) -> dict:
        return {k: v.top1_accuracy for k, v in self.table.items()
                if isinstance(v, ProbeResult)}


def select_best(result: SweepResult | dict) -> tuple:
    table = result.table if isinstance(result, SweepResult) else result
    ok = {k: v for k, v in table.items() if not isinstance(v, CellFailure)}
    if not ok:
        raise EmptySweepError("no sweep cell completed successfully")

    def acc(v):
        return v.top1_accuracy if hasattr(v, "top1_accuracy") else float(v)

    return min(ok, key=lambda k: (-acc(ok[k]), k[0], k[1], k[2]))


class FeatureSource:
    """Extracts (and memoises per step) train/val features for one checkpoint."""

    def __init__(self, model: UNet, sched: NoiseSchedule, dataset: ImageDataset,
                 seed: int = 0, flipped: bool = True, val_split: str = "val"):
        self.model = model
        self.sched = sched
        self.dataset = dataset
        self.seed = seed
        self.flipped = flipped
        self.val_split = val_split
        self.checkpoint_hash = weight_digest(model)
        self._memo = {}

    def records(self, t: int, blocks: Sequence[int], pools: Sequence[int]) -> dict:
        """``{(b, p): (train, val, train_flipped_or_None)}`` for one step ``t``."""
        missing = [(b, p) for b in blocks for p in pools if (t, b, p) not in self._memo]
        if missing:
            mb = sorted({b for b, _ in missing})
            mp = sorted({p for _, p in missing})
            ds = self.dataset
            out = {}
            for split in ("train", self.val_split):
                x, y = ds.split(split)
                out[split] = extract_many(self.model, self.sched, x, t, mb, mp, seed=self.seed,
                                          checkpoint_hash=self.checkpoint_hash,
                                          split_id=ds.split_id(split), labels=y)
            if self.flipped:
                x, y = ds.split("train")
                out["flip"] = extract_many(self.model, self.sched, x.flip(-1), t, mb, mp,
                                           seed=self.seed, checkpoint_hash=self.checkpoint_hash,
                                           split_id=ds.split_id("train") + ":hflip", labels=y)
            for key in out["train"]:
                self._memo[(t, *key)] = (out["train"][key], out[self.val_split][key],
                                         out["flip"][key] if self.flipped else None)
        return {(b, p): self._memo[(t, b, p)] for b in blocks for p in pools}

    def drop(self, t: int) -> None:
        for key in [k for k in self._memo if k[0] == t]:
            del self._memo[key]


def cell_head(grid: SweepGrid, registry, b: int, p: int) -> HeadConfig:
    return replace(grid.head, input_channels=registry[b].out_channels, pool=p)


def run_cell(source: FeatureSource, grid: SweepGrid, t: int, b: int, p: int,
             recipe: ProbeRecipe, log_path=None) -> ProbeResult:
    train, val, flip = source.records(t, [b], [p])[(b, p)]
    head_cfg = cell_head(grid, source.model.registry, b, p)
    return train_probe(train, val, head_cfg, recipe, seed=cell_seed(grid.master_seed, t, b, p),
                       expected_checkpoint=source.checkpoint_hash, train_flipped=flip,
                       log_path=log_path)


def _cell_dir(t, b, p) -> str:
    return f"cells/t{t}_b{b}_p{p}"


def _load_cell(path: Path) -> ProbeResult | None:
    try:
        m = read_manifest(path)
    except (FileNotFoundError, json.JSONDecodeError):
        return None
    if m.status != "completed":
        return None
    fields = {k: v for k, v in m.metrics.items() if k in ProbeResult.__dataclass_fields__}
    return ProbeResult(**fields)


def run_sweep(grid: SweepGrid, source: FeatureSource, budget: int | None = None,
              out_dir: str | Path | None = None, parent: ExperimentManifest | None = None,
              deterministic: bool = False) -> SweepResult:
    """Train every cell of ``grid``; ``budget`` overrides the recipe's epoch count."""
    recipe = grid.recipe if budget is None else replace(grid.recipe, epochs=int(budget))
    run = RunDir(out_dir) if out_dir is not None else None
    table = {}
    for t in grid.t_values:
        pending = [(b, p) for b in grid.b_values for p in grid.pool_values
                   if run is None or _load_cell(run.path / _cell_dir(t, b, p)) is None]
        if pending:
            # one forward pass per batch serves every pending (b, p) at this t
            try:
                source.records(t, sorted({b for b, _ in pending}),
                               sorted({p for _, p in pending}))
            except Exception as exc:  # fall back to per-cell extraction and failure
                log.warning("batched extraction at t=%s failed (%s); extracting per cell", t, exc)
        for b in grid.b_values:
            for p in grid.pool_values:
                key = (t, b, p)
                rel = _cell_dir(t, b, p)
                if run is not None:
                    done = _load_cell(run.path / rel)
                    if done is not None:
                        log.info("cell %s already complete, skipping", key)
                        table[key] = done
                        if parent is not None and f"{rel}/manifest.json" not in parent.children:
                            parent.children.append(f"{rel}/manifest.json")
                        continue
                cell_cfg = {"t": t, "b": b, "pool": p, "seed": cell_seed(grid.master_seed, t, b, p),
                            "feature_seed": source.seed, "head": cell_head(
                                grid, source.model.registry, b, p).to_dict(),
                            "recipe": recipe.to_dict(), "checkpoint": source.checkpoint_hash}
                manifest = ExperimentManifest(
                    command="probe", config=cell_cfg, config_digest=config_digest(cell_cfg),
                    seed=cell_cfg["seed"], inputs={"checkpoint": source.checkpoint_hash},
                    deterministic=deterministic)
                start = time.perf_counter()
                cell_run = RunDir(run.path / rel) if run is not None else None
                try:
                    if cell_run is not None:
                        logp = cell_run.file("probe.log")
                        logp.write_text("")
                    else:
                        logp = None
                    res = run_cell(source, grid, t, b, p, recipe, log_path=logp)
                    table[key] = res
                    manifest.status = "completed"
                    manifest.metrics = res.metrics()
                    if cell_run is not None:
                        save_result(res, cell_run.file("result.json"))
                        cell_run.register(manifest, "result.json", "probe.log")
                except Exception as exc:  # a failed cell must not stop the sweep
                    log.warning("cell %s failed: %s", key, exc)
                    table[key] = CellFailure(f"{type(exc).__name__}: {exc}")
                    manifest.status = "failed"
                    manifest.error = traceback.format_exc(limit=3)
                    if cell_run is not None and (cell_run.path / "probe.log").exists():
                        cell_run.register(manifest, "probe.log")
                manifest.wall_time = time.perf_counter() - start
                if cell_run is not None:
                    cell_run.write(manifest)
                    if parent is not None:
                        parent.children.append(f"{rel}/manifest.json")
        source.drop(t)
    ok = [k for k, v in table.items() if not isinstance(v, CellFailure)]
    best = select_best(table) if ok else None
    return SweepResult(table=table, best=best,
                       provenance=str(run.manifest_path) if run is not None else None)


def write_sweep_table(result: SweepResult, path: str | Path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "b", "p", "accuracy", "epochs", "wall_time", "status"])
        for (t, b, p), v in sorted(result.table.items()):
            if isinstance(v, CellFailure):
                w.writerow([t, b, p, "", "", "", "failed"])
            else:
                w.writerow([t, b, p, repr(v.top1_accuracy), len(v.per_epoch_losses),
                            f"{v.wall_time:.3f}", "completed"])
    return Path(path)


def read_sweep_table(path: str | Path) -> dict:
    out = {}
    with open(path) as fh:
        for row in csv.DictReader(fh):
            key = (int(row["t"]), int(row["b"]), int(row["p"]))
            out[key] = float(row["accuracy"]) if row["status"] == "completed" else float("nan")
    return out


def plot_heatmaps(accs: dict, out_dir: str | Path, prefix: str = "heatmap") -> list[Path]:
    """One accuracy-over-(t, b) image per pooling size."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    out_dir = Path(out_dir)
    paths = []
    ts = sorted({k[0] for k in accs})
    bs = sorted({k[1] for k in accs})
    for p in sorted({k[2] for k in accs}):
        grid = np.full((len(bs), len(ts)), np.nan)
        for i, b in enumerate(bs):
            for j, t in enumerate(ts):
                grid[i, j] = accs.get((t, b, p), np.nan)
        fig, ax = plt.subplots(figsize=(1.2 + 0.55 * len(ts), 1.0 + 0.4 * len(bs)))
        im = ax.imshow(grid, cmap="viridis", vmin=0, vmax=1, aspect="auto", origin="lower")
        for i in range(len(bs)):
            for j in range(len(ts)):
                if not np.isnan(grid[i, j]):
                    ax.text(j, i, f"{100 * grid[i, j]:.0f}", ha="center", va="center",
                            fontsize=6, color="w")
        ax.set_xticks(range(len(ts)))
        ax.set_xticklabels(ts, fontsize=7)
        ax.set_yticks(range(len(bs)))
        ax.set_yticklabels(bs, fontsize=7)
        ax.set_xlabel("time step t")
        ax.set_ylabel("block b")
        ax.set_title(f"linear probe accuracy, pool {p}x{p}", fontsize=8)
        fig.colorbar(im, ax=ax, fraction=0.046)
        fig.tight_layout()
        path = out_dir / f"{prefix}_p{p}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths
