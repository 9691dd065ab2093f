"""Collect finished runs under a directory into one markdown report.

Runs whose manifests fail verification (missing or modified outputs, failed
status) are listed separately and never contribute numbers.
"""
from __future__ import annotations

import json
import logging
import shutil
import time
from pathlib import Path

from .heads import HeadConfig, head_param_count
from .runs import (ExperimentManifest, RunDir, config_digest, find_manifests, read_manifest,
                   verify_manifest)

log = logging.getLogger(__name__)

EMPTY_NOTICE = "No completed runs found; the report is empty."


def _rel(p: Path, root: Path) -> str:
    try:
        return p.relative_to(root).as_posix()
    except ValueError:
        return str(p)


def collect(root: str | Path) -> tuple[list[tuple[Path, ExperimentManifest]], list[tuple[Path, list]]]:
    """Verified top-level runs and invalid runs under ``root``.

    Sweep cells are reached through their parent and are not listed on their own.
    """
    root = Path(root)
    valid, invalid = [], []
    child_dirs = set()
    manifests = []
    for mpath in find_manifests(root):
        try:
            m = read_manifest(mpath)
        except (json.JSONDecodeError, TypeError) as exc:
            invalid.append((mpath.parent, [f"unreadable manifest ({exc})"]))
            continue
        manifests.append((mpath.parent, m))
        for child in m.children:
            child_dirs.add((mpath.parent / child).parent.resolve())
    for run_dir, m in manifests:
        if m.command == "report" or run_dir.resolve() in child_dirs:
            continue
        problems = verify_manifest(run_dir)
        (invalid if problems else valid).append((run_dir, problems if problems else m))
    return valid, invalid


def _table(header, rows) -> list[str]:
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return out


def render(root: Path, valid, invalid, out_dir: Path) -> tuple[str, list[str]]:
    """Markdown text plus the figures copied into ``out_dir``."""
    lines = ["# Experiment report", ""]
    figures = []
    by_cmd = {}
    for run_dir, m in valid:
        by_cmd.setdefault(m.command, []).append((run_dir, m))
    if not valid:
        lines += [EMPTY_NOTICE, ""]

    def figure(run_dir: Path, name: str, caption: str):
        src = run_dir / name
        if src.exists():
            dst = out_dir / "figures" / f"{run_dir.name}_{Path(name).name}"
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src, dst)
            rel = dst.relative_to(out_dir).as_posix()
            figures.append(rel)
            lines.extend([f"![{caption}]({rel})", ""])

    if "train-diffusion" in by_cmd:
        lines += ["## Diffusion training", ""]
        rows = []
        for run_dir, m in by_cmd["train-diffusion"]:
            mt = m.metrics
            rows.append([_rel(run_dir, root), mt.get("steps"), mt.get("parameters"),
                         f"{mt.get('initial_smoothed_loss', float('nan')):.4f}",
                         f"{mt.get('final_smoothed_loss', float('nan')):.4f}",
                         mt.get("weight_digest", "")[:12]])
        lines += _table(["run", "steps", "params", "initial loss", "final loss", "checkpoint"], rows)
        lines.append("")
        for run_dir, _ in by_cmd["train-diffusion"]:
            figure(run_dir, "loss.png", "diffusion loss")

    if "probe" in by_cmd:
        lines += ["## Probes", ""]
        rows = []
        for run_dir, m in by_cmd["probe"]:
            mt, c = m.metrics, m.config
            params = mt.get("head_params")
            rows.append([_rel(run_dir, root), c.get("family"), mt.get("t"), mt.get("b"),
                         mt.get("pool"), f"{100 * mt.get('top1_accuracy', float('nan')):.2f}",
                         mt.get("best_epoch"), params])
        lines += _table(["run", "head", "t", "b", "p", "top-1 %", "best epoch", "head params"],
                        rows)
        lines.append("")

    if "sweep" in by_cmd:
        lines += ["## Sweeps", ""]
        for run_dir, m in by_cmd["sweep"]:
            best = m.metrics.get("best", {})
            acc = best.get("accuracy")
            lines.append(f"- `{_rel(run_dir, root)}`: best cell t={best.get('t')}, "
                         f"b={best.get('b')}, p={best.get('pool')}"
                         + (f", top-1 {100 * acc:.2f}%" if acc is not None else "")
                         + f" ({len(m.children)} cells, {m.metrics.get('failed', 0)} failed)")
            lines.append("")
            for name in sorted(k for k in m.outputs if k.endswith(".png")):
                figure(run_dir, name, f"sweep {name}")

    if "cka" in by_cmd:
        lines += ["## Representation similarity (linear CKA)", ""]
        rows = []
        for run_dir, m in by_cmd["cka"]:
            mt, c = m.metrics, m.config
            rows.append([_rel(run_dir, root), c.get("t_a"), c.get("t_b") or c.get("t_a"),
                         f"{mt.get('early_quadrant_mean', float('nan')):.3f}",
                         f"{mt.get('late_quadrant_mean', float('nan')):.3f}",
                         mt.get("degenerate")])
        lines += _table(["run", "t (rows)", "t (cols)", "early-block mean", "late-block mean",
                         "degenerate"], rows)
        lines.append("")
        for run_dir, _ in by_cmd["cka"]:
            figure(run_dir, "cka.png", "linear CKA")

    other = sorted(set(by_cmd) - {"train-diffusion", "probe", "sweep", "cka"})
    if other:
        lines += ["## Other runs", ""]
        for cmd in other:
            for run_dir, m in by_cmd[cmd]:
                lines.append(f"- `{cmd}` at `{_rel(run_dir, root)}`")
        lines.append("")

    if invalid:
        lines += ["## Invalid runs (excluded)", ""]
        for run_dir, problems in invalid:
            lines.append(f"- `{_rel(run_dir, root)}`")
            lines += [f"  - {p}" for p in problems[:5]]
        lines.append("")
    return "\n".join(lines), figures


def head_param_table(configs: dict[str, HeadConfig]) -> list[str]:
    return _table(["head", "params"], [[k, head_param_count(v)] for k, v in configs.items()])


def cmd_report(root: str | Path) -> tuple[ExperimentManifest, Path]:
    """Write ``<root>/report/report.md`` with its own manifest."""
    root = Path(root)
    start = time.perf_counter()
    valid, invalid = collect(root)
    run = RunDir(root / "report")
    cfg = {"root": str(root.resolve())}
    m = ExperimentManifest(command="report", config=cfg, config_digest=config_digest(cfg), seed=0)
    with run.lock():
        if (run.path / "figures").exists():
            shutil.rmtree(run.path / "figures")
        text, figures = render(root, valid, invalid, run.path)
        run.file("report.md").write_text(text)
        m.inputs = {_rel(d, root): mm.config_digest for d, mm in valid}
        m.metrics = {"valid_runs": len(valid), "invalid_runs": len(invalid),
                     "empty": not valid}
        run.register(m, "report.md", *figures)
        m.status = "completed"
        m.wall_time = time.perf_counter() - start
        run.write(m)
    if not valid:
        print(EMPTY_NOTICE)
    return m, run.path
