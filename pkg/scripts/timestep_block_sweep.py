"""Accuracy over (diffusion step, block) for a trained toy checkpoint.

Writes sweep.csv, best.json and one heatmap per pooling size inside the
sweep's run directory.

Usage: python scripts/timestep_block_sweep.py CHECKPOINT_RUN_DIR [--workspace DIR]
"""
import argparse
from pathlib import Path

from diffprobe.commands import run_command


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--workspace", type=Path, default=Path("workspace"))
    ap.add_argument("--t", type=int, nargs="+", default=[1, 10, 50, 150, 500, 999])
    ap.add_argument("--b", type=int, nargs="+", default=None)
    ap.add_argument("--pool", type=int, nargs="+", default=[1, 2])
    ap.add_argument("--epochs", type=int, default=28)
    args = ap.parse_args()

    cfg = {"checkpoint": args.checkpoint, "t_values": args.t, "pool_values": args.pool,
           "epochs": args.epochs}
    if args.b:
        cfg["b_values"] = args.b
    m, run_dir = run_command("sweep", cfg, args.workspace)
    best = m.metrics["best"]
    print(f"best cell t={best['t']} b={best['b']} p={best['pool']} "
          f"top-1 {100 * best['accuracy']:.1f}%")
    print(f"table and heatmaps in {run_dir}")


if __name__ == "__main__":
    main()
