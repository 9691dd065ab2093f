"""Train the toy backbone, probe it, and write a report.

Usage: python scripts/run_toy_pipeline.py [--workspace DIR] [--steps N]
"""
import argparse
from pathlib import Path

from diffprobe.commands import run_command
from diffprobe.report import cmd_report


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workspace", type=Path, default=Path("workspace"))
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    train, train_dir = run_command("train-diffusion", {"steps": args.steps, "seed": args.seed},
                                   args.workspace)
    print(f"trained: loss {train.metrics['initial_smoothed_loss']:.4f} -> "
          f"{train.metrics['final_smoothed_loss']:.4f}")
    for t, b in [(10, 8), (90, 8), (500, 8), (10, 13)]:
        m, _ = run_command("probe", {"checkpoint": str(train_dir), "t": t, "b": b,
                                     "seed": args.seed}, args.workspace)
        print(f"probe t={t:<4d} b={b:<3d} top-1 {100 * m.metrics['top1_accuracy']:.1f}%")
    _, out = cmd_report(args.workspace)
    print(f"report: {out / 'report.md'}")


if __name__ == "__main__":
    main()
