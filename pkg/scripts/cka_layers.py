"""Layer-by-layer linear CKA of one checkpoint at two diffusion steps.

Usage: python scripts/cka_layers.py CHECKPOINT_RUN_DIR [--t-a 90 --t-b 500]
"""
import argparse
from pathlib import Path

from diffprobe.commands import run_command


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--workspace", type=Path, default=Path("workspace"))
    ap.add_argument("--t-a", type=int, default=90)
    ap.add_argument("--t-b", type=int, default=500)
    ap.add_argument("--pool", type=int, default=1)
    args = ap.parse_args()

    m, run_dir = run_command("cka", {"checkpoint": args.checkpoint, "t_a": args.t_a,
                                     "t_b": args.t_b, "seed_b": 1, "pool": args.pool},
                             args.workspace)
    print(f"early-block mean {m.metrics['early_quadrant_mean']:.3f}, "
          f"late-block mean {m.metrics['late_quadrant_mean']:.3f}")
    print(f"matrix in {run_dir / 'cka.csv'}, figure in {run_dir / 'cka.png'}")


if __name__ == "__main__":
    main()
