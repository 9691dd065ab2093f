"""Print closed-form and instantiated parameter counts for the published heads."""
import torch

from diffprobe.backbone import count_parameters
from diffprobe.heads import PUBLISHED_HEADS, build_head, head_param_count, published_config


def main():
    print(f"{'head':<16} {'formula':>12} {'module':>12} {'published':>10} {'rel':>7}")
    for name, _, published in PUBLISHED_HEADS:
        cfg = published_config(name)
        with torch.device("meta"):
            n_mod = count_parameters(build_head(cfg))
        n = head_param_count(cfg)
        print(f"{name:<16} {n:>12,d} {n_mod:>12,d} {published / 1e6:>9.1f}M "
              f"{n / published - 1:>+7.1%}")


if __name__ == "__main__":
    main()
