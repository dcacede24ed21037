#!/usr/bin/env python3
"""Benchmark per-step fine-tuning time of every method against full tuning.

Uses a wider-than-default backbone so weight-gradient savings dominate
timer noise. Prints methods sorted fastest-first.

Usage:
    python3 scripts/benchmark_speed.py [--steps 8] [--episodes 3] [--repeats 2]
"""

import argparse
import sys

from peft_forge.analysis import bench_speedup
from peft_forge.episodes import SamplerConfig, episode_rng, sample_episode, synth_dataset
from peft_forge.finetune import FinetuneConfig
from peft_forge.peft import METHODS, PEFTSpec
from peft_forge.vit import ViTConfig, ViTModel


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=8)
    parser.add_argument("--episodes", type=int, default=3)
    parser.add_argument("--repeats", type=int, default=2)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    cfg_v = ViTConfig(image_size=16, patch_size=4, d=128, L=2, n_h=4)
    model = ViTModel.random_init(cfg_v, seed=args.seed)
    ds = synth_dataset(5, 30, cfg_v.image_size, separation=4.0, rng=args.seed)
    scfg = SamplerConfig(way_range=(5, 5), shot_range=(5, 5), query_range=(5, 5))
    episodes = [sample_episode(ds, scfg, episode_rng(args.seed, i))
                for i in range(args.episodes)]
    specs = [PEFTSpec(m, prompt_len=2) for m in METHODS]
    cfg = FinetuneConfig(steps=args.steps)

    best = {}
    for _ in range(args.repeats):
        for row in bench_speedup(specs, model, episodes, cfg, warmup=1, lr=1e-3):
            prev = best.get(row.method)
            if prev is None or row.median_step_time < prev.median_step_time:
                best[row.method] = row

    full_time = best["full"].median_step_time
    print(f"{'method':16s} {'step (ms)':>10s} {'vs full':>8s}")
    for method in sorted(best, key=lambda m: best[m].median_step_time):
        t = best[method].median_step_time
        print(f"{method:16s} {t * 1e3:10.2f} {full_time / t:7.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
