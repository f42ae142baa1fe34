#!/usr/bin/env python3
"""Aggregate environment stepping rate at training batch size.

Measures raw control steps/second through the vectorized environment with a
random standing-ish policy, after a JIT warmup pass. The training-time figure
in metrics.csv (env_steps_per_s) additionally includes the PPO update.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from softquad.config import Config
from softquad.env import VecEnv


def measure(num_envs: int, steps: int, seed: int = 0) -> float:
    cfg = Config()
    env = VecEnv(cfg, num_envs=num_envs, seed=seed)
    env.reset()
    rng = np.random.default_rng(seed)
    act = 0.1 * rng.standard_normal((num_envs, 8))
    for _ in range(20):  # warmup: JIT + first resets
        env.step(act)
    t0 = time.perf_counter()
    for _ in range(steps):
        env.step(act)
    dt = time.perf_counter() - t0
    return num_envs * steps / dt


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--envs", type=int, default=256)
    ap.add_argument("--steps", type=int, default=200)
    args = ap.parse_args(argv)

    rate = measure(args.envs, args.steps)
    cores = os.cpu_count() or 1
    print(f"{rate:.0f} env-steps/s at {args.envs} envs on {cores} cores")
    return 0


if __name__ == "__main__":
    sys.exit(main())
