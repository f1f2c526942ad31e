#!/usr/bin/env python3
"""Monte-Carlo check that the noise-augmented rollout preserves the terminal
marginal of the closed-form Gaussian flow.

    python scripts/marginal_check.py --sigma 0.1 --k 128
"""

import argparse
import json
import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

from sacflow import experiments


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--m", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--k", type=int, default=128)
    p.add_argument("--n", type=int, default=100_000)
    args = p.parse_args()
    stats = experiments.marginal_preservation_stats(args.m, args.tau, args.sigma, args.k, args.n)
    print(json.dumps(stats, indent=2))


if __name__ == "__main__":
    main()
