#!/usr/bin/env python3
"""Per-sampling-step gradient-norm comparison of the velocity parameterizations
at init, plus the closed-form linear-velocity check.

    python scripts/gradient_ablation.py --seeds 30
"""

import argparse
import json
import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np

from sacflow import experiments


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", type=int, default=30)
    p.add_argument("--k", type=int, default=4)
    args = p.parse_args()
    out = experiments.gradient_stability_ratios(n_seeds=args.seeds, k_steps=args.k)
    for label, d in out.items():
        print(f"{label:14s} ratio {d['ratio']:10.3f} profile {np.round(d['profile'], 5).tolist()}")
    print(json.dumps({k: v["ratio"] for k, v in out.items()}))


if __name__ == "__main__":
    main()
