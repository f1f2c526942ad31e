#!/usr/bin/env python3
"""From-scratch desk experiment: train both flow actors on point-mass over
several seeds, report normalized scores against the proportional-controller
oracle, and drop run directories for plotting.

    python scripts/desk_scratch.py --seeds 5 --out runs/scratch
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
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--actors", nargs="+", default=["flow_g", "flow_t"])
    p.add_argument("--out", default="runs/scratch")
    p.add_argument("--workers", type=int, default=None)
    args = p.parse_args()

    jobs = []
    for actor in args.actors:
        for seed in range(args.seeds):
            extra = [f"out_dir={args.out}/{actor}-s{seed}"]
            jobs.append((actor, seed, extra))
    results = experiments.run_jobs_parallel(experiments.run_desk_scratch, jobs, args.workers)
    by_actor = {}
    for r in results:
        print(json.dumps(r))
        by_actor.setdefault(r["actor"], []).append(r["normalized"])
    for actor, scores in sorted(by_actor.items()):
        print(f"{actor}: mean normalized score {np.mean(scores):.3f} over {len(scores)} seeds")


if __name__ == "__main__":
    main()
