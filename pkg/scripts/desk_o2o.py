#!/usr/bin/env python3
"""Offline-to-online desk experiment on sparse-reach with scripted-expert demos.

    python scripts/desk_o2o.py --seed 4 --l-off 75 --l-on 4000
"""

import argparse
import json
import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

from sacflow import experiments


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seed", type=int, default=4)
    p.add_argument("--l-off", type=int, default=75)
    p.add_argument("--l-on", type=int, default=4000)
    p.add_argument("--beta-offline", type=float, default=300.0)
    p.add_argument("--beta-online", type=float, default=50.0)
    p.add_argument("--demos", type=int, default=200)
    args = p.parse_args()
    r = experiments.run_desk_o2o(args.seed, args.l_off, args.l_on,
                                 args.beta_offline, args.beta_online, n_demos=args.demos)
    print(json.dumps(r, indent=2))


if __name__ == "__main__":
    main()
