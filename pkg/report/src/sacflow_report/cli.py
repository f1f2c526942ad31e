"""Command line for rendering figures from run directories.

    sacflow-report curves --runs RUN [RUN ...] --metric episode_return \
        [--smooth W] --out curve.png
    sacflow-report bars --runs RUN [RUN ...] [--steps LO:HI] \
        [--source gradnorms|metrics] --out bars.png
"""

from __future__ import annotations

import argparse
import sys

from .plots import PlotJob, render_gradnorm_bars, render_learning_curve


def _parse_steps(spec: str | None):
    if not spec:
        return None
    lo, hi = spec.split(":")
    return (float(lo), float(hi))


def main(argv: list[str]) -> int:
    p = argparse.ArgumentParser(prog="sacflow-report", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    pc = sub.add_parser("curves")
    pc.add_argument("--runs", nargs="+", required=True)
    pc.add_argument("--metric", default="episode_return")
    pc.add_argument("--smooth", type=int, default=1)
    pc.add_argument("--out", default="curve.png")
    pc.add_argument("--title", default="")
    pb = sub.add_parser("bars")
    pb.add_argument("--runs", nargs="+", required=True)
    pb.add_argument("--steps", default=None, help="inclusive step range LO:HI")
    pb.add_argument("--source", choices=("gradnorms", "metrics"), default="gradnorms")
    pb.add_argument("--out", default="bars.png")
    pb.add_argument("--title", default="")
    args = p.parse_args(argv)
    try:
        if args.command == "curves":
            job = PlotJob(args.runs, metric=args.metric, smoothing=args.smooth,
                          out_path=args.out, title=args.title)
            out = render_learning_curve(job)
        else:
            job = PlotJob(args.runs, out_path=args.out, step_range=_parse_steps(args.steps),
                          source=args.source, title=args.title)
            out = render_gradnorm_bars(job)
    except (KeyError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(out)
    return 0


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
