"""Sweep the invariance weight on synthetic data through the command line.

Thin wrapper around ``tprl synth`` + ``tprl sweep`` that prints the mean
target accuracy per value. Extra --set overrides are passed through.

    python3 scripts/sweep_reward_weights.py --values 0,0.25,0.5,1 --jobs 1 --set ppo.rounds=10
"""
import argparse
import csv
import sys
from collections import defaultdict
from pathlib import Path

from tprl import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--axis", default="w_inv", choices=sorted(cli.SWEEP_AXES))
    ap.add_argument("--values", default="0,0.25,0.5,1")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="runs")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    args = ap.parse_args()

    sets = [x for kv in args.set + [f"run.out={args.out}"] for x in ("--set", kv)]
    for argv in (["synth"] + sets, ["sweep", args.axis, args.values, "--jobs", str(args.jobs)] + sets):
        code = cli.main(argv)
        if code:
            sys.exit(code)
    path = max(Path(args.out).glob(f"sweep-{args.axis}-*/sweep.csv"), key=lambda p: p.stat().st_mtime)
    accs = defaultdict(list)
    for row in csv.DictReader(open(path)):
        accs[row["value"]].append(float(row["accuracy"]))
    for value, a in accs.items():
        print(f"{args.axis}={value}: mean accuracy {100 * sum(a) / len(a):.2f}% over {len(a)} plans")


if __name__ == "__main__":
    main()
