"""Few-shot trend: 5-way 1-shot meta-test accuracy of the AIM few-shot model on synthetic data."""

import argparse
import json

from aimlab.benchmarks import fewshot_trend


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--episodes", type=int, default=1000)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    overrides = {k: json.loads(v) for k, _, v in (s.partition("=") for s in args.set)}
    res = fewshot_trend(args.seeds, args.steps, args.episodes, overrides, verbose=True)
    print(f"mean accuracy {res.mean:.4f} over {len(args.seeds)} seeds ({res.seconds:.0f}s); chance 0.2")


if __name__ == "__main__":
    main()
