"""Few-shot accuracy as a function of the stochastic sampling count l."""

import argparse
import json

from aimlab.benchmarks import l_sweep_trend
from aimlab.config import fewshot_defaults


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    cfg = fewshot_defaults()
    ap.add_argument("--values", type=int, nargs="+", default=[0, 2, cfg.aim.M - cfg.aim.K])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--episodes", type=int, default=500)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    overrides = {k: json.loads(v) for k, _, v in (s.partition("=") for s in args.set)}
    res = l_sweep_trend(args.values, args.seeds, args.steps, args.episodes, overrides, verbose=True)
    for l in args.values:
        print(f"l={l:3d} mean accuracy {res.mean(l):.4f}")
    print(f"{res.seconds:.0f}s")


if __name__ == "__main__":
    main()
