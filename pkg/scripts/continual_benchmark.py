"""Continual trend: OML + AIM against OML with an equal-parameter linear layer.

Prints final meta-test train / test accuracy per seed and mixer, the
train-test gap of each model and the per-class activation variance of the
AIM model.
"""

import argparse
import json

from aimlab.benchmarks import CONTINUAL_TREND, continual_trend


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--eval-runs", type=int, default=None)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    overrides = {k: json.loads(v) for k, _, v in (s.partition("=") for s in args.set)}
    res = continual_trend(args.seeds, {**CONTINUAL_TREND, **overrides}, args.eval_runs, verbose=True)
    for mixer in ("aim", "linear"):
        print(f"{mixer:6s} train {res.mean('final_train', mixer):.4f} test {res.mean('final_test', mixer):.4f} "
              f"gap {res.gap(mixer):.4f}")
    margin = res.mean("final_test", "aim") - res.mean("final_test", "linear")
    print(f"aim - linear test accuracy: {100 * margin:+.1f} points ({res.seconds:.0f}s)")
    for seed, table in res.heatmaps.items():
        print(f"seed {seed}: max per-mechanism class variance {table.class_variance().max():.4f}")


if __name__ == "__main__":
    main()
