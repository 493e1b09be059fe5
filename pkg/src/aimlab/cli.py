"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flag, missing file).
Configuration is resolved as preset defaults < ``--config`` file < ``--set`` and flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, gradcheck, runner
from .aim import SELECTION_MODES
from .config import DEFAULTS, RunConfig, apply_flat
from .data import gen_synthetic, save_packed
from .models import load_checkpoint, save_checkpoint

log = logging.getLogger("aimlab")

TRAIN_COMMANDS = ("pretrain", "train-fewshot", "train-continual")


class UsageError(Exception):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {p}")
    return p


def resolve_config(args) -> RunConfig:
    preset = getattr(args, "preset", None)
    if preset is None:
        preset = "fewshot" if args.command in ("pretrain", "train-fewshot", "eval-fewshot") else "continual"
    cfg = DEFAULTS[preset]()
    source = getattr(args, "checkpoint", None) or getattr(args, "checkpoints", None)
    if source and not args.config:
        echo = Path(source).parent / "run.json"
        if echo.exists():
            cfg = apply_flat(cfg, json.loads(echo.read_text()))
    if args.config:
        cfg = apply_flat(cfg, json.loads(_existing(args.config).read_text()))
    flat = {}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        flat[key] = _parse_value(value)
    for key, attr in (("data", "data"), ("out", "out"), ("seed", "seed"), ("model.mixer", "mixer"),
                      ("model.variant", "variant"), ("train.total_steps", "steps")):
        value = getattr(args, attr, None)
        if value is not None:
            flat[key] = value
    if args.out is None and source:
        # never overwrite the training run's own outputs
        flat["out"] = str(Path(source).parent / args.command)
    if getattr(args, "selection_mode", None):
        flat["eval_mode"] = args.selection_mode
    flat["command"] = args.command
    cfg = apply_flat(cfg, flat)
    if cfg.seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=cfg.seed))
    if cfg.data:
        _existing(cfg.data)
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(cfg: RunConfig, args) -> int:
    out = runner.prepare_out(cfg)
    ds = runner.load_dataset(cfg)
    backbone, history = runner.pretrain(cfg, ds)
    save_checkpoint(out / "backbone.aimc", {n: t.data for n, t in backbone.items()})
    runner.write_curves(out / "curves.csv", [(i + 1, "pretrain", len(ds.classes("meta_train")), a)
                                             for i, a in enumerate(history)])
    print(f"pretrain accuracy after {len(history)} epochs: {history[-1]:.4f}" if history else "no epochs")
    return 0


def _backbone_from(path) -> dict:
    from .autodiff import Tensor

    return {n: Tensor(a, requires_grad=False, name=n) for n, a in load_checkpoint(_existing(path)).items()}


def cmd_train_fewshot(cfg: RunConfig, args) -> int:
    out = runner.prepare_out(cfg)
    ds = runner.load_dataset(cfg)
    backbone = _backbone_from(args.backbone) if args.backbone else None
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    def on_checkpoint(step, model):
        runner.save_model(ckpt_dir / f"step{step:06d}.aimc", model)

    run = runner.run_fewshot(cfg, ds, backbone, on_checkpoint=on_checkpoint)
    runner.save_model(out / "model.aimc", run.model)
    runner.write_curves(out / "curves.csv", run.log.curves)
    runner.write_episodes(out / "episodes.csv", run.result.accuracies)
    runner.summary_json(out / "summary.json", {"accuracy": run.result.mean, "ci95": run.result.ci95,
                                               "best_step": run.log.best_step})
    print(f"meta-test accuracy {run.result.mean:.4f} +- {run.result.ci95:.4f}")
    return 0


def _continual_summary(evals) -> dict:
    return {
        "final_train": float(np.mean([e.final_train for e in evals])),
        "final_test": float(np.mean([e.final_test for e in evals])),
    }


def cmd_train_continual(cfg: RunConfig, args) -> int:
    out = runner.prepare_out(cfg)
    ds = runner.load_dataset(cfg)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    every = cfg.train.val_every

    def on_step(step, model):
        if every and step % every == 0:
            runner.save_model(ckpt_dir / f"step{step:06d}.aimc", model)

    run = runner.run_continual(cfg, ds, on_step=on_step)
    runner.save_model(out / "model.aimc", run.model)
    runner.write_curves(out / "curves.csv", runner.continual_curve_rows(run.evals))
    summary = _continual_summary(run.evals)
    runner.summary_json(out / "summary.json", summary)
    print(f"meta-test train {summary['final_train']:.4f} test {summary['final_test']:.4f}")
    return 0


def _model_from_checkpoint(cfg: RunConfig, path):
    ds = runner.load_dataset(cfg)
    model = runner.build_model(cfg, ds)
    runner.load_model_state(_existing(path), model)
    return ds, model


def cmd_eval_fewshot(cfg: RunConfig, args) -> int:
    from .meta import meta_test_fewshot

    out = runner.prepare_out(cfg)
    ds, model = _model_from_checkpoint(cfg, args.checkpoint)
    feats = model.encode_slow(ds.pixels())
    res = meta_test_fewshot(model, ds, feats, cfg.episode, cfg.train, runner.stream(cfg.seed or 0, runner.STREAM_EVAL),
                            args.episodes, eval_mode=cfg.eval_mode)
    runner.write_episodes(out / "episodes.csv", res.accuracies)
    print(f"meta-test accuracy ({cfg.eval_mode}) {res.mean:.4f} +- {res.ci95:.4f}")
    return 0


def cmd_eval_continual(cfg: RunConfig, args) -> int:
    out = runner.prepare_out(cfg)
    ds, model = _model_from_checkpoint(cfg, args.checkpoint)
    evals = runner.evaluate_continual(model, ds, cfg, args.runs)
    runner.write_curves(out / "curves.csv", runner.continual_curve_rows(evals))
    summary = _continual_summary(evals)
    print(f"meta-test ({cfg.eval_mode}) train {summary['final_train']:.4f} test {summary['final_test']:.4f}")
    return 0


def cmd_heatmap(cfg: RunConfig, args) -> int:
    out = runner.prepare_out(cfg)
    ds, model = _model_from_checkpoint(cfg, args.checkpoint)
    table = analysis.heatmap_accumulate(model, ds, args.split)
    table.to_csv(out / "heatmap.csv")
    idx = np.concatenate([ds.indices_of(c) for c in ds.classes(args.split)])
    x = ds.pixels(idx)
    analysis.write_mask_csv(out / "masks.csv", idx, ds.labels[idx], analysis.aim_masks(model, x))
    analysis.write_mask_csv(out / "scores.csv", idx, ds.labels[idx], analysis.aim_scores(model, x))
    print(f"{len(table.classes)} classes, max per-mechanism variance {table.class_variance().max():.4f}")
    return 0


def cmd_trace(cfg: RunConfig, args) -> int:
    out = runner.prepare_out(cfg)
    ds = runner.load_dataset(cfg)
    model = runner.build_model(cfg, ds)
    paths = sorted(Path(_existing(args.checkpoints)).glob("*.aimc"))
    if not paths:
        raise UsageError(f"no checkpoints in {args.checkpoints}")
    rng = runner.stream(cfg.seed or 0, runner.STREAM_EVAL)
    probes = np.sort(rng.choice(len(ds.labels), size=min(args.probes, len(ds.labels)), replace=False))
    rows = analysis.attention_trace(model, list(enumerate(paths)), ds, probes)
    analysis.write_trace_csv(out / "trace.csv", rows)
    print(f"{len(rows)} trace rows from {len(paths)} checkpoints")
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    out = runner.prepare_out(cfg)
    values = [int(v) for v in args.values.split(",") if v.strip()]
    table = analysis.sweep(args.param, values, cfg)
    table.to_csv(out / "sweep.csv")
    for v, reason in table.skipped:
        print(f"skipped {args.param}={v}: {reason}", file=sys.stderr)
    for v, a in zip(table.values, table.accuracy):
        print(f"{args.param}={v} accuracy {a:.4f}")
    return 0


def cmd_gen_synthetic(cfg: RunConfig, args) -> int:
    spec = dataclasses.replace(cfg.synthetic, classes=args.classes, samples_per_class=args.samples_per_class,
                               image_size=args.image_size, noise_std=args.noise, split_sizes=None)
    ds, _ = gen_synthetic(spec, np.random.default_rng(args.seed or 0))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_packed(args.out, ds)
    print(f"wrote {len(ds.labels)} images of {spec.classes} classes to {args.out}")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    failed = 0
    for res in gradcheck.run_suite(points=args.points, seed=args.seed or 0):
        status = "ok" if res.ok else "FAIL"
        failed += not res.ok
        print(f"{res.name:22s} max rel err {res.worst:.3e}  {status}")
    return 1 if failed else 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train-fewshot": cmd_train_fewshot,
    "train-continual": cmd_train_continual,
    "eval-fewshot": cmd_eval_fewshot,
    "eval-continual": cmd_eval_continual,
    "heatmap": cmd_heatmap,
    "trace": cmd_trace,
    "sweep": cmd_sweep,
    "gen-synthetic": cmd_gen_synthetic,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aimlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat dotted-key JSON config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--preset", choices=sorted(DEFAULTS))
        p.add_argument("--data", help="AIMD pack (default: synthetic data from the config)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, required=name in TRAIN_COMMANDS)
        return p

    add("pretrain", "supervised backbone pretraining for the few-shot model")
    p = add("train-fewshot", "episodic meta-training and meta-test of the few-shot model")
    p.add_argument("--backbone", help="pretrained backbone checkpoint")
    p.add_argument("--steps", type=int)
    p = add("train-continual", "trajectory meta-training and meta-test of OML / ANML")
    p.add_argument("--variant", choices=("oml", "anml"))
    p.add_argument("--mixer", choices=("aim", "linear"))
    p.add_argument("--steps", type=int)
    for name, extra in (("eval-fewshot", "--episodes"), ("eval-continual", "--runs")):
        p = add(name, f"meta-test a saved {name.split('-')[1]} model")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--selection-mode", choices=SELECTION_MODES)
        p.add_argument(extra, type=int)
    p = add("heatmap", "per-class mechanism activation table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="meta_test")
    p = add("trace", "input-slot scores of probe samples across a checkpoint series")
    p.add_argument("--checkpoints", required=True, help="directory of .aimc files, ordered by name")
    p.add_argument("--probes", type=int, default=8)
    p = add("sweep", "train + evaluate once per value of K or l")
    p.add_argument("--param", choices=("K", "l"), required=True)
    p.add_argument("--values", required=True, help="comma separated")
    p = add("gen-synthetic", "write a synthetic AIMD pack")
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--samples-per-class", type=int, default=20)
    p.add_argument("--image-size", type=int, default=28)
    p.add_argument("--noise", type=float, default=0.1)
    p = add("gradcheck", "finite-difference audit of every primitive and model")
    p.add_argument("--points", type=int, default=10)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "gen-synthetic" and args.out is None:
        parser.error("gen-synthetic needs --out")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"aimlab {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report and exit 1
        log.debug("failure", exc_info=True)
        print(f"aimlab {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
