"""Desk-scale trend experiments shared by the acceptance suite and the scripts in ``scripts/``."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .analysis import HeatmapTable, aim_scores, heatmap_accumulate
from .config import RunConfig, apply_flat, continual_defaults, fewshot_defaults
from .runner import load_dataset, pretrain, run_continual, run_fewshot


# Continual regime used by the acceptance suite: clean enough synthetic data for a 6-layer
# backbone to learn within the step budget, and few enough steps that ten runs fit in 45 minutes.
CONTINUAL_TREND = {"train.total_steps": 600, "synthetic.noise_std": 0.2, "train.nu_in": 0.1}


def _with(cfg: RunConfig, overrides: Optional[dict]) -> RunConfig:
    return apply_flat(cfg, overrides) if overrides else cfg


def _seeded(cfg: RunConfig, seed: int) -> RunConfig:
    return dataclasses.replace(cfg, seed=seed, train=dataclasses.replace(cfg.train, seed=seed))


@dataclass
class FewShotTrend:
    accuracy: dict = field(default_factory=dict)  # seed -> meta-test accuracy
    seconds: float = 0.0

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.accuracy.values())))


def fewshot_trend(seeds: Sequence[int] = (0, 1, 2), steps: int = 2000, episodes: int = 1000,
                  overrides: Optional[dict] = None, verbose: bool = False) -> FewShotTrend:
    """Pretrain, meta-train and meta-test the few-shot model once per seed."""
    base = _with(fewshot_defaults(), {"train.total_steps": steps, **(overrides or {})})
    out = FewShotTrend()
    start = time.perf_counter()
    for seed in seeds:
        run = run_fewshot(_seeded(base, seed), episodes=episodes)
        out.accuracy[seed] = run.result.mean
        if verbose:
            print(f"seed {seed}: meta-test accuracy {run.result.mean:.4f} +- {run.result.ci95:.4f}", flush=True)
    out.seconds = time.perf_counter() - start
    return out


@dataclass
class ContinualTrend:
    final_train: dict = field(default_factory=dict)  # (mixer, seed) -> mean final meta-test train accuracy
    final_test: dict = field(default_factory=dict)
    heatmaps: dict = field(default_factory=dict)  # seed -> HeatmapTable of the AIM model
    separation: dict = field(default_factory=dict)  # seed -> active minus inhibited mean score
    seconds: float = 0.0

    def mean(self, which: str, mixer: str) -> float:
        table = getattr(self, which)
        return float(np.mean([v for (m, _), v in table.items() if m == mixer]))

    def gap(self, mixer: str) -> float:
        """|train - test| of the seed-averaged final accuracies."""
        return abs(self.mean("final_train", mixer) - self.mean("final_test", mixer))


def continual_trend(seeds: Sequence[int] = (0, 1, 2, 3, 4), overrides: Optional[dict] = None,
                    eval_runs: Optional[int] = None, mixers=("aim", "linear"),
                    verbose: bool = False) -> ContinualTrend:
    """OML with the AIM layer against OML with an equal-parameter linear layer, same data and seeds."""
    base = _with(continual_defaults(), overrides)
    out = ContinualTrend()
    start = time.perf_counter()
    for seed in seeds:
        cfg = _seeded(base, seed)
        ds = load_dataset(cfg)
        for mixer in mixers:
            mcfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, mixer=mixer))
            run = run_continual(mcfg, ds, eval_runs)
            out.final_train[mixer, seed] = float(np.mean([e.final_train for e in run.evals]))
            out.final_test[mixer, seed] = float(np.mean([e.final_test for e in run.evals]))
            if mixer == "aim":
                out.heatmaps[seed] = heatmap_accumulate(run.model, ds)
                out.separation[seed] = score_separation(aim_scores(run.model, ds.pixels()), cfg.aim.K)
            if verbose:
                print(f"seed {seed} {mixer:6s}: final train {out.final_train[mixer, seed]:.4f} "
                      f"test {out.final_test[mixer, seed]:.4f}", flush=True)
    out.seconds = time.perf_counter() - start
    return out


@dataclass
class SweepTrend:
    accuracy: dict = field(default_factory=dict)  # (l, seed) -> accuracy
    seconds: float = 0.0

    def mean(self, l: int) -> float:
        return float(np.mean([v for (k, _), v in self.accuracy.items() if k == l]))


def l_sweep_trend(values: Sequence[int], seeds: Sequence[int] = (0, 1, 2, 3, 4), steps: int = 1000,
                  episodes: int = 500, overrides: Optional[dict] = None, verbose: bool = False) -> SweepTrend:
    """Few-shot accuracy per stochastic sampling count ``l``; each seed shares one pretrained backbone."""
    base = _with(fewshot_defaults(), {"train.total_steps": steps, **(overrides or {})})
    out = SweepTrend()
    start = time.perf_counter()
    for seed in seeds:
        cfg = _seeded(base, seed)
        ds = load_dataset(cfg)
        backbone, _ = pretrain(cfg, ds)
        for l in values:
            lcfg = dataclasses.replace(cfg, aim=dataclasses.replace(cfg.aim, l=int(l)))
            run = run_fewshot(lcfg, ds, backbone, episodes=episodes)
            out.accuracy[int(l), seed] = run.result.mean
            if verbose:
                print(f"seed {seed} l={l}: {run.result.mean:.4f}", flush=True)
    out.seconds = time.perf_counter() - start
    return out


def score_separation(scores: np.ndarray, K: int) -> float:
    """Mean over samples of (mean top-K score - mean score of the rest)."""
    ranked = -np.sort(-scores, axis=1)
    return float((ranked[:, :K].mean(axis=1) - ranked[:, K:].mean(axis=1)).mean())


def heatmap_variance_ok(table: HeatmapTable, threshold: float = 0.05) -> bool:
    return bool(table.class_variance().max() > threshold)
