"""Analysis artifacts: per-class activation heatmaps, score traces across checkpoints, K / l sweeps."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .aim import activation_mask, attend
from .autodiff import ContractError, Tensor
from .config import RunConfig
from .data import PackedDataset
from .models import CheckpointError, load_checkpoint

log = logging.getLogger(__name__)


def _require_aim(model) -> None:
    if getattr(model, "mixer", "aim") != "aim":
        raise ContractError("model has no AIM layer (linear mixer)")


def aim_scores(model, x: np.ndarray, batch: int = 256) -> np.ndarray:
    """Input-slot scores [N, M] for images ``x``."""
    _require_aim(model)
    out = []
    for s in range(0, len(x), batch):
        z = model.aim_input(x[s : s + batch])
        scores, _ = attend(Tensor._wrap(z), model.aim)
        out.append(scores.data)
    return np.concatenate(out, axis=0)


def aim_masks(model, x: np.ndarray, batch: int = 256) -> np.ndarray:
    """Hard top-K activation masks [N, M] (boolean) for images ``x``."""
    _require_aim(model)
    out = [activation_mask(model.aim_input(x[s : s + batch]), model.aim, model.aim_cfg)
           for s in range(0, len(x), batch)]
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# heatmap


@dataclass
class HeatmapTable:
    classes: np.ndarray  # [C] class ids, one per row
    values: np.ndarray  # [C, M] mean activation frequency
    counts: np.ndarray  # [C] samples per row
    K: int

    def row_sums(self) -> np.ndarray:
        return self.values.sum(axis=1)

    def class_variance(self) -> np.ndarray:
        """Per-mechanism variance of the activation frequency across classes."""
        return self.values.var(axis=0)

    def to_csv(self, path) -> None:
        M = self.values.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class_id", "samples"] + [f"m{i}" for i in range(M)])
            for c, n, row in zip(self.classes, self.counts, self.values):
                w.writerow([int(c), int(n)] + [repr(float(v)) for v in row])


def heatmap_accumulate(model, ds: PackedDataset, split: str = "meta_test",
                       classes: Optional[Sequence[int]] = None) -> HeatmapTable:
    """Mean hard-selection activation per class over every sample of that class."""
    wanted = ds.classes(split) if classes is None else np.asarray(classes)
    rows, kept, counts = [], [], []
    for c in wanted:
        idx = ds.indices_of(c)
        if idx.size == 0:
            log.warning("class %s has no samples; row omitted", int(c))
            continue
        masks = aim_masks(model, ds.pixels(idx))
        rows.append(masks.mean(axis=0))
        kept.append(int(c))
        counts.append(idx.size)
    M = model.aim_cfg.M
    values = np.array(rows).reshape(len(rows), M)
    return HeatmapTable(np.array(kept, dtype=np.int64), values, np.array(counts), model.aim_cfg.K)


def write_mask_csv(path, sample_ids, class_ids, table: np.ndarray) -> None:
    """One row per sample: ``sample_id, class_id, m0..m{M-1}``."""
    M = table.shape[1]
    integral = table.dtype == bool
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "class_id"] + [f"m{i}" for i in range(M)])
        for sid, cid, row in zip(sample_ids, class_ids, table):
            vals = [int(v) for v in row] if integral else [repr(float(v)) for v in row]
            w.writerow([int(sid), int(cid)] + vals)


# ---------------------------------------------------------------------------
# attention trace


@dataclass
class TraceRow:
    epoch: int
    sample_id: int
    mechanism: int
    score: float


def attention_trace(model, checkpoints: Sequence[tuple[int, str]], ds: PackedDataset,
                    probe_ids: Sequence[int]) -> list[TraceRow]:
    """Input-slot scores of ``probe_ids`` under each (epoch, checkpoint path).

    The model's own state is restored afterwards.  Missing or unreadable
    checkpoints are skipped with a warning.
    """
    probe_ids = np.asarray(probe_ids, dtype=np.int64)
    x = ds.pixels(probe_ids)
    keep = model.state_dict()
    rows: list[TraceRow] = []
    try:
        for epoch, path in checkpoints:
            if not Path(path).exists():
                log.warning("checkpoint %s missing; skipped", path)
                continue
            try:
                model.load_state_dict(load_checkpoint(path))
            except (CheckpointError, ContractError, ValueError) as exc:
                log.warning("checkpoint %s unreadable (%s); skipped", path, exc)
                continue
            scores = aim_scores(model, x)
            for sid, row in zip(probe_ids, scores):
                rows.extend(TraceRow(int(epoch), int(sid), m, float(v)) for m, v in enumerate(row))
    finally:
        model.load_state_dict(keep)
    return rows


def trace_separation(rows: Sequence[TraceRow], K: int, epoch: Optional[int] = None) -> float:
    """Mean score of each sample's top-K mechanisms minus the mean of the rest, at one epoch."""
    epoch = max(r.epoch for r in rows) if epoch is None else epoch
    by_sample: dict[int, dict[int, float]] = {}
    for r in rows:
        if r.epoch == epoch:
            by_sample.setdefault(r.sample_id, {})[r.mechanism] = r.score
    gaps = []
    for scores in by_sample.values():
        s = np.array([scores[m] for m in sorted(scores)])
        top = np.sort(s)[::-1]
        gaps.append(top[:K].mean() - top[K:].mean())
    return float(np.mean(gaps))


def write_trace_csv(path, rows: Sequence[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "sample_id", "mechanism", "score"])
        for r in rows:
            w.writerow([r.epoch, r.sample_id, r.mechanism, repr(r.score)])


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepTable:
    param: str
    values: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    ci95: list = field(default_factory=list)
    skipped: list = field(default_factory=list)  # (value, reason)

    def zero_meaned(self) -> list:
        if not self.accuracy:
            return []
        mean = float(np.mean(self.accuracy))
        return [a - mean for a in self.accuracy]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([self.param, "accuracy", "ci95", "accuracy_zero_mean"])
            for v, a, c, z in zip(self.values, self.accuracy, self.ci95, self.zero_meaned()):
                w.writerow([v, repr(float(a)), repr(float(c)), repr(float(z))])


def default_evaluate(cfg: RunConfig) -> tuple[float, float]:
    """Full train + eval for one config; returns (accuracy, ci95)."""
    from .meta import confidence_interval
    from .runner import run_continual, run_fewshot

    if cfg.model.variant == "sib":
        res = run_fewshot(cfg).result
        return res.mean, res.ci95
    run = run_continual(cfg)
    return confidence_interval([e.final_test for e in run.evals])


def sweep(param: str, values: Sequence[int], base: RunConfig,
          evaluate: Callable[[RunConfig], tuple[float, float]] = default_evaluate) -> SweepTable:
    """One run per value of ``param`` (``K`` or ``l``), everything else shared, including the seed."""
    if param not in ("K", "l"):
        raise ContractError(f"sweep parameter must be K or l, got {param!r}")
    table = SweepTable(param)
    for v in values:
        try:
            aim = dataclasses.replace(base.aim, **{param: int(v)})
        except (ContractError, ValueError) as exc:
            log.warning("skipping %s=%s: %s", param, v, exc)
            table.skipped.append((v, str(exc)))
            continue
        acc, ci = evaluate(dataclasses.replace(base, aim=aim))
        table.values.append(int(v))
        table.accuracy.append(float(acc))
        table.ci95.append(float(ci))
    return table
