"""End-to-end runs: build data and model from a RunConfig, train, evaluate, write outputs."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import RunConfig, save_config
from .data import PackedDataset, gen_synthetic, load_packed
from .meta import (
    ContinualEval,
    FewShotEval,
    TrainLog,
    meta_test_continual,
    meta_test_fewshot,
    meta_train_continual,
    meta_train_fewshot,
)
from .models import (
    AnmlModel,
    ConvBackboneSpec,
    OmlModel,
    SibModel,
    load_checkpoint,
    pretrain_backbone,
    save_checkpoint,
)

log = logging.getLogger(__name__)

# independent generator streams per stage, all derived from the run seed
STREAM_DATA, STREAM_PRETRAIN, STREAM_INIT, STREAM_TRAIN, STREAM_EVAL = range(5)


def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), which])


def load_dataset(cfg: RunConfig) -> PackedDataset:
    if cfg.data:
        return load_packed(cfg.data)
    ds, _ = gen_synthetic(cfg.synthetic, stream(cfg.seed or 0, STREAM_DATA))
    return ds


def backbone_spec(cfg: RunConfig, image_shape) -> ConvBackboneSpec:
    m = cfg.model
    return ConvBackboneSpec.uniform(tuple(image_shape), m.channels, m.strides)


def build_model(cfg: RunConfig, ds: PackedDataset, backbone: Optional[dict] = None):
    rng = stream(cfg.seed or 0, STREAM_INIT)
    m = cfg.model
    shape = tuple(ds.image_shape)
    if m.variant == "sib":
        return SibModel(backbone_spec(cfg, shape), cfg.aim, cfg.episode.k, rng, backbone, m.tau)
    reduce_dim = m.reduce_dim or None
    if m.variant == "oml":
        return OmlModel(backbone_spec(cfg, shape), cfg.aim, ds.num_classes, rng, reduce_dim, m.mixer)
    if m.variant == "anml":
        nm = ConvBackboneSpec.uniform(shape, m.nm_channels, m.anml_strides)
        p = ConvBackboneSpec.uniform(shape, m.p_channels, m.anml_strides)
        return AnmlModel(nm, p, cfg.aim, ds.num_classes, rng, reduce_dim, m.mixer)
    raise ValueError(f"unknown variant {m.variant!r}")


def pretrain(cfg: RunConfig, ds: PackedDataset) -> tuple[dict, list]:
    train = np.concatenate([ds.indices_of(c) for c in ds.classes("meta_train")])
    spec = backbone_spec(cfg, ds.image_shape)
    t = cfg.train
    return pretrain_backbone(ds.pixels(train), ds.labels[train], spec, t.pretrain_epochs, t.pretrain_step,
                             stream(cfg.seed or 0, STREAM_PRETRAIN), t.pretrain_batch)


@dataclass
class FewShotRun:
    model: SibModel
    log: TrainLog
    result: FewShotEval
    feats: np.ndarray
    pretrain_history: list = field(default_factory=list)


def run_fewshot(cfg: RunConfig, ds: Optional[PackedDataset] = None, backbone: Optional[dict] = None,
                episodes: Optional[int] = None, on_checkpoint=None) -> FewShotRun:
    ds = ds or load_dataset(cfg)
    history = []
    if backbone is None:
        backbone, history = pretrain(cfg, ds)
    model = build_model(cfg, ds, backbone)
    feats = model.encode_slow(ds.pixels())
    tlog = meta_train_fewshot(model, ds, feats, cfg.episode, cfg.train, stream(cfg.seed, STREAM_TRAIN),
                              on_checkpoint=on_checkpoint)
    res = meta_test_fewshot(model, ds, feats, cfg.episode, cfg.train, stream(cfg.seed, STREAM_EVAL),
                            episodes, eval_mode=cfg.eval_mode)
    return FewShotRun(model, tlog, res, feats, history)


@dataclass
class ContinualRun:
    model: object
    log: TrainLog
    evals: list  # ContinualEval per evaluation run


def run_continual(cfg: RunConfig, ds: Optional[PackedDataset] = None, eval_runs: Optional[int] = None,
                  train: bool = True, on_step=None) -> ContinualRun:
    ds = ds or load_dataset(cfg)
    model = build_model(cfg, ds)
    tlog = TrainLog()
    if train:
        tlog = meta_train_continual(model, ds, cfg.train, stream(cfg.seed, STREAM_TRAIN), on_step=on_step)
    evals = evaluate_continual(model, ds, cfg, eval_runs)
    return ContinualRun(model, tlog, evals)


def evaluate_continual(model, ds: PackedDataset, cfg: RunConfig, eval_runs: Optional[int] = None) -> list:
    runs = cfg.train.eval_runs if eval_runs is None else eval_runs
    rng = stream(cfg.seed, STREAM_EVAL)
    return [meta_test_continual(model, ds, cfg.train, rng, eval_mode=cfg.eval_mode) for _ in range(runs)]


# ---------------------------------------------------------------------------
# outputs


def write_curves(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "split", "classes_seen", "accuracy"])
        for step, split, seen, acc in rows:
            w.writerow([step, split, seen, repr(float(acc))])


def write_episodes(path, accs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "accuracy"])
        for i, a in enumerate(accs):
            w.writerow([i, repr(float(a))])


def continual_curve_rows(evals: list) -> list:
    rows = []
    for run, ev in enumerate(evals):
        for i, (tr, te) in enumerate(zip(ev.train_curve, ev.test_curve)):
            rows.append((run, "train", i + 1, tr))
            rows.append((run, "test", i + 1, te))
    return rows


def prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "run.json", cfg)
    return out


def save_model(path, model) -> None:
    save_checkpoint(path, model.state_dict())


def load_model_state(path, model) -> None:
    model.load_state_dict(load_checkpoint(path))


def summary_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))
