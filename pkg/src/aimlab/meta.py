"""Fast/slow meta-learning loops: first-order inner/outer updates, few-shot and continual paths."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .config import TrainConfig
from .data import EpisodeSpec, PackedDataset, sample_episode, sample_trajectory
from .models import ContinualModel, FrameworkModel, SibModel, cache_len, cosine_logits, slice_cache

log = logging.getLogger(__name__)


def inner_adapt(model: FrameworkModel, x, labels, T: int, nu_in: float, rng: np.random.Generator,
                mode: str = "stochastic", cache=None, ids=None, audit: Optional[list] = None,
                shuffle: bool = True) -> list[float]:
    """T passes of batch-size-1 SGD on cross-entropy over the support set, fast weights only.

    ``cache`` skips the slow encoder when the caller already has it.  Every
    sample fed to a gradient computation is appended to ``audit`` (by id).
    """
    labels = np.asarray(labels)
    if cache is None:
        if x is None or len(x) == 0:
            raise ContractError("inner_adapt needs a non-empty support set")
        cache = model.encode_slow(x)
    n = cache_len(cache)
    if n == 0:
        raise ContractError("inner_adapt needs a non-empty support set")
    order = rng.permutation(n) if shuffle else np.arange(n)
    fast = model.tensors("fast")
    opt = ad.SgdOptimizer(nu_in)
    losses = []
    for _ in range(T):
        for i in order:
            with ad.Tape() as tape:
                logits, _ = model.fast_logits(slice_cache(cache, [i]), mode, rng)
                loss = ad.cross_entropy(logits, labels[[i]])
            opt.step(fast, tape.gradients(loss, fast))
            losses.append(loss.item())
            if audit is not None:
                audit.append(None if ids is None else ids[i])
    return losses


def outer_step(model: FrameworkModel, x, labels, nu_out: float, rng=None, mode: str = "stochastic") -> float:
    """First-order slow update: gradient of the query loss at the current (adapted) fast weights."""
    slow = model.tensors("slow")
    with ad.Tape() as tape:
        logits, _ = model.logits(x, mode, rng)
        loss = ad.cross_entropy(logits, labels)
    ad.SgdOptimizer(nu_out).step(slow, tape.gradients(loss, slow))
    return loss.item()


def accuracy(logits: np.ndarray, labels, n_classes: Optional[int] = None) -> float:
    if n_classes is not None:
        logits = logits[:, :n_classes]
    return float((logits.argmax(axis=1) == np.asarray(labels)).mean()) if len(labels) else float("nan")


# ---------------------------------------------------------------------------
# few-shot (Sib)


@dataclass
class EpisodeResult:
    accuracy: float
    loss: float = float("nan")


def fewshot_episode(model: SibModel, feats: np.ndarray, episode, cfg: TrainConfig, rng,
                    train: bool, eval_mode: str = "hard") -> EpisodeResult:
    """One episode: generate phi, adapt fast weights, refine phi transductively, optionally update slow weights."""
    zs = feats[episode.support_idx]
    zq = feats[episode.query_idx]
    phi = model.params["phi"]
    w_avg = model.init_phi(zs, episode.support_y)
    phi0 = phi.data.copy()
    inner_adapt(model, None, episode.support_y, cfg.T, cfg.nu_in, rng, cache=zs)
    delta = phi.data - phi0
    loss = float("nan")
    if train:
        slow = model.tensors("slow")
        with ad.Tape() as tape:
            # first order: the inner trajectory enters as a constant offset
            start = ad.add(ad.mul(ad.broadcast_rows(model.params["theta"], model.ways), Tensor._wrap(w_avg)),
                           Tensor._wrap(delta))
            refined = model.refined_phi(start, zq, cfg.eps, cfg.sg_steps, "stochastic", rng)
            zt, _ = model.features(zq, "stochastic", rng)
            lossT = ad.cross_entropy(cosine_logits(zt, refined, model.params["tau"]), episode.query_y)
        ad.SgdOptimizer(cfg.nu_out).step(slow, tape.gradients(lossT, slow))
        loss = lossT.item()
    else:
        refined = model.refined_phi(Tensor._wrap(phi.data), zq, cfg.eps, cfg.sg_steps, eval_mode, rng)
    phi.data = refined.data.copy()
    logits, _ = model.fast_logits(zq, eval_mode, rng)
    return EpisodeResult(accuracy(logits.data, episode.query_y), loss)


def confidence_interval(accs) -> tuple[float, float]:
    accs = np.asarray(accs, dtype=np.float64)
    if accs.size == 0:
        return float("nan"), float("nan")
    half = 1.96 * accs.std() / math.sqrt(accs.size) if accs.size > 1 else 0.0
    return float(accs.mean()), float(half)


@dataclass
class FewShotEval:
    mean: float
    ci95: float
    accuracies: list


def meta_test_fewshot(model: SibModel, ds: PackedDataset, feats: np.ndarray, spec: EpisodeSpec,
                      cfg: TrainConfig, rng, episodes: Optional[int] = None, split: str = "meta_test",
                      eval_mode: str = "hard") -> FewShotEval:
    """Adapt and evaluate on fresh episodes; the model's fast weights are restored after each one."""
    episodes = cfg.test_episodes if episodes is None else episodes
    keep = model.snapshot("fast")
    accs = []
    for _ in range(episodes):
        ep = sample_episode(ds, spec, split, rng)
        accs.append(fewshot_episode(model, feats, ep, cfg, rng, train=False, eval_mode=eval_mode).accuracy)
        model.restore(keep)
    mean, ci = confidence_interval(accs)
    return FewShotEval(mean, ci, accs)


@dataclass
class TrainLog:
    curves: list = field(default_factory=list)  # (step, split, classes_seen, accuracy)
    losses: list = field(default_factory=list)
    best_step: int = -1
    best_val: float = float("nan")


def meta_train_fewshot(model: SibModel, ds: PackedDataset, feats: np.ndarray, spec: EpisodeSpec,
                       cfg: TrainConfig, rng, on_checkpoint: Optional[Callable] = None) -> TrainLog:
    """Episodic meta-training; the best validation snapshot (if a val split exists) is kept."""
    out = TrainLog()
    val_ok = len(ds.split_manifest.get("meta_val", ())) >= spec.k and cfg.val_episodes > 0
    best_state = None
    for step in range(1, cfg.total_steps + 1):
        ep = sample_episode(ds, spec, "meta_train", rng)
        res = fewshot_episode(model, feats, ep, cfg, rng, train=True)
        out.losses.append(res.loss)
        out.curves.append((step, "train", spec.k, res.accuracy))
        if cfg.val_every and step % cfg.val_every == 0:
            if on_checkpoint is not None:
                on_checkpoint(step, model)
            if val_ok:
                # validation draws from its own stream so it never perturbs training
                vrng = np.random.default_rng([cfg.seed, step])
                ev = meta_test_fewshot(model, ds, feats, spec, cfg, vrng, cfg.val_episodes, "meta_val")
                out.curves.append((step, "val", spec.k, ev.mean))
                if not ev.mean <= out.best_val:
                    out.best_val, out.best_step, best_state = ev.mean, step, model.state_dict()
    if best_state is not None:
        model.load_state_dict(best_state)
    return out


# ---------------------------------------------------------------------------
# continual (Oml / Anml)


def meta_train_continual(model: ContinualModel, ds: PackedDataset, cfg: TrainConfig, rng,
                         on_step: Optional[Callable] = None, audit: Optional[list] = None) -> TrainLog:
    """Sequential-trajectory meta-training with first-order slow updates.

    The outer loss covers the trajectory's held-out samples plus ``cfg.remember``
    samples from meta-train classes seen in earlier steps.
    """
    out = TrainLog()
    pixels = ds.pixels()
    seen: list[int] = []
    seen_set: set = set()
    for step in range(1, cfg.total_steps + 1):
        traj = sample_trajectory(ds, cfg.classes_per_traj, cfg.shots, "meta_train", rng,
                                 test_per_class=cfg.test_per_class)
        model.reset_head_rows(traj.classes, rng)
        for block in traj.blocks:
            inner_adapt(model, pixels[block.support_idx], np.full(block.support_idx.size, block.cls),
                        cfg.T, cfg.nu_in, rng, ids=block.support_idx, audit=audit)
        q_idx = np.concatenate([b.test_idx for b in traj.blocks])
        old = [c for c in seen if c not in traj.classes]
        if old and cfg.remember:
            pool = np.concatenate([ds.indices_of(c) for c in old])
            q_idx = np.concatenate([q_idx, rng.choice(pool, size=min(cfg.remember, pool.size), replace=False)])
        loss = outer_step(model, pixels[q_idx], ds.labels[q_idx].astype(np.int64), cfg.nu_out, rng)
        out.losses.append(loss)
        for c in traj.classes:
            if c not in seen_set:
                seen_set.add(c)
                seen.append(c)
        if on_step is not None:
            on_step(step, model)
    return out


@dataclass
class ContinualEval:
    classes: list
    train_curve: list  # accuracy on accumulated S'_train after each class
    test_curve: list  # accuracy on accumulated S'_test after each class
    audit: list = field(default_factory=list)

    @property
    def final_train(self) -> float:
        return self.train_curve[-1]

    @property
    def final_test(self) -> float:
        return self.test_curve[-1]


def meta_test_continual(model: ContinualModel, ds: PackedDataset, cfg: TrainConfig, rng,
                        n_classes: Optional[int] = None, split: str = "meta_test",
                        eval_mode: str = "hard") -> ContinualEval:
    """Classes arrive one at a time; only fast weights adapt; no stored samples are replayed.

    Labels are assigned by arrival order and predictions are restricted to
    the classes seen so far.  All model tensors are restored afterwards.
    """
    n_classes = cfg.eval_classes if n_classes is None else n_classes
    if n_classes > model.n_classes:
        raise ContractError(f"head has {model.n_classes} outputs, trajectory needs {n_classes}")
    keep = model.state_dict()
    traj = sample_trajectory(ds, n_classes, cfg.shots, split, rng, test_per_class=cfg.test_per_class)
    model.reset_head_rows(np.arange(n_classes), rng)
    # slow weights never change here, so the slow path is computed once per image
    order = np.concatenate([np.concatenate([b.support_idx, b.test_idx]) for b in traj.blocks])
    cache = model.encode_all(ds.pixels(order))
    where = {int(i): j for j, i in enumerate(order)}
    train_pos, train_y, test_pos, test_y = [], [], [], []
    result = ContinualEval(traj.classes, [], [])
    for label, block in enumerate(traj.blocks):
        train_pos.append([where[int(i)] for i in block.support_idx])
        train_y.append(np.full(block.support_idx.size, label))
        test_pos.append([where[int(i)] for i in block.test_idx])
        test_y.append(np.full(block.test_idx.size, label))
        inner_adapt(model, None, train_y[-1], cfg.T, cfg.nu_in, rng, mode=eval_mode,
                    cache=slice_cache(cache, np.asarray(train_pos[-1])), ids=block.support_idx,
                    audit=result.audit)
        seen = label + 1
        tr, te = np.concatenate(train_pos), np.concatenate(test_pos)
        result.train_curve.append(
            accuracy(model.predict_cached(slice_cache(cache, tr), eval_mode, rng=rng), np.concatenate(train_y), seen))
        result.test_curve.append(
            accuracy(model.predict_cached(slice_cache(cache, te), eval_mode, rng=rng), np.concatenate(test_y), seen))
    model.load_state_dict(keep)
    return result
