"""Run configuration: nested dataclasses that round-trip through flat dotted-key JSON."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .aim import AimConfig
from .autodiff import ContractError
from .data import EpisodeSpec, SyntheticSpec


@dataclass
class TrainConfig:
    T: int = 1
    nu_in: float = 3e-3
    nu_out: float = 5e-3
    eps: float = 1e-3
    total_steps: int = 2000
    seed: int = 0
    sg_steps: int = 3
    # few-shot validation / evaluation
    val_every: int = 250
    val_episodes: int = 100
    test_episodes: int = 2000
    # backbone pretraining (few-shot)
    pretrain_epochs: int = 20
    pretrain_step: float = 0.05
    pretrain_batch: int = 16
    # continual trajectories
    classes_per_traj: int = 5
    shots: int = 15
    test_per_class: int = 5
    remember: int = 16
    eval_classes: int = 20
    eval_runs: int = 10

    def __post_init__(self):
        if self.T < 0:
            raise ContractError("T must be >= 0")
        for name in ("nu_in", "nu_out", "eps"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")


@dataclass
class ModelConfig:
    variant: str = "sib"  # sib | oml | anml
    mixer: str = "aim"  # aim | linear (equal-parameter baseline, continual variants)
    image_size: int = 28
    channels: tuple = (16, 16, 16, 16)
    strides: tuple = (2, 2, 2, 2)
    p_channels: tuple = (64, 64, 64)  # ANML prediction network
    nm_channels: tuple = (28, 28, 64)  # ANML neuromodulator; last width must match p_channels[-1]
    anml_strides: tuple = (2, 2, 2)
    reduce_dim: int = 0
    tau: float = 10.0


@dataclass
class RunConfig:
    command: str = ""
    data: str = ""  # path to an AIMD pack; empty means generate synthetic data
    out: str = "runs/latest"
    seed: Optional[int] = None
    eval_mode: str = "hard"
    model: ModelConfig = field(default_factory=ModelConfig)
    aim: AimConfig = field(default_factory=AimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    episode: EpisodeSpec = field(default_factory=EpisodeSpec)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


def fewshot_defaults() -> RunConfig:
    """Desk-scale few-shot setup; M/K/l and step sizes as published for the Conv-4 runs."""
    return RunConfig(
        model=ModelConfig(variant="sib", channels=(16, 16, 16, 16), strides=(2, 2, 2, 2)),
        aim=AimConfig(M=32, K=8, l=2, d=32, d_hidden=64, d_out=64),
        train=TrainConfig(T=1, nu_in=3e-3, nu_out=5e-3, eps=1e-3, total_steps=2000),
        episode=EpisodeSpec(k=5, n=1, q=15),
        synthetic=SyntheticSpec(classes=20, samples_per_class=20, noise_std=0.6, split_sizes=(10, 5, 5)),
    )


def continual_defaults() -> RunConfig:
    """Desk-scale continual setup; M/K/l and step sizes as published for the Omniglot runs."""
    return RunConfig(
        model=ModelConfig(variant="oml", channels=(28,) * 6, strides=(2, 1, 2, 1, 2, 1), reduce_dim=32),
        aim=AimConfig(M=64, K=10, l=2, d=16, d_hidden=32, d_out=32),
        train=TrainConfig(T=1, nu_in=1e-2, nu_out=1e-3, total_steps=2000, shots=15, test_per_class=5),
        synthetic=SyntheticSpec(classes=60, samples_per_class=20, split_sizes=(40, 0, 20)),
    )


DEFAULTS = {"fewshot": fewshot_defaults, "continual": continual_defaults}


def to_flat(cfg, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(to_flat(value, key + "."))
        elif isinstance(value, tuple):
            out[key] = list(value)
        else:
            out[key] = value
    return out


def apply_flat(cfg, flat: dict):
    """Return a copy of ``cfg`` with dotted keys overridden."""
    nested: dict = {}
    for key, value in flat.items():
        head, _, rest = key.partition(".")
        nested.setdefault(head, {})
        if rest:
            nested[head][rest] = value
        else:
            nested[head] = value
    changes = {}
    names = {f.name: f for f in dataclasses.fields(cfg)}
    for head, value in nested.items():
        if head not in names:
            raise ContractError(f"unknown config key {head!r}")
        current = getattr(cfg, head)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ContractError(f"config key {head!r} is a section")
            changes[head] = apply_flat(current, value)
        elif isinstance(current, tuple) or (isinstance(value, list)):
            changes[head] = tuple(value)
        else:
            changes[head] = value
    return dataclasses.replace(cfg, **changes)


def load_config(path, base: Optional[RunConfig] = None) -> RunConfig:
    flat = json.loads(Path(path).read_text())
    return apply_flat(base or RunConfig(), flat)


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(to_flat(cfg), indent=1, sort_keys=True))
