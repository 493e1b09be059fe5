"""Attentive independent mechanisms: cross-attention routing over M experts.

Each mechanism m owns a hidden state ``h[m]``, a query map ``Wq[m]`` and a
value map ``Wm[m]``.  Mechanisms score the input against a zero "null" slot
with a two-way softmax; the input-slot probability decides which mechanisms
join the weighted sum that produces the layer output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor

SELECTION_MODES = ("hard", "stochastic", "soft")


@dataclass
class AimConfig:
    M: int = 32
    K: int = 8
    l: int = 2
    d: int = 128
    d_hidden: int = 256
    d_out: int = 400
    selection_mode: str = "stochastic"
    soft_threshold: float = 0.5

    def __post_init__(self):
        if self.M < 1:
            raise ContractError(f"M must be positive, got {self.M}")
        if self.selection_mode not in SELECTION_MODES:
            raise ContractError(f"unknown selection mode {self.selection_mode!r}")
        if self.selection_mode != "soft":
            if not 1 <= self.K <= self.M:
                raise ContractError(f"need 1 <= K <= M, got K={self.K}, M={self.M}")
            if not 0 <= self.l <= self.M - self.K:
                raise ContractError(f"need 0 <= l <= M-K, got l={self.l}")
        if not 0.0 <= self.soft_threshold < 1.0:
            raise ContractError("soft_threshold must lie in [0, 1)")


@dataclass
class AimParams:
    h: Tensor  # [M, d_hidden]
    Wq: Tensor  # [M, d_hidden, d]
    Wk: Tensor  # [D, d]
    Wm: Tensor  # [M, D, d_out]
    null_vec: np.ndarray = field(repr=False, default=None)  # [D], fixed zeros

    def __post_init__(self):
        M = self.h.shape[0]
        if self.Wq.shape[0] != M or self.Wm.shape[0] != M:
            raise DimensionError(
                f"mechanism counts disagree: h {self.h.shape}, Wq {self.Wq.shape}, Wm {self.Wm.shape}"
            )
        if self.null_vec is None:
            self.null_vec = np.zeros(self.Wk.shape[0])

    @property
    def M(self) -> int:
        return self.h.shape[0]

    @property
    def D(self) -> int:
        return self.Wk.shape[0]

    @property
    def d(self) -> int:
        return self.Wk.shape[1]

    def named(self, prefix: str = "aim") -> dict[str, Tensor]:
        return {f"{prefix}.h": self.h, f"{prefix}.Wq": self.Wq, f"{prefix}.Wk": self.Wk, f"{prefix}.Wm": self.Wm}

    def permuted(self, perm) -> "AimParams":
        perm = np.asarray(perm)
        return AimParams(
            h=ad.parameter(self.h.data[perm]),
            Wq=ad.parameter(self.Wq.data[perm]),
            Wk=ad.parameter(self.Wk.data.copy()),
            Wm=ad.parameter(self.Wm.data[perm]),
        )


def init_aim_params(config: AimConfig, D: int, rng: np.random.Generator) -> AimParams:
    """Uniform init scaled by 1/sqrt(fan_in)."""

    def uni(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    M, dh, d, do = config.M, config.d_hidden, config.d, config.d_out
    return AimParams(
        h=ad.parameter(uni((M, dh), dh), "aim.h"),
        Wq=ad.parameter(uni((M, dh, d), dh), "aim.Wq"),
        Wk=ad.parameter(uni((D, d), D), "aim.Wk"),
        Wm=ad.parameter(uni((M, D, do), D), "aim.Wm"),
    )


@dataclass
class SelectionMask:
    active: np.ndarray  # bool [M] (or [N, M] for a batch)
    weights: np.ndarray  # float, zero where inactive

    @property
    def count(self):
        return self.active.sum(axis=-1)

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.active)


def _attend_batch(z: Tensor, params: AimParams) -> tuple[Tensor, Tensor]:
    if z.shape[-1] != params.D:
        raise DimensionError(f"input dimension {z.shape[-1]} != key input dimension {params.D}")
    n = z.shape[0]
    queries = ad.einsum("mh,mhe->me", params.h, params.Wq)  # [M, d]
    null = Tensor._wrap(params.null_vec[None, :])
    keys_in = ad.matmul(z, params.Wk)  # [N, d]
    keys_null = ad.matmul(null, params.Wk)  # [1, d]
    qT = ad.transpose(queries)
    inv = 1.0 / math.sqrt(params.d)
    logit_in = ad.scale(ad.matmul(keys_in, qT), inv)  # [N, M]
    logit_null = ad.broadcast_rows(ad.reshape(ad.scale(ad.matmul(keys_null, qT), inv), (-1,)), n)
    pairs = ad.softmax(ad.stack([logit_in, logit_null], axis=2), axis=2)  # [N, M, 2]
    scores = ad.take(pairs, 0, axis=2)
    return scores, pairs


def attend(z: Tensor, params: AimParams) -> tuple[Tensor, Tensor]:
    """Input-slot scores [M] and per-mechanism slot probabilities [M, 2].

    Accepts a batch [N, D] too, returning [N, M] and [N, M, 2].
    """
    if z.ndim == 1:
        scores, pairs = _attend_batch(ad.reshape(z, (1, -1)), params)
        return ad.reshape(scores, (-1,)), ad.reshape(pairs, pairs.shape[1:])
    return _attend_batch(z, params)


def _values(scores) -> np.ndarray:
    return scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)


def _rank(s: np.ndarray) -> np.ndarray:
    # stable sort of the negated scores: ties resolve to the lower index
    return np.argsort(-s, axis=-1, kind="stable")


def _mask_from(s: np.ndarray, chosen: np.ndarray) -> SelectionMask:
    active = np.zeros(s.shape, dtype=bool)
    np.put_along_axis(active, chosen, True, axis=-1)
    return SelectionMask(active=active, weights=np.where(active, s, 0.0))


def select_hard(scores, K: int) -> SelectionMask:
    s = _values(scores)
    M = s.shape[-1]
    if not 1 <= K <= M:
        raise ContractError(f"K={K} outside [1, {M}]")
    return _mask_from(s, _rank(s)[..., :K])


def select_stochastic(scores, K: int, l: int, rng: np.random.Generator) -> SelectionMask:
    """Sample K of the top K+l mechanisms uniformly without replacement."""
    s = _values(scores)
    M = s.shape[-1]
    if not 1 <= K <= M or l < 0 or K + l > M:
        raise ContractError(f"need 1 <= K and K+l <= M, got K={K}, l={l}, M={M}")
    if l == 0:
        return select_hard(s, K)
    top = _rank(s)[..., : K + l]
    rows = top.reshape(-1, K + l)
    # ordering by iid uniform keys is a uniform permutation, so its first K form a uniform K-subset
    pick = np.argsort(rng.random(rows.shape), axis=1)[:, :K]
    rows = np.take_along_axis(rows, pick, axis=1)
    return _mask_from(s, rows[:, :K].reshape(top.shape[:-1] + (K,)))


def select_soft(pairs, threshold: float = 0.5) -> SelectionMask:
    """Every mechanism whose input-slot score strictly exceeds ``threshold``."""
    p = _values(pairs)
    s = p[..., 0]
    active = s > threshold
    return SelectionMask(active=active, weights=np.where(active, s, 0.0))


def select(scores: Tensor, pairs: Tensor, config: AimConfig, mode: Optional[str] = None,
           rng: Optional[np.random.Generator] = None) -> SelectionMask:
    mode = mode or config.selection_mode
    if mode == "hard":
        return select_hard(scores, config.K)
    if mode == "stochastic":
        if rng is None:
            raise ContractError("stochastic selection needs a seeded generator")
        return select_stochastic(scores, config.K, config.l, rng)
    if mode == "soft":
        return select_soft(pairs, config.soft_threshold)
    raise ContractError(f"unknown selection mode {mode!r}")


def _mix(z2: Tensor, scores2: Tensor, active2: np.ndarray, params: AimParams) -> Tensor:
    gate = Tensor._wrap(active2.astype(np.float64))
    w = ad.mul(scores2, gate)
    return ad.sparse_mix(z2, w, params.Wm)


def aim_forward(z: Tensor, mask: SelectionMask, params: AimParams) -> Tensor:
    """Weighted sum of the active mechanisms' value maps applied to ``z``.

    Scores are recomputed on the tape so gradients reach h, Wq and Wk
    through the retained weights; ``mask`` only fixes which mechanisms count.
    """
    single = z.ndim == 1
    z2 = ad.reshape(z, (1, -1)) if single else z
    if z2.shape[1] != params.D:
        raise DimensionError(f"input dimension {z2.shape[1]} != {params.D}")
    scores, _ = _attend_batch(z2, params)
    active = mask.active.reshape(scores.shape)
    out = _mix(z2, scores, active, params)
    return ad.reshape(out, (-1,)) if single else out


def aim_layer(z: Tensor, params: AimParams, config: AimConfig, mode: Optional[str] = None,
              rng: Optional[np.random.Generator] = None,
              mask: Optional[SelectionMask] = None) -> tuple[Tensor, SelectionMask]:
    """Score, select and mix in one pass.  ``z`` is [N, D]; selection is per row.

    Passing ``mask`` pins the selection (used by gradient checks).
    """
    if z.ndim != 2:
        raise DimensionError(f"aim_layer expects a batch [N, D], got {z.shape}")
    scores, pairs = _attend_batch(z, params)
    if mask is None:
        mask = select(scores, pairs, config, mode, rng)
    out = _mix(z, scores, mask.active.reshape(scores.shape), params)
    return out, mask


def activation_mask(z, params: AimParams, config: AimConfig) -> np.ndarray:
    """Deterministic top-K mask (no slack) for analysis.  Never records on a tape."""
    zt = z if isinstance(z, Tensor) else Tensor._wrap(np.asarray(z, dtype=np.float64))
    scores, _ = attend(zt.detach(), _frozen(params))
    return select_hard(scores, config.K).active


def _frozen(params: AimParams) -> AimParams:
    return AimParams(
        h=params.h.detach(), Wq=params.Wq.detach(), Wk=params.Wk.detach(),
        Wm=params.Wm.detach(), null_vec=params.null_vec,
    )
