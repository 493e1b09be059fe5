"""Backbones, heads and the three framework variants (Sib, Oml, Anml).

Every model keeps its tensors in a flat ``params`` dict keyed by dotted
names and declares a :class:`FastSlowPartition` over those names.  Models
split their forward pass in two: ``encode_slow`` runs everything that the
inner loop cannot change (no tape), and ``fast_logits`` runs the rest on
the tape from that cache.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .aim import AimConfig, AimParams, SelectionMask, aim_layer, init_aim_params
from .autodiff import ContractError, DimensionError, Tensor

log = logging.getLogger(__name__)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# partitions


@dataclass
class FastSlowPartition:
    fast: tuple = ()
    slow: tuple = ()
    frozen: tuple = ()

    def check(self, names: Sequence[str]) -> None:
        groups = [set(self.fast), set(self.slow), set(self.frozen)]
        for i in range(3):
            for j in range(i + 1, 3):
                overlap = groups[i] & groups[j]
                if overlap:
                    raise ContractError(f"parameters in two partitions: {sorted(overlap)}")
        covered = groups[0] | groups[1] | groups[2]
        names = set(names)
        if covered != names:
            raise ContractError(
                f"partition mismatch: uncovered {sorted(names - covered)}, unknown {sorted(covered - names)}"
            )

    def group_of(self, name: str) -> str:
        for label in ("fast", "slow", "frozen"):
            if name in getattr(self, label):
                return label
        raise KeyError(name)


# ---------------------------------------------------------------------------
# conv backbone


@dataclass
class ConvLayer:
    in_channels: int
    out_channels: int
    stride: int = 1
    kernel: int = 3
    padding: Optional[int] = None

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding


@dataclass
class ConvBackboneSpec:
    input_shape: tuple  # (C, H, W)
    layers: list = field(default_factory=list)

    @classmethod
    def uniform(cls, input_shape, channels: Sequence[int], strides: Sequence[int]) -> "ConvBackboneSpec":
        layers, c = [], input_shape[0]
        for out, s in zip(channels, strides):
            layers.append(ConvLayer(c, out, s))
            c = out
        return cls(tuple(input_shape), layers)

    def output_shape(self) -> tuple:
        c, h, w = self.input_shape
        for layer in self.layers:
            if layer.in_channels != c:
                raise DimensionError(f"layer expects {layer.in_channels} channels, gets {c}")
            h = ad.conv_output_size(h, layer.kernel, layer.stride, layer.pad)
            w = ad.conv_output_size(w, layer.kernel, layer.stride, layer.pad)
            c = layer.out_channels
        return (c, h, w)

    @property
    def out_dim(self) -> int:
        return int(np.prod(self.output_shape()))


def init_backbone(spec: ConvBackboneSpec, rng, prefix: str = "backbone") -> dict[str, Tensor]:
    params = {}
    for i, layer in enumerate(spec.layers):
        fan_in = layer.in_channels * layer.kernel * layer.kernel
        shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
        # He-normal keeps activations from shrinking through the ReLU stack
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[f"{prefix}.{i}.w"] = ad.parameter(w, f"{prefix}.{i}.w")
        params[f"{prefix}.{i}.b"] = ad.parameter(np.zeros(layer.out_channels), f"{prefix}.{i}.b")
    return params


def backbone_forward(x: Tensor, params: dict, spec: ConvBackboneSpec, prefix: str = "backbone") -> Tensor:
    """Conv + ReLU stack, flattened.  [C,H,W] -> [D]; [N,C,H,W] -> [N,D]."""
    expect = tuple(spec.input_shape)
    if tuple(x.shape[-3:]) != expect or x.ndim not in (3, 4):
        raise DimensionError(f"backbone expects input {expect}, got {x.shape}")
    batched = x.ndim == 4
    h = x
    for i, layer in enumerate(spec.layers):
        h = ad.conv2d(h, params[f"{prefix}.{i}.w"], params[f"{prefix}.{i}.b"], layer.stride, layer.pad)
        h = ad.relu(h)
    return ad.flatten(h, batched=batched)


# ---------------------------------------------------------------------------
# dense pieces


def init_linear(rng, n_in: int, n_out: int, prefix: str) -> dict[str, Tensor]:
    return {
        f"{prefix}.W": ad.parameter(_uniform(rng, (n_in, n_out), n_in), f"{prefix}.W"),
        f"{prefix}.b": ad.parameter(_uniform(rng, (n_out,), n_in), f"{prefix}.b"),
    }


def linear(x: Tensor, params: dict, prefix: str) -> Tensor:
    out = ad.matmul(x, params[f"{prefix}.W"])
    return ad.add(out, ad.broadcast_rows(params[f"{prefix}.b"], x.shape[0]))


def cosine_logits(z: Tensor, phi: Tensor, tau: Tensor) -> Tensor:
    """tau * cos(z, phi_k) for every class row of ``phi``.  Works for [d] or [N, d] inputs."""
    single = z.ndim == 1
    z2 = ad.reshape(z, (1, -1)) if single else z
    if z2.shape[1] != phi.shape[1]:
        raise DimensionError(f"cosine head: feature dim {z2.shape[1]} vs weight dim {phi.shape[1]}")
    zn = ad.l2_normalize(z2, axis=1)
    pn = ad.l2_normalize(phi, axis=1)
    logits = ad.mul(tau, ad.matmul(zn, ad.transpose(pn)))
    if single:
        logits = ad.reshape(logits, (-1,))
    if "zero_norm" in pn.flags:
        logits.flags["zero_class"] = pn.flags["zero_norm"]
    return logits


def feature_average(features: Tensor, labels, k: int) -> Tensor:
    """Per-class mean of l2-normalised features -> [k, d]."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=k)
    if (counts[:k] == 0).any():
        raise ContractError(f"empty support set for classes {np.flatnonzero(counts[:k] == 0).tolist()}")
    onehot = np.zeros((k, labels.size))
    onehot[labels, np.arange(labels.size)] = 1.0 / counts[labels]
    return ad.matmul(Tensor._wrap(onehot), ad.l2_normalize(features, axis=1))


def feature_average_init(features: Tensor, labels, theta: Tensor, k: int) -> Tensor:
    """phi' = theta * w_avg, row by row."""
    w_avg = feature_average(features, labels, k)
    phi = ad.mul(ad.broadcast_rows(theta, k), w_avg)
    zero = ~np.any(w_avg.data != 0.0, axis=1)
    if zero.any():
        phi.flags["zero_class"] = zero
        log.debug("feature average vanished for classes %s", np.flatnonzero(zero).tolist())
    return phi


def init_synthetic_net(rng, k: int, d_out: int, prefix: str = "sg") -> dict[str, Tensor]:
    hidden = 8 * k
    params = {}
    params.update(init_linear(rng, k * k, hidden, f"{prefix}.0"))
    params.update(init_linear(rng, hidden, hidden, f"{prefix}.1"))
    params.update(init_linear(rng, hidden, k * d_out, f"{prefix}.2"))
    return params


def synthetic_net(summary: Tensor, params: dict, prefix: str = "sg") -> Tensor:
    h = ad.relu(linear(summary, params, f"{prefix}.0"))
    h = ad.relu(linear(h, params, f"{prefix}.1"))
    return linear(h, params, f"{prefix}.2")


def query_summary(logits: Tensor) -> Tensor:
    """k x k summary of query logits: P^T L / N with P the softmax assignment.

    Uses no labels, so it is safe for transductive use.  Fully differentiable.
    """
    probs = ad.softmax(logits, axis=1)
    return ad.scale(ad.matmul(ad.transpose(probs), logits), 1.0 / logits.shape[0])


def synthetic_update(phi: Tensor, query_logits_fn, net_params: dict, eps: float, steps: int = 3,
                     prefix: str = "sg") -> Tensor:
    """phi <- phi - eps * g_hat, with g_hat predicted from label-free query logits."""
    if eps < 0 or steps < 1:
        raise ContractError("synthetic_update needs eps >= 0 and steps >= 1")
    k, d = phi.shape
    for _ in range(steps):
        summary = ad.reshape(query_summary(query_logits_fn(phi)), (1, -1))
        g_hat = synthetic_net(summary, net_params, prefix)
        if g_hat.size != phi.size:
            raise ContractError(f"synthetic gradient has {g_hat.size} entries, phi has {phi.size}")
        phi = ad.sub(phi, ad.scale(ad.reshape(g_hat, (k, d)), eps))
    return phi


def anml_modulate(nm: Tensor, p: Tensor) -> Tensor:
    if nm.shape != p.shape:
        raise DimensionError(f"modulation shapes differ: {nm.shape} vs {p.shape}")
    return ad.mul(nm, p)


def aim_param_count(cfg: AimConfig, D: int) -> int:
    return cfg.M * cfg.d_hidden + cfg.M * cfg.d_hidden * cfg.d + D * cfg.d + cfg.M * D * cfg.d_out


def matched_linear_width(cfg: AimConfig, D: int) -> int:
    """Output width of a biased D -> H linear layer with about as many parameters as AIM."""
    return max(1, round(aim_param_count(cfg, D) / (D + 1)))


# ---------------------------------------------------------------------------
# pretraining


def pretrain_backbone(images: np.ndarray, labels: np.ndarray, spec: ConvBackboneSpec, epochs: int,
                      step_size: float, rng: np.random.Generator, batch_size: int = 16,
                      n_classes: Optional[int] = None) -> tuple[dict[str, Tensor], list[float]]:
    """Supervised cross-entropy pretraining with a throwaway linear head.

    Returns frozen backbone tensors (``requires_grad=False``) and the
    per-epoch training accuracy.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    remap = {c: i for i, c in enumerate(classes)}
    y = np.array([remap[c] for c in labels])
    n_out = n_classes or len(classes)
    params = init_backbone(spec, rng)
    params.update(init_linear(rng, spec.out_dim, n_out, "pretrain_head"))
    names = list(params)
    opt = ad.SgdOptimizer(step_size)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = order[start : start + batch_size]
            with ad.Tape() as tape:
                feats = backbone_forward(Tensor._wrap(images[idx]), params, spec)
                loss = ad.cross_entropy(linear(feats, params, "pretrain_head"), y[idx])
            opt.step([params[n] for n in names], tape.gradients(loss, [params[n] for n in names]))
        feats = backbone_forward(Tensor._wrap(images), params, spec)
        pred = linear(feats, params, "pretrain_head").data.argmax(axis=1)
        history.append(float((pred == y).mean()))
    frozen = {}
    for name, t in params.items():
        if name.startswith("backbone."):
            frozen[name] = Tensor(t.data, requires_grad=False, name=name)
    return frozen, history


# ---------------------------------------------------------------------------
# framework models


class FrameworkModel:
    """Shared plumbing: parameter dict, partition, snapshots, checkpoints."""

    kind = "base"

    def __init__(self, params: dict[str, Tensor], partition: FastSlowPartition):
        self.params = params
        self.partition = partition
        partition.check(list(params))
        for name in partition.frozen:
            params[name].requires_grad = False

    def tensors(self, group: str) -> list[Tensor]:
        return [self.params[n] for n in getattr(self.partition, group)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self.params):
            raise ContractError(
                f"state mismatch: missing {sorted(set(self.params) - set(state))}, "
                f"unexpected {sorted(set(state) - set(self.params))}"
            )
        for n, arr in state.items():
            if n in self.params:
                if arr.shape != self.params[n].shape:
                    raise DimensionError(f"{n}: checkpoint {arr.shape} vs model {self.params[n].shape}")
                self.params[n].data = np.array(arr, dtype=np.float64)

    def snapshot(self, group: str) -> dict[str, np.ndarray]:
        return {n: self.params[n].data.copy() for n in getattr(self.partition, group)}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, arr in snap.items():
            self.params[n].data = arr.copy()

    # subclasses provide encode_slow / fast_logits; logits composes them on the tape
    def encode_slow(self, x: np.ndarray):
        raise NotImplementedError

    def fast_logits(self, cache, mode=None, rng=None, mask=None):
        raise NotImplementedError

    def logits(self, x: np.ndarray, mode=None, rng=None, mask=None):
        raise NotImplementedError

    def aim_input(self, x: np.ndarray) -> np.ndarray:
        """The representation the AIM layer receives for images ``x`` (no tape)."""
        raise NotImplementedError

    def predict(self, x: np.ndarray, mode: str = "hard", batch: int = 256, rng=None) -> np.ndarray:
        out = []
        for start in range(0, len(x), batch):
            logits, _ = self.logits(x[start : start + batch], mode, rng)
            out.append(logits.data)
        return np.concatenate(out, axis=0)

    def encode_all(self, x: np.ndarray, batch: int = 256):
        parts = [self.encode_slow(x[s : s + batch]) for s in range(0, len(x), batch)]
        if isinstance(parts[0], tuple):
            return tuple(np.concatenate(p, axis=0) for p in zip(*parts))
        return np.concatenate(parts, axis=0)

    def predict_cached(self, cache, mode: str = "hard", batch: int = 256, rng=None) -> np.ndarray:
        """Like :meth:`predict` but starting from :meth:`encode_slow` output."""
        n = cache_len(cache)
        out = [self.fast_logits(slice_cache(cache, slice(s, s + batch)), mode, rng)[0].data
               for s in range(0, n, batch)]
        return np.concatenate(out, axis=0)


def slice_cache(cache, idx):
    """Index a slow-path cache, which is an array or a tuple of arrays."""
    if isinstance(cache, tuple):
        return tuple(c[idx] for c in cache)
    return cache[idx]


def cache_len(cache) -> int:
    return len(cache[0]) if isinstance(cache, tuple) else len(cache)


class SibModel(FrameworkModel):
    """Frozen backbone -> AIM -> cosine classifier with generated, transductively refined weights."""

    kind = "sib"

    def __init__(self, spec: ConvBackboneSpec, aim_cfg: AimConfig, ways: int, rng,
                 backbone: Optional[dict] = None, tau: float = 10.0):
        self.spec, self.aim_cfg, self.ways = spec, aim_cfg, ways
        params = dict(backbone) if backbone is not None else init_backbone(spec, rng)
        aim = init_aim_params(aim_cfg, spec.out_dim, rng)
        params.update(aim.named())
        params["phi"] = ad.parameter(np.zeros((ways, aim_cfg.d_out)), "phi")
        params["theta"] = ad.parameter(np.ones(aim_cfg.d_out), "theta")
        params["tau"] = ad.parameter(np.array(tau), "tau")
        params.update(init_synthetic_net(rng, ways, aim_cfg.d_out))
        partition = FastSlowPartition(
            fast=tuple(aim.named()) + ("phi",),
            slow=("theta", "tau") + tuple(n for n in params if n.startswith("sg.")),
            frozen=tuple(n for n in params if n.startswith("backbone.")),
        )
        super().__init__(params, partition)

    @property
    def aim(self) -> AimParams:
        p = self.params
        return AimParams(p["aim.h"], p["aim.Wq"], p["aim.Wk"], p["aim.Wm"])

    def encode_slow(self, x):
        return backbone_forward(Tensor._wrap(np.asarray(x, dtype=np.float64)), self.params, self.spec).data

    def aim_input(self, x):
        return self.encode_slow(x)

    def features(self, z: np.ndarray, mode=None, rng=None, mask=None):
        return aim_layer(Tensor._wrap(z), self.aim, self.aim_cfg, mode, rng, mask)

    def fast_logits(self, cache, mode=None, rng=None, mask=None):
        zt, mask = self.features(cache, mode, rng, mask)
        return cosine_logits(zt, self.params["phi"], self.params["tau"]), mask

    def logits(self, x, mode=None, rng=None, mask=None):
        return self.fast_logits(self.encode_slow(x), mode, rng, mask)

    def support_average(self, z_support: np.ndarray, labels) -> np.ndarray:
        zt, _ = self.features(z_support, "hard")
        return feature_average(zt.detach(), labels, self.ways).data

    def init_phi(self, z_support: np.ndarray, labels) -> np.ndarray:
        w_avg = self.support_average(z_support, labels)
        self.params["phi"].data = self.params["theta"].data[None, :] * w_avg
        return w_avg

    def refined_phi(self, phi: Tensor, z_query: np.ndarray, eps: float, steps: int,
                    mode: str = "hard", rng=None, mask=None) -> Tensor:
        zq, _ = self.features(z_query, mode, rng, mask)
        tau = self.params["tau"]
        return synthetic_update(phi, lambda ph: cosine_logits(zq, ph, tau), self.params, eps, steps)


class ContinualModel(FrameworkModel):
    """Shared pieces of the OML and ANML variants: mixer (AIM or linear baseline) and linear head."""

    def _add_mixer(self, params, D: int, rng) -> tuple:
        if self.mixer == "aim":
            aim = init_aim_params(self.aim_cfg, D, rng)
            params.update(aim.named())
            self.mix_dim = self.aim_cfg.d_out
            return tuple(aim.named())
        width = matched_linear_width(self.aim_cfg, D)
        params.update(init_linear(rng, D, width, "mix"))
        self.mix_dim = width
        return ("mix.W", "mix.b")

    @property
    def aim(self) -> AimParams:
        p = self.params
        return AimParams(p["aim.h"], p["aim.Wq"], p["aim.Wk"], p["aim.Wm"])

    def mix_and_classify(self, z: Tensor, mode=None, rng=None, mask=None):
        if self.mixer == "aim":
            zt, mask = aim_layer(z, self.aim, self.aim_cfg, mode, rng, mask)
        else:
            zt = linear(z, self.params, "mix")
        return linear(zt, self.params, "head"), mask

    def reset_head_rows(self, rows, rng) -> None:
        W, b = self.params["head.W"], self.params["head.b"]
        rows = np.asarray(rows)
        fan_in = W.shape[0]
        W.data = W.data.copy()
        b.data = b.data.copy()
        W.data[:, rows] = _uniform(rng, (fan_in, rows.size), fan_in)
        b.data[rows] = _uniform(rng, (rows.size,), fan_in)


class OmlModel(ContinualModel):
    """Slow conv backbone + slow reduction layer -> fast AIM (or linear) -> fast linear head."""

    kind = "oml"

    def __init__(self, spec: ConvBackboneSpec, aim_cfg: AimConfig, n_classes: int, rng,
                 reduce_dim: Optional[int] = None, mixer: str = "aim"):
        self.spec, self.aim_cfg, self.n_classes, self.mixer = spec, aim_cfg, n_classes, mixer
        params = init_backbone(spec, rng)
        slow = list(params)
        D = spec.out_dim
        self.reduce_dim = reduce_dim
        if reduce_dim:
            params.update(init_linear(rng, D, reduce_dim, "reduce"))
            slow += ["reduce.W", "reduce.b"]
            D = reduce_dim
        fast = list(self._add_mixer(params, D, rng))
        params.update(init_linear(rng, self.mix_dim, n_classes, "head"))
        fast += ["head.W", "head.b"]
        super().__init__(params, FastSlowPartition(fast=tuple(fast), slow=tuple(slow)))

    def _slow_path(self, x: Tensor) -> Tensor:
        z = backbone_forward(x, self.params, self.spec)
        if self.reduce_dim:
            z = linear(z, self.params, "reduce")
        return z

    def encode_slow(self, x):
        return self._slow_path(Tensor._wrap(np.asarray(x, dtype=np.float64))).data

    def fast_logits(self, cache, mode=None, rng=None, mask=None):
        return self.mix_and_classify(Tensor._wrap(cache), mode, rng, mask)

    def aim_input(self, x):
        return self.encode_slow(x)

    def logits(self, x, mode=None, rng=None, mask=None):
        z = self._slow_path(Tensor._wrap(np.asarray(x, dtype=np.float64)))
        return self.mix_and_classify(z, mode, rng, mask)


class AnmlModel(ContinualModel):
    """Slow neuromodulatory conv net gating a fast prediction conv net, then reduction, mixer, head."""

    kind = "anml"

    def __init__(self, nm_spec: ConvBackboneSpec, p_spec: ConvBackboneSpec, aim_cfg: AimConfig,
                 n_classes: int, rng, reduce_dim: Optional[int] = None, mixer: str = "aim"):
        if nm_spec.output_shape() != p_spec.output_shape():
            raise DimensionError(
                f"modulator output {nm_spec.output_shape()} must match prediction output {p_spec.output_shape()}"
            )
        self.nm_spec, self.p_spec = nm_spec, p_spec
        self.aim_cfg, self.n_classes, self.mixer = aim_cfg, n_classes, mixer
        params = init_backbone(nm_spec, rng, "nm")
        slow = list(params)
        params.update(init_backbone(p_spec, rng, "pred"))
        fast = [n for n in params if n.startswith("pred.")]
        D = p_spec.out_dim
        self.reduce_dim = reduce_dim
        if reduce_dim:
            params.update(init_linear(rng, D, reduce_dim, "reduce"))
            fast += ["reduce.W", "reduce.b"]
            D = reduce_dim
        fast += list(self._add_mixer(params, D, rng))
        params.update(init_linear(rng, self.mix_dim, n_classes, "head"))
        fast += ["head.W", "head.b"]
        super().__init__(params, FastSlowPartition(fast=tuple(fast), slow=tuple(slow)))

    def _mixer_input(self, x: Tensor, nm: Tensor) -> Tensor:
        p = backbone_forward(x, self.params, self.p_spec, "pred")
        z = anml_modulate(nm, p)
        if self.reduce_dim:
            z = linear(z, self.params, "reduce")
        return z

    def _fast_path(self, x: Tensor, nm: Tensor, mode, rng, mask):
        return self.mix_and_classify(self._mixer_input(x, nm), mode, rng, mask)

    def aim_input(self, x):
        x, nm = self.encode_slow(x)
        return self._mixer_input(Tensor._wrap(x), Tensor._wrap(nm)).data

    def encode_slow(self, x):
        x = np.asarray(x, dtype=np.float64)
        nm = backbone_forward(Tensor._wrap(x), self.params, self.nm_spec, "nm").data
        return (x, nm)

    def fast_logits(self, cache, mode=None, rng=None, mask=None):
        x, nm = cache
        return self._fast_path(Tensor._wrap(x), Tensor._wrap(nm), mode, rng, mask)

    def logits(self, x, mode=None, rng=None, mask=None):
        xt = Tensor._wrap(np.asarray(x, dtype=np.float64))
        nm = backbone_forward(xt, self.params, self.nm_spec, "nm")
        return self._fast_path(xt, nm, mode, rng, mask)


# ---------------------------------------------------------------------------
# checkpoint container

CHECKPOINT_MAGIC = b"AIMC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """AIMC container: magic, u32 version, u32 count, then per tensor
    u32 name length, utf-8 name, u32 rank, u64 dims, float64 LE data."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    pos = 4

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = read("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out = {}
    for _ in range(count):
        (n,) = read("<I")
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated name")
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = read("<I")
        dims = read(f"<{rank}Q") if rank else ()
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated data for {name}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims).astype(np.float64)
        pos += nbytes
    return out
