"""Finite-difference audit of every differentiable primitive and each composed model.

Each case builds fresh random inputs from a generator and returns a closure
that recomputes a scalar loss from the current parameter values.  AIM
selections are pinned so the loss is smooth in the parameters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .aim import AimConfig, aim_layer, init_aim_params
from .autodiff import Tensor
from .models import AnmlModel, ConvBackboneSpec, OmlModel, SibModel, cosine_logits

TOLERANCE = 1e-5


@dataclass
class CaseResult:
    name: str
    worst: float
    points: int
    seconds: float
    resampled: int = 0  # points dropped because a ReLU kink sat inside the difference stencil

    @property
    def ok(self) -> bool:
        return self.worst < TOLERANCE


def _p(rng, *shape):
    return ad.parameter(rng.normal(size=shape))


def _weighted(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    # a fixed random projection turns any output into a scalar with a rich gradient
    r = Tensor._wrap(rng.normal(size=out.shape))
    return lambda o: ad.sum_(ad.mul(o, r))


def _unary(op):
    def build(rng):
        a = _p(rng, 4, 3)
        proj = _weighted(op(a), rng)
        return (lambda: proj(op(a))), [a]
    return build


def _binary(op, sa=(3, 4), sb=(3, 4)):
    def build(rng):
        a, b = _p(rng, *sa), _p(rng, *sb)
        proj = _weighted(op(a, b), rng)
        return (lambda: proj(op(a, b))), [a, b]
    return build


def _relu(rng):
    # keep entries away from the kink so central differences stay valid
    x = rng.normal(size=(4, 3))
    x += np.sign(x) * 0.1
    a = ad.parameter(x)
    proj = _weighted(ad.relu(a), rng)
    return (lambda: proj(ad.relu(a))), [a]


def _concat(rng):
    a, b = _p(rng, 2, 3), _p(rng, 4, 3)
    proj = _weighted(ad.concat([a, b], axis=0), rng)
    return (lambda: proj(ad.concat([a, b], axis=0))), [a, b]


def _stack(rng):
    a, b = _p(rng, 2, 3), _p(rng, 2, 3)
    proj = _weighted(ad.stack([a, b], axis=2), rng)
    return (lambda: proj(ad.stack([a, b], axis=2))), [a, b]


def _cross_entropy(rng):
    a = _p(rng, 5, 4)
    y = rng.integers(0, 4, size=5)
    return (lambda: ad.cross_entropy(a, y)), [a]


def _cross_entropy_single(rng):
    a = _p(rng, 6)
    return (lambda: ad.cross_entropy(a, 2)), [a]


def _sparse_mix(rng):
    z, m = _p(rng, 4, 5), _p(rng, 6, 5, 3)
    w = rng.uniform(size=(4, 6))
    w[:, [1, 4]] = 0.0
    w = ad.parameter(w)
    proj = _weighted(ad.sparse_mix(z, w, m), rng)
    return (lambda: proj(ad.sparse_mix(z, w, m))), [z, w, m]


def _conv(stride, padding, batched):
    def build(rng):
        x = _p(rng, *((2, 2, 6, 6) if batched else (2, 6, 6)))
        k, b = _p(rng, 3, 2, 3, 3), _p(rng, 3)
        f = lambda: ad.conv2d(x, k, b, stride, padding)
        proj = _weighted(f(), rng)
        return (lambda: proj(f())), [x, k, b]
    return build


def _aim(rng):
    cfg = AimConfig(M=5, K=2, l=1, d=3, d_hidden=4, d_out=3)
    params = init_aim_params(cfg, 6, rng)
    z = _p(rng, 3, 6)
    _, mask = aim_layer(z, params, cfg, "stochastic", rng)
    f = lambda: aim_layer(z, params, cfg, mask=mask)[0]
    proj = _weighted(f(), rng)
    return (lambda: proj(f())), [z, params.h, params.Wq, params.Wk, params.Wm]


_TINY_IMAGE = (1, 6, 6)
_TINY_AIM = AimConfig(M=4, K=2, l=1, d=3, d_hidden=4, d_out=4)


def _perturb_all(params: dict, rng) -> None:
    for t in params.values():
        t.data = t.data + 0.1 * rng.normal(size=t.shape)


def _sib(rng):
    spec = ConvBackboneSpec.uniform(_TINY_IMAGE, (2, 2), (2, 2))
    ways = 2  # the synthetic-gradient net grows with ways squared, which dominates the audit time
    model = SibModel(spec, _TINY_AIM, ways, rng)
    _perturb_all(model.params, rng)
    zs = model.encode_slow(rng.uniform(size=(ways,) + _TINY_IMAGE))
    zq = model.encode_slow(rng.uniform(size=(2 * ways,) + _TINY_IMAGE))
    ys, yq = np.arange(ways), np.repeat(np.arange(ways), 2)
    w_avg = model.support_average(zs, ys)
    _, mask = model.features(zq, "stochastic", rng)
    p = model.params

    def loss():
        start = ad.mul(ad.broadcast_rows(p["theta"], ways), Tensor._wrap(w_avg))
        refined = model.refined_phi(start, zq, 0.1, 2, mask=mask)
        zt, _ = model.features(zq, mask=mask)
        return ad.cross_entropy(cosine_logits(zt, refined, p["tau"]), yq)

    wrt = [t for n, t in p.items() if not n.startswith("backbone.") and n != "phi"]
    return loss, wrt


def _continual(make):
    def build(rng):
        model = make(rng)
        x = rng.uniform(size=(3,) + _TINY_IMAGE)
        y = rng.integers(0, model.n_classes, size=3)
        _perturb_all(model.params, rng)
        _, mask = model.logits(x, "stochastic", rng)
        wrt = [t for t in model.params.values() if t.requires_grad]
        return (lambda: ad.cross_entropy(model.logits(x, mask=mask)[0], y)), wrt
    return build


def _oml(rng):
    spec = ConvBackboneSpec.uniform(_TINY_IMAGE, (3, 3), (2, 1))
    return OmlModel(spec, _TINY_AIM, 4, rng, reduce_dim=5)


def _anml(rng):
    nm = ConvBackboneSpec.uniform(_TINY_IMAGE, (2, 3), (2, 1))
    pred = ConvBackboneSpec.uniform(_TINY_IMAGE, (3, 3), (2, 1))
    return AnmlModel(nm, pred, _TINY_AIM, 4, rng, reduce_dim=5)


CASES: dict[str, Callable] = {
    "add": _binary(ad.add),
    "add_scalar": _binary(ad.add, sb=()),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "mul_scalar": _binary(ad.mul, sa=()),
    "scale": _unary(lambda a: ad.scale(a, -1.7)),
    "relu": _relu,
    "sum": _unary(ad.sum_),
    "sum_axis": _unary(lambda a: ad.sum_(a, axis=0)),
    "mean": _unary(ad.mean),
    "mean_axis": _unary(lambda a: ad.mean(a, axis=1)),
    "l2_normalize": _unary(lambda a: ad.l2_normalize(a, axis=1)),
    "reshape": _unary(lambda a: ad.reshape(a, (2, 6))),
    "flatten": _unary(ad.flatten),
    "transpose": _unary(ad.transpose),
    "concat": _concat,
    "stack": _stack,
    "take": _unary(lambda a: ad.take(a, [2, 0, 2], axis=0)),
    "broadcast_rows": _binary(lambda a, b: ad.mul(ad.broadcast_rows(a, 4), b), sa=(3,), sb=(4, 3)),
    "matmul": _binary(ad.matmul, sa=(3, 4), sb=(4, 2)),
    "einsum": _binary(lambda a, b: ad.einsum("mh,mhe->me", a, b), sa=(3, 4), sb=(3, 4, 2)),
    "softmax": _unary(lambda a: ad.softmax(a, axis=1)),
    "cross_entropy": _cross_entropy,
    "cross_entropy_single": _cross_entropy_single,
    "sparse_mix": _sparse_mix,
    "conv2d": _conv(1, 1, True),
    "conv2d_strided": _conv(2, 0, False),
    "aim_layer": _aim,
    "sib": _sib,
    "oml": _continual(_oml),
    "anml": _continual(_anml),
}


# composed models contain ReLUs whose kinks can fall inside the +-h stencil at a random point
_KINKED = {"sib", "oml", "anml"}
_KINK_TOL = 1e-6


def _numeric_grad(f, params, h: float) -> list[np.ndarray]:
    out = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.empty(flat.size)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = f().item()
            flat[i] = keep - h
            down = f().item()
            flat[i] = keep
            g[i] = (up - down) / (2.0 * h)
        out.append(g)
    return out


def _screened_check(f, params, h: float) -> float | None:
    """Like ``finite_diff_check``, but returns None when central differences at h and h/2 disagree.

    Disagreement means the loss is not smooth within the stencil, so the
    difference quotient is no oracle there.  The decision uses loss values only.
    """
    for p in params:
        p.data = np.array(p.data, dtype=np.float64)
    coarse, fine = _numeric_grad(f, params, h), _numeric_grad(f, params, h / 2)
    if any(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a)), initial=0.0) > _KINK_TOL
           for a, b in zip(coarse, fine)):
        return None
    with ad.Tape() as tape:
        loss = f()
    analytic = tape.gradients(loss, params)
    return max(float(np.max(np.abs(g.reshape(-1) - fd) / np.maximum(1.0, np.abs(fd)), initial=0.0))
               for g, fd in zip(analytic, coarse))


def run_case(name: str, points: int = 10, seed: int = 0, h: float = 1e-5) -> CaseResult:
    rng = np.random.default_rng([seed, sum(name.encode())])
    start = time.perf_counter()
    worst, done, dropped = 0.0, 0, 0
    while done < points:
        loss, params = CASES[name](rng)
        err = _screened_check(loss, params, h) if name in _KINKED else ad.finite_diff_check(loss, params, h)
        if err is None:
            dropped += 1
            if dropped > points:
                raise ad.NumericError(f"{name}: {dropped} sampled points sit on a non-smooth region")
            continue
        worst = max(worst, err)
        done += 1
    return CaseResult(name, worst, points, time.perf_counter() - start, dropped)


def run_suite(points: int = 10, seed: int = 0, names=None) -> list[CaseResult]:
    return [run_case(n, points, seed) for n in (names or CASES)]
