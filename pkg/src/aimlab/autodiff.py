"""Reverse-mode automatic differentiation over float64 numpy arrays.

Operations record onto the innermost active :class:`Tape`.  Outside a tape
everything runs eagerly with no graph kept, which is how evaluation code
avoids paying for bookkeeping it does not need.

    >>> with Tape() as tape:
    ...     loss = sum_(mul(p, p))
    >>> (g,) = tape.gradients(loss, [p])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "flags", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.flags: dict = {}
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t.flags = {}
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, params: Iterable["Tensor"] = ()) -> None:
        if self._tape is None:
            raise ContractError("loss was not recorded on a tape")
        self._tape.backward(self, params)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Append-only record of primitive applications.

    Nodes are appended as operations execute, so the list is already in
    topological order and the backward pass is a single reversed sweep.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def _sweep(self, loss: Tensor, wrt: Optional[Sequence[Tensor]]) -> dict:
        if loss.size != 1 or loss.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")

        relevant = None
        if wrt is not None:
            relevant = {id(t) for t in wrt}
            for node in self.nodes:
                if any(id(i) in relevant for i in node.inputs):
                    relevant.add(id(node.output))

        grads: dict[int, list] = {id(loss): [loss, np.ones((), dtype=np.float64)]}
        for node in reversed(self.nodes):
            entry = grads.pop(id(node.output), None)
            if entry is None:
                continue
            needs = tuple(
                inp.requires_grad and (relevant is None or id(inp) in relevant)
                for inp in node.inputs
            )
            if not any(needs):
                continue
            in_grads = node.backward(entry[1], needs)
            for inp, need, g in zip(node.inputs, needs, in_grads):
                if not need or g is None:
                    continue
                slot = grads.get(id(inp))
                if slot is None:
                    grads[id(inp)] = [inp, g]
                else:
                    slot[1] = slot[1] + g
        return grads

    def gradients(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of ``loss`` for each tensor in ``wrt``; zeros where unreached."""
        grads = self._sweep(loss, wrt)
        out = []
        for t in wrt:
            entry = grads.get(id(t))
            out.append(np.zeros_like(t.data) if entry is None else entry[1])
        return out

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
        grads = self._sweep(loss, None)
        leaves = {}
        for node in self.nodes:
            for inp in node.inputs:
                if inp.requires_grad and inp._tape is None:
                    leaves[id(inp)] = inp
        for p in params:
            leaves[id(p)] = p
        for key, leaf in leaves.items():
            entry = grads.get(key)
            g = np.zeros_like(leaf.data) if entry is None else entry[1]
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def _record(op: str, out_data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    if not np.isfinite(out_data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor._wrap(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(Node(op, inputs, out, backward))
    return out


def _same_or_scalar(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    return g.sum().reshape(()) if shape == () and g.shape != () else g


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_or_scalar("add", a, b)

    def back(g, needs):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record("add", a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_or_scalar("sub", a, b)

    def back(g, needs):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _record("sub", a.data - b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_or_scalar("mul", a, b)

    def back(g, needs):
        ga = _reduce_to(g * b.data, a.shape) if needs[0] else None
        gb = _reduce_to(g * a.data, b.shape) if needs[1] else None
        return ga, gb

    return _record("mul", a.data * b.data, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", a.data * c, (a,), lambda g, needs: (g * c,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _record("relu", np.where(pos, a.data, 0.0), (a,), lambda g, needs: (g * pos,))


def sum_(a: Tensor, axis: Optional[int] = None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis))

    def back(g, needs):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record("sum", out, (a,), back)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def l2_normalize(a: Tensor, axis: int = -1, on_zero: str = "zero") -> Tensor:
    """Unit-normalise along ``axis``.

    Zero-norm slices map to zero (and are flagged on the output under
    ``flags["zero_norm"]``) unless ``on_zero="raise"``.
    """
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    zero = norm == 0.0
    if zero.any() and on_zero == "raise":
        raise NumericError("l2_normalize of a zero vector")
    safe = np.where(zero, 1.0, norm)
    unit = np.where(zero, 0.0, a.data / safe)

    def back(g, needs):
        proj = (g * unit).sum(axis=axis, keepdims=True)
        return (np.where(zero, 0.0, (g - unit * proj) / safe),)

    out = _record("l2_normalize", unit, (a,), back)
    if zero.any():
        out.flags["zero_norm"] = np.squeeze(zero, axis=axis)
    return out


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(src),))


def flatten(a: Tensor, batched: bool = False) -> Tensor:
    shape = (a.shape[0], -1) if batched else (-1,)
    return reshape(a, shape)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")
    return _record("transpose", a.data.T.copy(), (a,), lambda g, needs: (g.T.copy(),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g, needs):
        return tuple(np.split(g, cuts, axis=axis))

    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)

    def back(g, needs):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record("stack", np.stack([t.data for t in tensors], axis=axis), tensors, back)


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    idx = np.asarray(index)

    def back(g, needs):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0) if idx.ndim else g)
        return (full,)

    return _record("take", np.take(a.data, idx, axis=axis), (a,), back)


def broadcast_rows(a: Tensor, n: int) -> Tensor:
    """Explicitly repeat ``a`` as ``n`` leading rows."""
    return _record(
        "broadcast_rows",
        np.broadcast_to(a.data, (n,) + a.shape).copy(),
        (a,),
        lambda g, needs: (g.sum(axis=0),),
    )


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def back(g, needs):
        ga = g @ b.data.T if needs[0] else None
        gb = a.data.T @ g if needs[1] else None
        return ga, gb

    return _record("matmul", a.data @ b.data, (a, b), back)


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum without repeated indices inside an operand."""
    ins, out = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s in (sa, sb, out):
        if len(set(s)) != len(s):
            raise ContractError(f"einsum: repeated index in {s!r}")
    if not set(sa) <= set(sb) | set(out) or not set(sb) <= set(sa) | set(out):
        raise ContractError(f"einsum: {subscripts!r} sums an index away inside one operand")
    try:
        data = np.einsum(subscripts, a.data, b.data)
    except ValueError as err:
        raise DimensionError(f"einsum {subscripts!r}: {a.shape} vs {b.shape}: {err}") from None

    def back(g, needs):
        ga = np.einsum(f"{out},{sb}->{sa}", g, b.data) if needs[0] else None
        gb = np.einsum(f"{out},{sa}->{sb}", g, a.data) if needs[1] else None
        return ga, gb

    return _record("einsum", np.asarray(data), (a, b), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g, needs):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _record("softmax", p, (a,), back)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """-log softmax(logits)[label]; mean over rows for a batch of logits."""
    lab = np.asarray(labels, dtype=np.int64)
    batched = logits.ndim == 2
    z = logits.data if batched else logits.data[None, :]
    lab2 = lab.reshape(-1)
    if lab2.shape[0] != z.shape[0]:
        raise DimensionError(f"cross_entropy: {z.shape[0]} rows vs {lab2.shape[0]} labels")
    if (lab2 < 0).any() or (lab2 >= z.shape[1]).any():
        raise ContractError("cross_entropy: label out of range")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(z.shape[0])
    n = z.shape[0]
    loss = -logp[rows, lab2].mean()

    def back(g, needs):
        d = np.exp(logp)
        d[rows, lab2] -= 1.0
        d *= g / n
        return (d if batched else d[0],)

    return _record("cross_entropy", np.asarray(loss), (logits,), back)


def sparse_mix(z: Tensor, w: Tensor, mech: Tensor) -> Tensor:
    """out[n] = sum_m w[n, m] * z[n] @ mech[m], touching only mechanisms with nonzero weight.

    Mechanisms whose weight is zero for every row take no part in the
    forward pass and receive an exactly-zero gradient.
    """
    if z.ndim != 2 or w.ndim != 2 or mech.ndim != 3:
        raise DimensionError(f"sparse_mix: bad ranks {z.shape}, {w.shape}, {mech.shape}")
    n, d = z.shape
    m, d2, o = mech.shape
    if d != d2 or w.shape != (n, m):
        raise DimensionError(f"sparse_mix: z {z.shape}, w {w.shape}, mech {mech.shape}")
    live = np.flatnonzero((w.data != 0.0).any(axis=0))
    k = live.size
    wl = w.data[:, live]
    ml = mech.data[live]  # [k, d, o]
    # one GEMM for every live mechanism: [n, d] @ [d, k*o]
    per_mech = (z.data @ ml.transpose(1, 0, 2).reshape(d, k * o)).reshape(n, k, o)
    out = np.einsum("nk,nko->no", wl, per_mech)

    def back(g, needs):
        gz = gw = gm = None
        weighted = (wl[:, :, None] * g[:, None, :]).reshape(n, k * o)
        if needs[0]:
            gz = weighted @ ml.transpose(0, 2, 1).reshape(k * o, d)
        if needs[1]:
            # every column gets its true derivative, zero-weight mechanisms included
            gw = np.einsum("nd,mnd->nm", z.data, g @ mech.data.transpose(0, 2, 1))
        if needs[2]:
            gm = np.zeros_like(mech.data)
            gm[live] = (z.data.T @ weighted).reshape(d, k, o).transpose(1, 0, 2)
        return gz, gw, gm

    return _record("sparse_mix", out, (z, w, mech), back)


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(
    x: Tensor,
    kernels: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of ``x`` ([C,H,W] or [N,C,H,W]) with ``kernels`` [O,C,kh,kw]."""
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape}, kernels {kernels.shape}")
    n, c, h, w = xd.shape
    o, c2, kh, kw = kernels.shape
    if c != c2:
        raise DimensionError(f"conv2d: input channels {c} vs kernel channels {c2}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernels.data.reshape(o, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, o)
    if bias is not None:
        out = out + bias.data
    out = out.transpose(0, 3, 1, 2)
    if single:
        out = out[0]
    inputs = (x, kernels) if bias is None else (x, kernels, bias)

    def back(g, needs):
        g4 = g[None] if single else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gx = gk = gb = None
        if needs[1]:
            gk = (gmat.T @ cols).reshape(kernels.shape)
        if bias is not None and needs[2]:
            gb = gmat.sum(axis=0)
        if needs[0]:
            # kernel offsets lead so each shifted slice is a run of whole channel vectors
            kmat_t = kernels.data.transpose(0, 2, 3, 1).reshape(o, -1)
            dcols = (gmat @ kmat_t).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros((n, xp.shape[2], xp.shape[3], c))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, i, j]
            gxp = gxp.transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            if single:
                gx = gx[0]
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _record("conv2d", np.ascontiguousarray(out), inputs, back)


# ---------------------------------------------------------------------------
# optimisation and checking


class SgdOptimizer:
    """Plain SGD: p <- p - step_size * grad.  No momentum, no weight decay."""

    def __init__(self, step_size: float):
        if step_size < 0:
            raise ContractError("step_size must be non-negative")
        self.step_size = step_size

    def step(self, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
        if self.step_size == 0.0:
            return
        for p, g in zip(params, grads):
            p.data -= self.step_size * g


def finite_diff_check(
    f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5
) -> float:
    """Max over coordinates of |g_ad - g_fd| / max(1, |g_fd|) with central differences.

    ``f`` must rebuild the scalar loss from the current values of ``params``.
    """
    if h <= 0:
        raise ContractError("h must be positive")
    with Tape() as tape:
        loss = f()
    analytic = tape.gradients(loss, params)
    worst = 0.0
    for p, g in zip(params, analytic):
        if not isinstance(p.data, np.ndarray) or not p.data.flags.c_contiguous:
            p.data = np.array(p.data, dtype=np.float64)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = f().item()
            flat[i] = keep - h
            down = f().item()
            flat[i] = keep
            fd = (up - down) / (2.0 * h)
            worst = max(worst, abs(gflat[i] - fd) / max(1.0, abs(fd)))
    return worst
