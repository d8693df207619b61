"""Dense numpy kernels with a tape-based reverse-mode autodiff.

Every differentiable kernel is a plain function taking and returning
:class:`Tensor`. When a :class:`GradTape` is active and any input requires
grad, the kernel appends one record to the tape; ``tape.backward(loss)``
walks those records in exact reverse execution order.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    shape = dims

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}, dtype={self.dtype}{flag})"

    # operator sugar for the few places the model uses it
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_ACTIVE: list["GradTape"] = []


class GradTape:
    """Ordered record of executed kernels.

    Use as a context manager; kernels called inside the block are recorded.
    ``backward`` may run once per recording.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self.records.append((out, parents, backward_fn))

    def backward(self, loss: Tensor, seed_grad: np.ndarray | None = None) -> None:
        if self._consumed:
            raise TapeError("backward already called on this tape; run a new forward first")
        self._consumed = True
        if seed_grad is None:
            seed_grad = np.ones_like(loss.data)
        loss.grad = seed_grad
        for out, parents, fn in reversed(self.records):
            g = out.grad
            if g is None:
                continue
            grads = fn(g)
            for p, gp in zip(parents, grads):
                if gp is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = gp
                else:
                    p.grad = p.grad + gp
        self.records.clear()


def _tracking(*parents: Tensor) -> GradTape | None:
    if not _ACTIVE:
        return None
    if any(p.requires_grad for p in parents):
        return _ACTIVE[-1]
    return None


def _emit(out_data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    tape = _tracking(*parents)
    out = Tensor(out_data, requires_grad=tape is not None)
    if tape is not None:
        tape.record(out, parents, backward_fn)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.dims, b.dims
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.dims, b.dims
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return _emit(xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _emit(y, (x,), back)


ACTIVATIONS = {"silu": silu, "gelu": gelu}


# ---------------------------------------------------------------------------
# shape manipulation and reductions
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.dims
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.dims
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(out), (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.dims[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis), 1.0 / n)


def std_population(a: Tensor) -> Tensor:
    """Population standard deviation over the last axis."""
    x = a.data
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    dev = x - mu
    s = np.sqrt((dev * dev).mean(axis=-1))

    def back(g):
        safe = np.where(s > 0, s, 1.0)
        coef = np.where(s > 0, g / (n * safe), 0.0)
        return (dev * coef[..., None],)

    return _emit(s, (a,), back)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit(ad @ bd, (a, b), back)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, with per-row max subtraction."""
    xd = x.data
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _emit(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def softmax_rows(x: Tensor) -> Tensor:
    return softmax(x)


def rms_norm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    xd, gd = x.data, gain.data
    eps = float(eps)
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * r
    n = xd.shape[-1]

    def back(g):
        gx = ggain = None
        if x.requires_grad:
            gg = g * gd
            gx = r * (gg - xhat * (gg * xhat).sum(axis=-1, keepdims=True) / n)
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, n).sum(axis=0)
        return gx, ggain

    return _emit(xhat * gd, (x, gain), back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.dims[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.dims[1]))
        return (gt,)

    return _emit(table.data[ids], (table,), back)


def cross_entropy_mean(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax."""
    ld = logits.data
    if ld.ndim != 2:
        raise ShapeError(f"cross_entropy_mean expects [n, V] logits, got {ld.shape}")
    t = np.asarray(targets, dtype=np.int64).ravel()
    n, vocab = ld.shape
    if t.shape[0] != n:
        raise ShapeError(f"{t.shape[0]} targets for {n} rows")
    if t.size and (t.min() < 0 or t.max() >= vocab):
        raise IndexError(f"target out of range [0, {vocab})")
    mx = ld.max(axis=1, keepdims=True)
    z = ld - mx
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = -logp[rows, t].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        return (p * (g / n),)

    return _emit(np.asarray(loss, dtype=ld.dtype), (logits,), back)


# ---------------------------------------------------------------------------
# weight-space expansion kernels
# ---------------------------------------------------------------------------

def monarch_dense(dfac: Tensor, rfac: Tensor) -> Tensor:
    """Materialize the two-factor Monarch product as an n x n matrix, n = d*d.

    ``dfac[i, j]`` is the diagonal of block (i, j) of the left factor,
    ``rfac[j]`` the diagonal of the j-th block of the block-diagonal right
    factor, so block (i, j) of the product is ``diag(dfac[i, j] * rfac[j])``.
    """
    dd, rd = dfac.data, rfac.data
    d = dd.shape[0]
    blocks = dd * rd[None, :, :]  # [i, j, p]
    n = d * d
    out = np.zeros((d, d, d, d), dtype=np.result_type(dd, rd))  # [i, p, j, q]
    p = np.arange(d)
    out[:, p, :, p] = blocks.transpose(2, 0, 1)
    out = out.reshape(n, n)

    def back(g):
        gb = g.reshape(d, d, d, d)[:, p, :, p].transpose(1, 2, 0)  # [i, j, p]
        gd = gb * rd[None, :, :] if dfac.requires_grad else None
        gr = (gb * dd).sum(axis=0) if rfac.requires_grad else None
        return gd, gr

    return _emit(out, (dfac, rfac), back)


def expand_cols(w: Tensor, pos: np.ndarray, neg: np.ndarray, m: Tensor) -> Tensor:
    """``W`` with columns ``neg`` replaced by ``W[:, pos] @ M + W[:, neg]``."""
    wd, md = w.data, m.data
    out = wd.copy()
    out[:, neg] = wd[:, pos] @ md + wd[:, neg]

    def back(g):
        gw = gm = None
        gn = g[:, neg]
        if w.requires_grad:
            gw = g.copy()
            gw[:, pos] += gn @ md.T
        if m.requires_grad:
            gm = wd[:, pos].T @ gn
        return gw, gm

    return _emit(out, (w, m), back)


def expand_rows(w: Tensor, pos: np.ndarray, neg: np.ndarray, m: Tensor) -> Tensor:
    """``W`` with rows ``neg`` replaced by ``M @ W[pos, :] + W[neg, :]``."""
    wd, md = w.data, m.data
    out = wd.copy()
    out[neg, :] = md @ wd[pos, :] + wd[neg, :]

    def back(g):
        gw = gm = None
        gn = g[neg, :]
        if w.requires_grad:
            gw = g.copy()
            gw[pos, :] += md.T @ gn
        if m.requires_grad:
            gm = gn @ wd[pos, :].T
        return gw, gm

    return _emit(out, (w, m), back)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    n_samples: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` is re-evaluated with each sampled coordinate of ``params`` nudged by
    ``+-h`` in place; it must read the tensors' current ``data``.
    """
    params = list(params)
    for p in params:
        p.requires_grad = True
        p.grad = None
    with GradTape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    for i, j in coords:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        fp = float(f().data)
        flat[j] = orig - h
        fm = float(f().data)
        flat[j] = orig
        g_fd = (fp - fm) / (2 * h)
        g_ad = float(analytic[i].reshape(-1)[j])
        err = abs(g_ad - g_fd) / (abs(g_ad) + abs(g_fd) + 1e-12)
        worst = max(worst, err)
    return worst
