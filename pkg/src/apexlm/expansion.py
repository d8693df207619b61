"""Zero-initialized expansion operators acting in weight space.

An operator owns a transformation ``M`` (n x n, n = flat size of the P and N
slices) and rewrites the N slice of one weight matrix as

    column form:  W[:, N] <- W[:, P] @ M + W[:, N]
    row form:     W[N, :] <- M @ W[P, :] + W[N, :]

``M`` is a Monarch product of a d x d grid of diagonal blocks and a
block-diagonal of d diagonal blocks (n = d * d). With the right factor at
zero the operator is an exact no-op, so attaching never moves the model.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .assessment import AdvantageSets, StateError
from .model import ModelParams
from .numerics import Tensor

# matrix letter -> (weight name suffix, orientation, module kind)
TARGETS = {
    "V": ("W_V", "col", "mha"),
    "O": ("W_O", "row", "mha"),
    "U": ("W_U", "col", "ffn"),
    "G": ("W_G", "col", "ffn"),
    "D": ("W_D", "row", "ffn"),
}


class InvariantError(ValueError):
    pass


@dataclass
class MonarchMatrix:
    n: int
    d: int
    dfac: np.ndarray | None = None  # [d, d, d]: diag of block (i, j)
    rfac: np.ndarray | None = None  # [d, d]: diag of block j
    dense: np.ndarray | None = None  # fallback when n is not a square
    fallback: bool = False

    @property
    def exact(self) -> bool:
        return not self.fallback

    def param_count(self) -> int:
        if self.fallback:
            return self.n * self.n
        return self.d ** 3 + self.d ** 2

    def arrays(self) -> dict[str, np.ndarray]:
        if self.fallback:
            return {"dense": self.dense}
        return {"Dfactor": self.dfac, "Rfactor": self.rfac}


def init_monarch_zero(n: int, seed: int = 0, std: float = 0.02, dtype=np.float32) -> MonarchMatrix:
    if n < 1:
        raise ValueError("Monarch side length must be >= 1")
    d = math.isqrt(n)
    if d * d != n:
        warnings.warn(f"n={n} is not a perfect square; using a dense zero-initialized M", stacklevel=2)
        return MonarchMatrix(n, 0, dense=np.zeros((n, n), dtype=dtype), fallback=True)
    rng = np.random.default_rng(seed)
    dfac = (rng.standard_normal((d, d, d)) * std).astype(dtype)
    rfac = np.zeros((d, d), dtype=dtype)
    return MonarchMatrix(n, d, dfac=dfac, rfac=rfac)


def monarch_materialize(m: MonarchMatrix) -> np.ndarray:
    if m.fallback:
        return m.dense
    return nx.monarch_dense(Tensor(m.dfac), Tensor(m.rfac)).data


def monarch_factors_dense(m: MonarchMatrix) -> tuple[np.ndarray, np.ndarray]:
    """The two n x n factors as explicit block matrices."""
    d, n = m.d, m.n
    left = np.zeros((n, n), dtype=m.dfac.dtype)
    right = np.zeros((n, n), dtype=m.rfac.dtype)
    for i in range(d):
        for j in range(d):
            left[i * d:(i + 1) * d, j * d:(j + 1) * d] = np.diag(m.dfac[i, j])
        right[i * d:(i + 1) * d, i * d:(i + 1) * d] = np.diag(m.rfac[i])
    return left, right


def monarch_apply(m: MonarchMatrix, x: np.ndarray) -> np.ndarray:
    """``x @ M`` for x of shape [..., n] without forming M."""
    if m.fallback:
        return x @ m.dense
    d = m.d
    xs = x.reshape(x.shape[:-1] + (d, d))  # [..., i, p]
    z = np.einsum("...ip,ijp->...jp", xs, m.dfac)
    y = z * m.rfac
    return y.reshape(x.shape)


@dataclass
class ExpansionOperator:
    layer: int
    matrix: str  # one of TARGETS
    pos: np.ndarray  # flat indices into the expanded axis
    neg: np.ndarray
    monarch: MonarchMatrix
    trainable: bool = True
    fused: bool = False

    @property
    def weight_name(self) -> str:
        return f"layer{self.layer}.{TARGETS[self.matrix][0]}"

    @property
    def orientation(self) -> str:
        return TARGETS[self.matrix][1]

    @property
    def prefix(self) -> str:
        return f"layer{self.layer}.op.{self.matrix}"

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {f"{self.prefix}.{k}": v for k, v in self.monarch.arrays().items()}

    def m_tensor(self, factors: dict[str, Tensor] | None = None) -> Tensor:
        arrays = self.monarch.arrays()
        if factors is None:
            factors = {f"{self.prefix}.{k}": Tensor(v) for k, v in arrays.items()}
        if self.monarch.fallback:
            return factors[f"{self.prefix}.dense"]
        return nx.monarch_dense(factors[f"{self.prefix}.Dfactor"], factors[f"{self.prefix}.Rfactor"])

    def apply(self, w: Tensor, factors: dict[str, Tensor] | None = None) -> Tensor:
        m = self.m_tensor(factors)
        kernel = nx.expand_cols if self.orientation == "col" else nx.expand_rows
        return kernel(w, self.pos, self.neg, m)


def expanded_weight(w: np.ndarray, op: ExpansionOperator) -> np.ndarray:
    axis_len = w.shape[1] if op.orientation == "col" else w.shape[0]
    if len(op.pos) != op.monarch.n or len(op.neg) != op.monarch.n:
        raise nx.ShapeError(f"{op.prefix}: slice sizes differ from M side {op.monarch.n}")
    if max(op.pos.max(), op.neg.max()) >= axis_len:
        raise nx.ShapeError(f"{op.prefix}: index beyond axis of length {axis_len}")
    return op.apply(Tensor(w)).data


def head_span(heads, d_head: int) -> np.ndarray:
    heads = np.asarray(heads, dtype=np.int64)
    if heads.size == 0:
        return heads
    return (heads[:, None] * d_head + np.arange(d_head)[None, :]).ravel()


@dataclass
class OperatorBundle:
    operators: list[ExpansionOperator] = field(default_factory=list)

    def __iter__(self):
        return iter(self.operators)

    def __len__(self):
        return len(self.operators)

    def live(self) -> list[ExpansionOperator]:
        return [op for op in self.operators if not op.fused]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for op in self.live():
            out.update(op.named_arrays())
        return out

    def param_count(self) -> int:
        return sum(op.monarch.param_count() for op in self.live())

    def factor_tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.named_arrays().items()}

    def effective_weights(self, w: dict[str, Tensor], factors: dict[str, Tensor] | None = None) -> dict[str, Tensor]:
        out = dict(w)
        for op in self.live():
            out[op.weight_name] = op.apply(out[op.weight_name], factors)
        return out


def attach_operators(params: ModelParams, sets: AdvantageSets, seed: int = 0,
                     std: float = 0.02) -> OperatorBundle:
    """Five zero-initialized operators per layer: V, O (head spans), U, G, D (channels)."""
    sets.validate()
    cfg = params.cfg
    bundle = OperatorBundle()
    rng = np.random.default_rng(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        for layer in range(cfg.n_layers):
            for letter, (_, _, kind) in TARGETS.items():
                p, q = sets.pos(layer, kind), sets.neg(layer, kind)
                if np.intersect1d(p, q).size:
                    raise InvariantError(f"layer {layer} {kind}: P and N spans overlap")
                if kind == "mha":
                    p, q = head_span(p, cfg.d_head), head_span(q, cfg.d_head)
                m = init_monarch_zero(len(p), seed=int(rng.integers(2 ** 31)), std=std, dtype=params.dtype)
                bundle.operators.append(ExpansionOperator(layer, letter, p.copy(), q.copy(), m))
    return bundle


def fuse_operator(params: ModelParams, op: ExpansionOperator) -> ModelParams:
    """Fold ``op`` into its weight in place and mark it consumed."""
    if op.fused:
        raise StateError(f"{op.prefix} already fused")
    params[op.weight_name] = expanded_weight(params[op.weight_name], op)
    op.fused = True
    return params


def fuse_all(params: ModelParams, bundle: OperatorBundle) -> ModelParams:
    for op in bundle.live():
        fuse_operator(params, op)
    bundle.operators = []
    return params
