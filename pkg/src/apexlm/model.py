"""Toy decoder-only GLU transformer with activation probes.

Pre-norm residual blocks, RMS normalization, learned absolute positions,
causal multi-head attention and a gated FFN. With ``probe=True`` the forward
pass also returns, per layer and per sample, the squared Frobenius norm of
every head output and of every post-activation FFN channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


MATRIX_KINDS = ("W_Q", "W_K", "W_V", "W_O", "W_U", "W_G", "W_D")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    vocab_size: int = 260
    max_seq_len: int = 64
    seed: int = 0
    activation: str = "silu"
    norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ffn", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.activation not in nx.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                kw[f.name] = _cast(f, d[f.name])
        return cls(**kw)


def _cast(f, value):
    default = f.default
    if isinstance(default, bool):
        return value in (True, "1", "true", "True")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ffn
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_seq_len, d)}
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        shapes.update({
            p + "norm1": (d,),
            p + "W_Q": (d, d), p + "W_K": (d, d), p + "W_V": (d, d), p + "W_O": (d, d),
            p + "norm2": (d,),
            p + "W_U": (d, f), p + "W_G": (d, f), p + "W_D": (f, d),
        })
    shapes["norm_f"] = (d,)
    shapes["head"] = (d, cfg.vocab_size)
    return shapes


def param_count_formula(cfg: ModelConfig) -> int:
    d, f, v = cfg.d_model, cfg.d_ffn, cfg.vocab_size
    per_layer = 4 * d * d + 3 * d * f + 2 * d
    return v * d + cfg.max_seq_len * d + cfg.n_layers * per_layer + d + d * v


@dataclass
class ModelParams:
    cfg: ModelConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    def __iter__(self):
        return iter(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.tensors.items()})

    def count(self) -> int:
        return sum(int(v.size) for v in self.tensors.values())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.astype(dtype) for k, v in self.tensors.items()})

    @property
    def dtype(self):
        return self.tensors["head"].dtype

    def head_block(self, layer: int, kind: str, head: int) -> np.ndarray:
        """View of one head's slice: columns of W_Q/W_K/W_V, rows of W_O."""
        dh = self.cfg.d_head
        w = self.tensors[f"layer{layer}.{kind}"]
        span = slice(head * dh, (head + 1) * dh)
        return w[span, :] if kind == "W_O" else w[:, span]


def init_params(cfg: ModelConfig, dtype=np.float32, std: float = 0.02) -> ModelParams:
    rng = np.random.default_rng(cfg.seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            tensors[name] = np.ones(shape, dtype=dtype)
        else:
            tensors[name] = (rng.standard_normal(shape) * std).astype(dtype)
    return ModelParams(cfg, tensors)


@dataclass
class ForwardTrace:
    """Per-layer per-sample activation norms; arrays are [batch, components]."""

    mha_head_norms: list[np.ndarray] = field(default_factory=list)
    ffn_channel_norms: list[np.ndarray] = field(default_factory=list)
    # graph-connected copies, for penalties that need gradients
    mha_tensors: list[Tensor] = field(default_factory=list, repr=False)
    ffn_tensors: list[Tensor] = field(default_factory=list, repr=False)
    logits: np.ndarray | None = None


def _causal_bias(length: int, dtype) -> np.ndarray:
    mask = np.triu(np.ones((length, length), dtype=bool), k=1)
    return np.where(mask, -np.inf, 0.0).astype(dtype)


def mha_forward(x: Tensor, w: dict[str, Tensor], cfg: ModelConfig, probe: bool = False):
    """Causal multi-head attention. ``x`` is [B, L, d] (or [L, d]).

    Returns ``(out, head_norms)`` where head_norms is a [B, H] tensor of
    squared Frobenius norms of each head's L x d_head output, or None.
    """
    squeeze = x.data.ndim == 2
    if squeeze:
        x = nx.reshape(x, (1,) + x.dims)
    b, length, d = x.dims
    h, dh = cfg.n_heads, cfg.d_head

    def heads(t):
        return nx.transpose(nx.reshape(t, (b, length, h, dh)), (0, 2, 1, 3))

    q = heads(nx.matmul(x, w["W_Q"]))
    k = heads(nx.matmul(x, w["W_K"]))
    v = heads(nx.matmul(x, w["W_V"]))
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    scores = nx.add(scores, _causal_bias(length, x.dtype))
    att = nx.softmax(scores)
    out_heads = nx.matmul(att, v)  # [B, H, L, dh]
    norms = nx.sum(nx.square(out_heads), axis=(2, 3)) if probe else None
    merged = nx.reshape(nx.transpose(out_heads, (0, 2, 1, 3)), (b, length, d))
    out = nx.matmul(merged, w["W_O"])
    if squeeze:
        out = nx.reshape(out, (length, d))
    return out, norms


def ffn_forward(x: Tensor, w: dict[str, Tensor], cfg: ModelConfig, probe: bool = False):
    """Gated FFN ``((x W_U) * f(x W_G)) W_D``; channel norms are [B, d_ffn]."""
    squeeze = x.data.ndim == 2
    if squeeze:
        x = nx.reshape(x, (1,) + x.dims)
    act = nx.ACTIVATIONS[cfg.activation]
    up = nx.matmul(x, w["W_U"])
    gate = act(nx.matmul(x, w["W_G"]))
    norms = nx.sum(nx.square(gate), axis=1) if probe else None
    out = nx.matmul(nx.mul(up, gate), w["W_D"])
    if squeeze:
        out = nx.reshape(out, out.dims[1:])
    return out, norms


def forward_tensors(tokens: np.ndarray, w: dict[str, Tensor], cfg: ModelConfig, probe: bool = False):
    """Differentiable forward over a [B, L] token batch -> ([B, L, V] logits, trace)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    b, length = tokens.shape
    if length > cfg.max_seq_len:
        raise DataError(f"sequence length {length} exceeds max_seq_len {cfg.max_seq_len}")
    x = nx.add(nx.embedding(w["tok_emb"], tokens), _pos_slice(w["pos_emb"], length))
    trace = ForwardTrace() if probe else None
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        lw = {k: w[p + k] for k in MATRIX_KINDS}
        a, hn = mha_forward(nx.rms_norm(x, w[p + "norm1"], cfg.norm_eps), lw, cfg, probe)
        x = nx.add(x, a)
        f, cn = ffn_forward(nx.rms_norm(x, w[p + "norm2"], cfg.norm_eps), lw, cfg, probe)
        x = nx.add(x, f)
        if probe:
            trace.mha_tensors.append(hn)
            trace.ffn_tensors.append(cn)
            trace.mha_head_norms.append(hn.data.copy())
            trace.ffn_channel_norms.append(cn.data.copy())
    logits = nx.matmul(nx.rms_norm(x, w["norm_f"], cfg.norm_eps), w["head"])
    return logits, trace


def _pos_slice(pos: Tensor, length: int) -> Tensor:
    full = pos.dims[0]
    if length == full:
        return pos

    def back(g):
        gp = np.zeros_like(pos.data)
        gp[:length] = g
        return (gp,)

    return nx._emit(pos.data[:length], (pos,), back)


def as_tensors(params: ModelParams, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.tensors.items()}


def forward_logits(tokens, params: ModelParams, probe: bool = False, operators=None):
    """Logits for ``tokens`` ([L] or [B, L]) plus a ForwardTrace when probing.

    ``operators`` (an expansion bundle) are applied live when given.
    """
    tok = np.asarray(tokens, dtype=np.int64)
    single = tok.ndim == 1
    if single:
        tok = tok[None, :]
    if tok.size and (tok.min() < 0 or tok.max() >= params.cfg.vocab_size):
        raise IndexError(f"token id out of range [0, {params.cfg.vocab_size})")
    w = as_tensors(params)
    if operators is not None:
        w = operators.effective_weights(w)
    logits, trace = forward_tensors(tok, w, params.cfg, probe)
    out = logits.data[0] if single else logits.data
    if trace is not None:
        trace.logits = out
    return out, trace


def sequence_nll(params: ModelParams, windows: np.ndarray, batch_size: int = 32, operators=None) -> float:
    """Mean next-token NLL over [N, L+1] windows."""
    total, count = 0.0, 0
    for s in range(0, len(windows), batch_size):
        chunk = windows[s:s + batch_size]
        logits, _ = forward_logits(chunk[:, :-1], params, operators=operators)
        v = logits.shape[-1]
        loss = nx.cross_entropy_mean(Tensor(logits.reshape(-1, v)), chunk[:, 1:].reshape(-1))
        n = chunk[:, 1:].size
        total += float(loss.data) * n
        count += n
    return total / count


def make_windows(stream, seq_len: int) -> np.ndarray:
    """Windows of ``seq_len + 1`` tokens at stride ``seq_len``; tail dropped."""
    stream = np.asarray(stream, dtype=np.int64)
    n = (len(stream) - 1) // seq_len
    if n < 1:
        raise DataError(f"stream of {len(stream)} tokens too short for seq_len {seq_len}")
    idx = np.arange(n)[:, None] * seq_len + np.arange(seq_len + 1)[None, :]
    return stream[idx]


def perplexity(params: ModelParams, stream, seq_len: int, operators=None) -> float:
    if len(stream) <= seq_len:
        raise DataError(f"stream of {len(stream)} tokens too short for seq_len {seq_len}")
    return math.exp(sequence_nll(params, make_windows(stream, seq_len), operators=operators))
