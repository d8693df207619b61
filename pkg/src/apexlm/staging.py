"""Stage-wise training: assess, expand, train, fuse.

Each stage selects P/N sets from the previous stage's ledger, attaches fresh
zero-initialized operators, trains while recording a new ledger, and folds
the operators back into the weights. Optimizer moments are reset at every
stage boundary because fusion rewrites the N slices.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import numerics as nx
from .assessment import ActivationLedger, AdvantageSets, select_sets
from .expansion import TARGETS, OperatorBundle, attach_operators, fuse_all, head_span
from .harness.data import BatchStream, Corpus, windows
from .model import ConfigError, DataError, ModelConfig, ModelParams, forward_tensors, init_params, sequence_nll
from .numerics import GradTape, ShapeError, Tensor

log = logging.getLogger(__name__)

# learning-rate multipliers per stage, a decaying step pattern
DEFAULT_STAGE_DECAY = (1.0, 0.25, 0.125, 0.025)


@dataclass
class StagePlan:
    stages: int = 3
    tokens_per_stage: int = 1 << 16
    k_mha: float = 0.125
    k_ffn: float = 0.125
    score_k_mha: float | None = None
    score_k_ffn: float | None = None
    mode: str = "full"
    strategy: str = "rank"
    expansion: bool = True
    lr: float = 3e-3
    stage_lrs: tuple[float, ...] | None = None
    warmup_steps: int = 0
    batch_size: int = 16
    seq_len: int = 64
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    act_regu_lambda: float = 0.0
    pre_assess_samples: int = 64
    eval_tokens: int = 8192
    eval_interval: int = 100
    operator_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        if self.mode not in ("full", "partial"):
            raise ConfigError(f"unknown trainability mode {self.mode!r}")
        if self.strategy not in ("rank", "avg", "random"):
            raise ConfigError(f"unknown assessment strategy {self.strategy!r}")
        for name in ("k_mha", "k_ffn"):
            k = getattr(self, name)
            if not 0 <= k <= 0.25:
                raise ConfigError(f"{name}={k} outside [0, 0.25]")
        if self.tokens_per_stage < self.batch_size * self.seq_len:
            raise ConfigError("tokens_per_stage must cover at least one batch")
        if self.act_regu_lambda < 0:
            raise ConfigError("act_regu_lambda must be >= 0")
        if self.mode == "partial" and not self.expansion_enabled:
            raise ConfigError("partial mode requires expansion to be enabled")

    @property
    def expansion_enabled(self) -> bool:
        return self.expansion and (self.k_mha > 0 or self.k_ffn > 0)

    @property
    def steps_per_stage(self) -> int:
        return self.tokens_per_stage // (self.batch_size * self.seq_len)

    def lr_for_stage(self, t: int) -> float:
        if self.stage_lrs:
            return self.stage_lrs[min(t, len(self.stage_lrs) - 1)]
        return self.lr * DEFAULT_STAGE_DECAY[min(t, len(DEFAULT_STAGE_DECAY) - 1)]

    def score_threshold(self, kind: str) -> float:
        explicit = self.score_k_mha if kind == "mha" else self.score_k_ffn
        if explicit is not None:
            return explicit
        k = self.k_mha if kind == "mha" else self.k_ffn
        return k if k > 0 else 0.125

    def new_ledger(self, cfg: ModelConfig) -> ActivationLedger:
        return ActivationLedger.for_config(cfg, self.score_threshold("mha"), self.score_threshold("ffn"))

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "stage_lrs":
                v = "" if v is None else ",".join(repr(float(x)) for x in v)
            elif v is None:
                v = ""
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = d[f.name]
            if f.name == "stage_lrs":
                kw[f.name] = tuple(float(x) for x in str(raw).split(",") if x) or None
            elif f.name in ("score_k_mha", "score_k_ffn"):
                kw[f.name] = None if raw in ("", None) else float(raw)
            elif isinstance(f.default, bool):
                kw[f.name] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes")
            elif isinstance(f.default, int):
                kw[f.name] = int(raw)
            elif isinstance(f.default, float):
                kw[f.name] = float(raw)
            else:
                kw[f.name] = str(raw)
        return cls(**kw)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0
    no_decay: set[str] = field(default_factory=set)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def reset(self) -> None:
        self.m.clear()
        self.v.clear()
        self.step = 0


def adamw_step(state: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               mask: "TrainabilityMask | None" = None) -> dict[str, np.ndarray]:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    Coordinates frozen by ``mask`` are left bitwise untouched.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        where = True if mask is None else mask.get(name)
        if where is False:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and name not in state.no_decay:
            np.multiply(p, 1.0 - state.lr * state.weight_decay, out=p, where=where)
        np.subtract(p, (state.lr * update).astype(p.dtype), out=p, where=where)
    return params


# ---------------------------------------------------------------------------
# trainability
# ---------------------------------------------------------------------------

@dataclass
class TrainabilityMask:
    """Per tensor: True (trainable), False (frozen) or a boolean coordinate mask."""

    entries: dict[str, bool | np.ndarray] = field(default_factory=dict)

    def get(self, name: str):
        return self.entries.get(name, False)

    def requires_grad(self, name: str) -> bool:
        e = self.get(name)
        return bool(e) if isinstance(e, bool) else bool(e.any())

    def trainable_count(self, arrays: dict[str, np.ndarray]) -> int:
        total = 0
        for name, arr in arrays.items():
            e = self.get(name)
            total += arr.size if e is True else (int(e.sum()) if isinstance(e, np.ndarray) else 0)
        return total

    def fraction(self, arrays: dict[str, np.ndarray]) -> float:
        total = sum(a.size for a in arrays.values())
        return self.trainable_count(arrays) / total


def build_trainability_mask(params: ModelParams, sets: AdvantageSets | None, mode: str,
                            bundle: OperatorBundle | None = None) -> TrainabilityMask:
    mask = TrainabilityMask()
    op_arrays = bundle.named_arrays() if bundle is not None else {}
    if mode == "full":
        for name in params:
            mask.entries[name] = True
    elif mode == "partial":
        if sets is None:
            raise ConfigError("partial mode needs advantage sets")
        cfg = params.cfg
        for name, arr in params.tensors.items():
            mask.entries[name] = False
        for layer in range(cfg.n_layers):
            for letter, (wname, orient, kind) in TARGETS.items():
                if (layer, kind) not in sets.sets:
                    continue
                idx = np.concatenate([sets.pos(layer, kind), sets.neg(layer, kind)])
                if kind == "mha":
                    idx = head_span(idx, cfg.d_head)
                full = f"layer{layer}.{wname}"
                m = np.zeros(params[full].shape, dtype=bool)
                if orient == "col":
                    m[:, idx] = True
                else:
                    m[idx, :] = True
                mask.entries[full] = m
    else:
        raise ConfigError(f"unknown trainability mode {mode!r}")
    for name in op_arrays:
        mask.entries[name] = True
    return mask


# ---------------------------------------------------------------------------
# losses and passes
# ---------------------------------------------------------------------------

def act_regu_penalty(trace, lam: float) -> Tensor | None:
    """lam * mean over modules of the population std of batch-mean component norms."""
    if lam < 0:
        raise ConfigError("activation regularization weight must be >= 0")
    if lam == 0:
        return None
    stds = []
    for t in list(trace.mha_tensors) + list(trace.ffn_tensors):
        stds.append(nx.std_population(nx.mean(t, axis=0)))
    total = stds[0]
    for s in stds[1:]:
        total = nx.add(total, s)
    return nx.scale(total, lam / len(stds))


def pre_assess(params: ModelParams, samples: np.ndarray, k_mha: float, k_ffn: float,
               batch_size: int = 16, operators: OperatorBundle | None = None) -> ActivationLedger:
    """Forward-only probing over [N, L(+1)] samples; params are not touched."""
    samples = np.asarray(samples, dtype=np.int64)
    if samples.ndim != 2 or len(samples) == 0:
        raise DataError("pre-assessment needs a non-empty [N, L] sample array")
    ledger = ActivationLedger.for_config(params.cfg, k_mha, k_ffn)
    w = {k: Tensor(v) for k, v in params.tensors.items()}
    if operators is not None:
        w = operators.effective_weights(w)
    for s in range(0, len(samples), batch_size):
        chunk = samples[s:s + batch_size]
        _, trace = forward_tensors(chunk, w, params.cfg, probe=True)
        ledger.record_trace(trace)
    return ledger


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    if max_norm <= 0:
        return
    sq = 0.0
    for g in grads.values():
        sq += float(np.vdot(g, g))
    norm = math.sqrt(sq)
    if norm > max_norm:
        c = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= c


def train_step(params: ModelParams, batch: np.ndarray, opt: OptimizerState, mask: TrainabilityMask,
               bundle: OperatorBundle | None = None, act_regu_lambda: float = 0.0, grad_clip: float = 1.0,
               ledger: ActivationLedger | None = None) -> float:
    """Forward with probes, backward, one AdamW update. Returns the task loss."""
    cfg = params.cfg
    w = {k: Tensor(v, requires_grad=mask.requires_grad(k), name=k) for k, v in params.tensors.items()}
    factors = bundle.factor_tensors(requires_grad=True) if bundle is not None else {}
    with GradTape() as tape:
        ww = bundle.effective_weights(w, factors) if bundle is not None else w
        logits, trace = forward_tensors(batch[:, :-1], ww, cfg, probe=True)
        loss = nx.cross_entropy_mean(nx.reshape(logits, (-1, cfg.vocab_size)), batch[:, 1:].reshape(-1))
        total = loss
        penalty = act_regu_penalty(trace, act_regu_lambda)
        if penalty is not None:
            total = nx.add(loss, penalty)
    tape.backward(total)
    if ledger is not None:
        ledger.record_trace(trace)
    grads = {k: t.grad for k, t in w.items() if t.grad is not None}
    grads.update({k: t.grad for k, t in factors.items() if t.grad is not None})
    _clip(grads, grad_clip)
    arrays = dict(params.tensors)
    if bundle is not None:
        arrays.update(bundle.named_arrays())
    adamw_step(opt, arrays, grads, mask)
    return float(loss.data)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

METRIC_FIELDS = ("stage", "step", "tokens", "train_loss", "eval_ppl", "wall_ms")


@dataclass
class StageMetrics:
    stage: int
    lr: float
    rows: list[dict] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list)
    ppl_pre_attach: float = float("nan")
    ppl_post_attach: float = float("nan")
    eval_loss_pre_fuse: float = float("nan")
    eval_loss_post_fuse: float = float("nan")
    trainable_fraction: float = 1.0
    n_operators: int = 0
    operator_params: int = 0
    wall_s: float = 0.0
    sets: AdvantageSets | None = None

    @property
    def final_eval_ppl(self) -> float:
        return math.exp(self.eval_loss_post_fuse)


@dataclass
class TrainData:
    train_ids: np.ndarray
    eval_windows: np.ndarray
    stream: BatchStream

    @classmethod
    def from_corpus(cls, corpus: Corpus, plan: StagePlan) -> "TrainData":
        train, held = corpus.split(min(plan.eval_tokens, len(corpus) // 10 or 1))
        stream = BatchStream(train, plan.seq_len, plan.batch_size, seed=plan.seed)
        return cls(train, windows(held, plan.seq_len), stream)

    def assessment_samples(self, n: int) -> np.ndarray:
        return self.stream.win[:n, :-1]


def run_stage(params: ModelParams, plan: StagePlan, stage_index: int, ledger_in: ActivationLedger | None,
              data: TrainData, keep_live: bool = False):
    """One assess -> expand -> train -> fuse cycle.

    Returns ``(params, ledger_out, metrics, bundle)``; the bundle is empty
    after fusion unless ``keep_live`` is set.
    """
    cfg = params.cfg
    t0 = time.perf_counter()
    lr = plan.lr_for_stage(stage_index)
    metrics = StageMetrics(stage_index, lr)
    bundle = None
    sets = None
    metrics.ppl_pre_attach = math.exp(sequence_nll(params, data.eval_windows))
    if plan.expansion_enabled:
        if ledger_in is None:
            raise DataError("expansion needs a populated ledger from pre-assessment or the previous stage")
        sets = select_sets(ledger_in, plan.k_mha or None, plan.k_ffn or None, plan.strategy,
                           seed=plan.seed * 1009 + stage_index)
        sets = _drop_disabled(sets, plan)
        bundle = attach_operators(params, sets, seed=plan.seed * 7919 + stage_index, std=plan.operator_std)
        metrics.sets = sets
        metrics.n_operators = len(bundle)
        metrics.operator_params = bundle.param_count()
    metrics.ppl_post_attach = math.exp(sequence_nll(params, data.eval_windows, operators=bundle))

    mask = build_trainability_mask(params, sets, plan.mode, bundle)
    arrays = dict(params.tensors)
    if bundle is not None:
        arrays.update(bundle.named_arrays())
    metrics.trainable_fraction = mask.fraction(arrays)
    opt = OptimizerState(lr=lr, beta1=plan.beta1, beta2=plan.beta2, eps=plan.adam_eps,
                         weight_decay=plan.weight_decay,
                         no_decay={k for k, v in arrays.items() if v.ndim < 2 or ".op." in k})
    ledger_out = plan.new_ledger(cfg)
    tokens_per_step = plan.batch_size * plan.seq_len
    window_losses = []
    for step in range(1, plan.steps_per_stage + 1):
        if stage_index == 0 and plan.warmup_steps:
            opt.lr = lr * min(1.0, step / plan.warmup_steps)
        batch = data.stream.next()
        loss = train_step(params, batch, opt, mask, bundle, plan.act_regu_lambda, plan.grad_clip, ledger_out)
        metrics.train_losses.append(loss)
        window_losses.append(loss)
        if step % plan.eval_interval == 0 or step == plan.steps_per_stage:
            ppl = math.exp(sequence_nll(params, data.eval_windows, operators=bundle))
            metrics.rows.append({
                "stage": stage_index, "step": step, "tokens": step * tokens_per_step,
                "train_loss": float(np.mean(window_losses)), "eval_ppl": ppl,
                "wall_ms": int((time.perf_counter() - t0) * 1000),
            })
            log.info("stage %d step %d loss %.4f eval ppl %.3f", stage_index, step, window_losses[-1], ppl)
            window_losses = []

    metrics.eval_loss_pre_fuse = sequence_nll(params, data.eval_windows, operators=bundle)
    if bundle is not None and not keep_live:
        fuse_all(params, bundle)
    metrics.eval_loss_post_fuse = sequence_nll(params, data.eval_windows,
                                               operators=bundle if keep_live else None)
    metrics.wall_s = time.perf_counter() - t0
    return params, ledger_out, metrics, bundle


def _drop_disabled(sets: AdvantageSets, plan: StagePlan) -> AdvantageSets:
    keep = {key: v for key, v in sets.sets.items()
            if (plan.k_mha > 0 if key[1] == "mha" else plan.k_ffn > 0)}
    return AdvantageSets(sets.k_mha, sets.k_ffn, keep)


@dataclass
class TrainResult:
    params: ModelParams
    stages: list[StageMetrics]
    ledger: ActivationLedger
    pre_ledger: ActivationLedger | None
    bundle: OperatorBundle | None = None

    @property
    def final_eval_ppl(self) -> float:
        return self.stages[-1].final_eval_ppl

    def metric_rows(self) -> list[dict]:
        return [r for s in self.stages for r in s.rows]


def run_training(cfg: ModelConfig, plan: StagePlan, corpus: Corpus | TrainData,
                 params: ModelParams | None = None, keep_live_last: bool = False) -> TrainResult:
    """Pre-assess, then ``plan.stages`` sequential stages from one checkpoint to the next."""
    data = corpus if isinstance(corpus, TrainData) else TrainData.from_corpus(corpus, plan)
    if params is None:
        params = init_params(cfg)
    pre = None
    ledger = None
    if plan.expansion_enabled:
        pre = pre_assess(params, data.assessment_samples(plan.pre_assess_samples),
                         plan.score_threshold("mha"), plan.score_threshold("ffn"), plan.batch_size)
        ledger = pre
    stages = []
    bundle = None
    for t in range(plan.stages):
        live = keep_live_last and t == plan.stages - 1
        params, ledger, m, bundle = run_stage(params, plan, t, ledger, data, keep_live=live)
        stages.append(m)
    return TrainResult(params, stages, ledger, pre, bundle if keep_live_last else None)
