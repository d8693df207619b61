"""Advantage scoring from activation norms.

Each sample votes +1 for the components whose norm ranks in its Top-k and -1
for those in its Min-k. Accumulated votes pick the advantageous (P) and
disadvantageous (N) index sets for every MHA and FFN module.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .model import ConfigError, ModelConfig, ModelParams

KINDS = ("mha", "ffn")


class StateError(RuntimeError):
    pass


def component_count(n_components: int, k: float) -> int:
    """floor(n * k), at least 1. ``k`` is a proportion in (0, 0.25]."""
    if not 0 < k <= 0.25:
        raise ConfigError(f"threshold proportion {k} outside (0, 0.25]")
    return max(1, int(np.floor(n_components * k + 1e-9)))


def top_min_indices(values: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the k largest and, among the rest, the k smallest.

    Ties go to the lower index in both directions.
    """
    values = np.asarray(values)
    n = values.shape[-1]
    if 2 * k > n:
        raise ConfigError(f"cannot pick disjoint top/min sets of {k} from {n} components")
    top = np.argsort(-values, kind="stable")[:k]
    rest = np.ones(n, dtype=bool)
    rest[top] = False
    cand = np.flatnonzero(rest)
    low = cand[np.argsort(values[cand], kind="stable")[:k]]
    return np.sort(top), np.sort(low)


def _batched_votes(norms: np.ndarray, k: int) -> np.ndarray:
    """Vote counts summed over the rows of ``norms`` ([B, n])."""
    b, n = norms.shape
    if 2 * k > n:
        if n == 1:
            return np.zeros(1, dtype=np.int64)
        raise ConfigError(f"cannot pick disjoint top/min sets of {k} from {n} components")
    order_desc = np.argsort(-norms, axis=1, kind="stable")
    top = order_desc[:, :k]
    mask = np.zeros((b, n), dtype=bool)
    np.put_along_axis(mask, top, True, axis=1)
    # push already-chosen components to the end of the ascending order
    keyed = np.where(mask, np.inf, norms)
    low = np.argsort(keyed, axis=1, kind="stable")[:, :k]
    delta = np.zeros(n, dtype=np.int64)
    np.add.at(delta, top.ravel(), 1)
    np.add.at(delta, low.ravel(), -1)
    return delta


@dataclass
class ModuleStats:
    scores: np.ndarray
    norm_sum: np.ndarray
    count: int = 0

    @classmethod
    def empty(cls, n: int) -> "ModuleStats":
        return cls(np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.float64), 0)

    def mean_norms(self) -> np.ndarray:
        if self.count == 0:
            raise StateError("no samples recorded")
        return self.norm_sum / self.count


@dataclass
class ActivationLedger:
    n_layers: int
    n_heads: int
    d_ffn: int
    k_mha: float
    k_ffn: float
    modules: dict[tuple[int, str], ModuleStats] = field(default_factory=dict)

    def __post_init__(self):
        if not self.modules:
            self.reset()

    @property
    def samples_seen(self) -> int:
        return max((m.count for m in self.modules.values()), default=0)

    @classmethod
    def for_config(cls, cfg: ModelConfig, k_mha: float, k_ffn: float) -> "ActivationLedger":
        return cls(cfg.n_layers, cfg.n_heads, cfg.d_ffn, k_mha, k_ffn)

    def reset(self) -> None:
        self.modules = {}
        for i in range(self.n_layers):
            self.modules[(i, "mha")] = ModuleStats.empty(self.n_heads)
            self.modules[(i, "ffn")] = ModuleStats.empty(self.d_ffn)

    def n_components(self, kind: str) -> int:
        return self.n_heads if kind == "mha" else self.d_ffn

    def threshold(self, kind: str) -> float:
        return self.k_mha if kind == "mha" else self.k_ffn

    def copy(self) -> "ActivationLedger":
        mods = {key: ModuleStats(m.scores.copy(), m.norm_sum.copy(), m.count) for key, m in self.modules.items()}
        return ActivationLedger(self.n_layers, self.n_heads, self.d_ffn, self.k_mha, self.k_ffn, mods)

    def record_trace(self, trace) -> None:
        """Fold every sample of a probed forward into the ledger."""
        for i in range(self.n_layers):
            update_scores(self, i, "mha", trace.mha_head_norms[i])
            update_scores(self, i, "ffn", trace.ffn_channel_norms[i])


def update_scores(ledger: ActivationLedger, layer: int, kind: str, norms) -> ActivationLedger:
    """Add the Top-k/Min-k votes of one sample ([n]) or a batch ([B, n])."""
    norms = np.asarray(norms, dtype=np.float64)
    if norms.ndim == 1:
        norms = norms[None, :]
    stats = ledger.modules[(layer, kind)]
    n = stats.scores.shape[0]
    if norms.shape[1] != n:
        raise ValueError(f"expected {n} norms for layer {layer} {kind}, got {norms.shape[1]}")
    k = component_count(n, ledger.threshold(kind))
    stats.scores += _batched_votes(norms, k)
    for row in norms:  # fixed accumulation order
        stats.norm_sum += row
    stats.count += norms.shape[0]
    return ledger


def recount_scores(norm_history: np.ndarray, k: float) -> np.ndarray:
    """Brute-force score oracle: loop over samples, rank each from scratch."""
    norm_history = np.asarray(norm_history)
    n = norm_history.shape[1]
    kk = component_count(n, k)
    s = np.zeros(n, dtype=np.int64)
    for row in norm_history:
        ranked = sorted(range(n), key=lambda c: (-row[c], c))
        top = set(ranked[:kk])
        low = [c for c in sorted(range(n), key=lambda c: (row[c], c)) if c not in top][:kk]
        for c in top:
            s[c] += 1
        for c in low:
            s[c] -= 1
    return s


@dataclass
class AdvantageSets:
    """Per-layer P/N indices: heads for ``mha``, channels for ``ffn``."""

    k_mha: float
    k_ffn: float
    sets: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def pos(self, layer: int, kind: str) -> np.ndarray:
        return self.sets[(layer, kind)][0]

    def neg(self, layer: int, kind: str) -> np.ndarray:
        return self.sets[(layer, kind)][1]

    @property
    def n_layers(self) -> int:
        return len({layer for layer, _ in self.sets})

    def validate(self) -> None:
        for (layer, kind), (p, n) in self.sets.items():
            if np.intersect1d(p, n).size:
                raise ValueError(f"layer {layer} {kind}: P and N overlap")
            if len(p) != len(n):
                raise ValueError(f"layer {layer} {kind}: |P| != |N|")


def select_sets(ledger: ActivationLedger, k_mha: float | None = None, k_ffn: float | None = None,
                strategy: str = "rank", seed: int = 0) -> AdvantageSets:
    k_mha = ledger.k_mha if k_mha is None else k_mha
    k_ffn = ledger.k_ffn if k_ffn is None else k_ffn
    if strategy not in ("rank", "avg", "random"):
        raise ConfigError(f"unknown assessment strategy {strategy!r}")
    if strategy != "random" and ledger.samples_seen == 0:
        raise StateError(f"strategy {strategy!r} needs a populated ledger")
    rng = np.random.default_rng(seed)
    out = AdvantageSets(k_mha, k_ffn)
    for i in range(ledger.n_layers):
        for kind, kp in (("mha", k_mha), ("ffn", k_ffn)):
            n = ledger.n_components(kind)
            k = component_count(n, kp)
            if 2 * k > n:
                raise ConfigError(f"{kind} has {n} components; cannot select disjoint sets of {k}")
            stats = ledger.modules[(i, kind)]
            if strategy == "rank":
                p, q = top_min_indices(stats.scores, k)
            elif strategy == "avg":
                p, q = top_min_indices(stats.mean_norms(), k)
            else:
                perm = rng.permutation(n)
                p, q = np.sort(perm[:k]), np.sort(perm[k:2 * k])
            out.sets[(i, kind)] = (p.astype(np.int64), q.astype(np.int64))
    return out


def activation_std_report(ledger: ActivationLedger) -> dict[tuple[int, str], float]:
    """Population std, across components, of each component's mean norm."""
    if ledger.samples_seen == 0:
        raise StateError("activation std needs at least one recorded sample")
    return {key: float(np.std(m.mean_norms())) for key, m in ledger.modules.items()}


def mask_components(params: ModelParams, layer: int, kind: str, indices) -> ModelParams:
    """Copy of ``params`` with the given heads or FFN channels silenced.

    A head is silenced by zeroing its W_V columns and W_O rows; a channel by
    zeroing its W_G column (silu(0) == 0 closes the gate).
    """
    out = params.copy()
    indices = [int(c) for c in indices]
    cfg = params.cfg
    if kind == "mha":
        dh = cfg.d_head
        for h in indices:
            if not 0 <= h < cfg.n_heads:
                raise IndexError(f"head {h} out of range")
            out[f"layer{layer}.W_V"][:, h * dh:(h + 1) * dh] = 0
            out[f"layer{layer}.W_O"][h * dh:(h + 1) * dh, :] = 0
    elif kind == "ffn":
        for c in indices:
            if not 0 <= c < cfg.d_ffn:
                raise IndexError(f"channel {c} out of range")
            out[f"layer{layer}.W_G"][:, c] = 0
    else:
        raise ValueError(f"unknown module kind {kind!r}")
    return out


def mask_fraction(params: ModelParams, ledger: ActivationLedger, which: str, fraction: float,
                  seed: int = 0) -> tuple[ModelParams, dict[tuple[int, str], np.ndarray]]:
    """Mask floor(n * fraction) components per module, ranked by mean norm.

    ``which`` is ``top``, ``min`` or ``random``.
    """
    if not 0 <= fraction <= 1:
        raise ConfigError(f"fraction {fraction} outside [0, 1]")
    if which not in ("top", "min", "random"):
        raise ConfigError(f"unknown mask selection {which!r}")
    rng = np.random.default_rng(seed)
    masked = params
    chosen = {}
    for (layer, kind), stats in sorted(ledger.modules.items()):
        n = stats.scores.shape[0]
        cnt = int(np.floor(n * fraction + 1e-9))
        if which == "random":
            idx = np.sort(rng.permutation(n)[:cnt])
        else:
            mean = stats.mean_norms()
            order = np.argsort(-mean if which == "top" else mean, kind="stable")
            idx = np.sort(order[:cnt])
        chosen[(layer, kind)] = idx
        if cnt:
            masked = mask_components(masked, layer, kind, idx)
    return masked, chosen


PROBE_FIELDS = ("layer", "module", "component", "mean_norm", "score")
STD_FIELDS = ("layer", "module", "std")


def probe_rows(ledger: ActivationLedger) -> list[dict]:
    rows = []
    for (layer, kind), stats in sorted(ledger.modules.items()):
        means = stats.mean_norms()
        for c in range(len(means)):
            rows.append({"layer": layer, "module": kind, "component": c,
                         "mean_norm": float(means[c]), "score": int(stats.scores[c])})
    return rows


def std_rows(ledger: ActivationLedger) -> list[dict]:
    return [{"layer": layer, "module": kind, "std": std}
            for (layer, kind), std in sorted(activation_std_report(ledger).items())]


def rows_to_csv(rows: list[dict], fieldnames) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fieldnames), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    return buf.getvalue()
