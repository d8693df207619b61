"""Singular values, epsilon-numerical rank and rank-bound test cases."""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .model import ConfigError


class NumericError(ArithmeticError):
    pass


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """n-1 rounds of disjoint column pairs covering every pair once (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def svd_small(w, tol: float = 1e-12, max_sweeps: int = 60) -> np.ndarray:
    """Singular values, descending, by one-sided Jacobi in float64.

    Columns are orthogonalized pairwise with Givens rotations; disjoint pairs
    of a round-robin schedule are rotated together. The singular values are
    the final column norms.
    """
    a = np.array(w, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"svd_small expects a matrix, got shape {a.shape}")
    m, n = a.shape
    if max(m, n) > 1024:
        raise ValueError("svd_small is limited to matrices with max(m, n) <= 1024")
    if m == 0 or n == 0:
        return np.zeros(0)
    if n > m:
        a = a.T.copy()
        m, n = n, m
    if n % 2:
        a = np.hstack([a, np.zeros((m, 1))])
    cols = a.shape[1]
    fro2 = float((a * a).sum())
    if fro2 == 0.0:
        return np.zeros(n)
    tiny = (np.finfo(np.float64).eps * 1e-3) ** 2 * fro2
    rounds = _round_robin(cols) if cols > 1 else []

    for sweep in range(1, max_sweeps + 1):
        worst = 0.0
        for p, q in rounds:
            ap, aq = a[:, p], a[:, q]
            alpha = (ap * ap).sum(axis=0)
            beta = (aq * aq).sum(axis=0)
            gamma = (ap * aq).sum(axis=0)
            live = (alpha > tiny) & (beta > tiny)
            denom = np.sqrt(np.where(live, alpha * beta, 1.0))
            off = np.where(live, np.abs(gamma) / denom, 0.0)
            worst = max(worst, float(off.max(initial=0.0)))
            rot = off > tol
            if not rot.any():
                continue
            p, q = p[rot], q[rot]
            alpha, beta, gamma = alpha[rot], beta[rot], gamma[rot]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(zeta == 0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = a[:, p], a[:, q]
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
        if worst <= tol:
            sig = np.sqrt((a * a).sum(axis=0))
            return np.sort(sig)[::-1][:n]
    raise NumericError(f"one-sided Jacobi did not converge in {max_sweeps} sweeps")


def effective_rank(w, eps_rel: float = 0.01, sigma: np.ndarray | None = None) -> int:
    """#{sigma_i >= eps_rel * sigma_1}; 0 for the zero matrix."""
    if not 0 < eps_rel < 1:
        raise ValueError(f"eps_rel {eps_rel} outside (0, 1)")
    sig = svd_small(w) if sigma is None else sigma
    if sig.size == 0 or sig[0] == 0:
        return 0
    return int((sig >= eps_rel * sig[0]).sum())


@dataclass
class RankTestCase:
    m: int
    n: int
    k: int
    rho: int
    delta: int
    s_cols: int
    w_p: np.ndarray  # [m, k]
    w_n: np.ndarray  # [m, n-k]
    m_oracle: np.ndarray  # [k, n-k]
    s_index: np.ndarray  # columns of W_N + U made orthogonal to span(W_P)

    @property
    def u(self) -> np.ndarray:
        return self.w_p @ self.m_oracle

    def base(self) -> np.ndarray:
        return np.hstack([self.w_p, self.w_n])

    def augmented(self) -> np.ndarray:
        return np.hstack([self.w_p, self.w_n + self.u])

    def expected_base_rank(self) -> int:
        return self.k + self.rho - self.delta


def construct_rank_testcase(m: int, n: int, k: int, rho: int, delta: int, s_cols: int,
                            seed: int = 0) -> RankTestCase:
    """Build [W_P, W_N] with rank(W_P)=k, rank(W_N)=rho, dim(span overlap)=delta.

    W_P holds k orthonormal columns. W_N holds delta independent columns
    inside span(W_P), rho-delta fresh orthonormal directions outside it, and
    zero columns. The oracle M cancels the span(W_P) component of s_cols
    columns of W_N (fresh columns first), so those columns of W_N + W_P M are
    orthogonal to span(W_P); the remaining columns of M are random.
    """
    nk = n - k
    if not (0 <= k <= n and 0 <= delta <= rho <= nk):
        raise ConfigError(f"need 0 <= delta <= rho <= n-k (k={k}, rho={rho}, delta={delta}, n={n})")
    if delta > k:
        raise ConfigError(f"overlap dimension delta={delta} cannot exceed k={k}")
    if k + rho - delta > m:
        raise ConfigError(f"k + rho - delta = {k + rho - delta} exceeds m = {m}")
    if not 0 <= s_cols <= min(nk, m - k):
        raise ConfigError(f"s_cols={s_cols} outside [0, min(n-k, m-k)]")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((m, m)))
    w_p = q[:, :k].copy()
    fresh = q[:, k:k + rho - delta]
    inside = w_p @ np.linalg.qr(rng.standard_normal((k, delta)))[0] if delta else np.zeros((m, 0))
    w_n = np.zeros((m, nk))
    w_n[:, :rho - delta] = fresh
    w_n[:, rho - delta:rho] = inside
    s_index = np.arange(s_cols)
    m_or = rng.standard_normal((k, nk)) * 0.1
    if k:
        m_or[:, s_index] = -(w_p.T @ w_n[:, s_index])
    return RankTestCase(m, n, k, rho, delta, s_cols, w_p, w_n, m_or, s_index)


@dataclass
class SpectrumReport:
    checkpoint: str
    layer: str
    matrix: str
    singular_values: np.ndarray
    eps_rel: float
    eff_rank: int

    @property
    def sigma_max(self) -> float:
        return float(self.singular_values[0]) if self.singular_values.size else 0.0


RANK_FIELDS = ("checkpoint", "layer", "matrix", "sigma_max", "eff_rank", "eps_rel")
_LAYER_RE = re.compile(r"^layer(\d+)\.(.+)$")


def _resolve(names: Sequence[str], tensors: Mapping[str, np.ndarray]) -> list[str]:
    out = []
    for name in names:
        if name in tensors:
            out.append(name)
            continue
        # bare matrix kind ("W_V") expands to every layer
        hits = sorted((k for k in tensors if _LAYER_RE.match(k) and _LAYER_RE.match(k).group(2) == name),
                      key=lambda k: int(_LAYER_RE.match(k).group(1)))
        if not hits:
            raise KeyError(f"no matrix named {name!r}")
        out.extend(hits)
    return out


def rank_report(history: Sequence[tuple[str, Mapping[str, np.ndarray]]], matrices: Sequence[str],
                eps_rel: float = 0.01) -> list[SpectrumReport]:
    """Effective rank of each requested matrix at each checkpoint."""
    if not history:
        raise ValueError("rank_report needs at least one checkpoint")
    reports = []
    for ckpt, tensors in history:
        tensors = getattr(tensors, "tensors", tensors)
        for name in _resolve(matrices, tensors):
            mt = _LAYER_RE.match(name)
            layer, matrix = (mt.group(1), mt.group(2)) if mt else ("", name)
            sig = svd_small(tensors[name])
            reports.append(SpectrumReport(ckpt, layer, matrix, sig, eps_rel,
                                          effective_rank(None, eps_rel, sigma=sig)))
    return reports


def rank_report_csv(reports: Sequence[SpectrumReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RANK_FIELDS)
    for r in reports:
        writer.writerow([r.checkpoint, r.layer, r.matrix, f"{r.sigma_max:.9g}", r.eff_rank, r.eps_rel])
    return buf.getvalue()
