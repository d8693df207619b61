"""Straight-line float64 references, written without the tape or batching."""

import math

import numpy as np


def rms(x, g, eps):
    return x / np.sqrt(np.mean(x * x) + eps) * g


def silu(z):
    return z / (1.0 + np.exp(-z))


def attention(x, wq, wk, wv, wo, n_heads):
    """x: [L, d]. Returns (out [L, d], head_norms [H])."""
    L, d = x.shape
    dh = d // n_heads
    out = np.zeros((L, d))
    norms = np.zeros(n_heads)
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        q, k, v = x @ wq[:, sl], x @ wk[:, sl], x @ wv[:, sl]
        head = np.zeros((L, dh))
        for i in range(L):
            s = np.array([q[i] @ k[j] / math.sqrt(dh) for j in range(i + 1)])
            p = np.exp(s - s.max())
            p /= p.sum()
            head[i] = sum(p[j] * v[j] for j in range(i + 1))
        norms[h] = float(np.sum(head * head))
        out += head @ wo[sl, :]
    return out, norms


def glu(x, wu, wg, wd):
    gate = silu(x @ wg)
    return ((x @ wu) * gate) @ wd, np.sum(gate * gate, axis=0)


def forward(tokens, tensors, cfg):
    """Logits [L, V] for one sequence, plus per-layer head and channel norms."""
    t = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
    L = len(tokens)
    x = t["tok_emb"][tokens] + t["pos_emb"][:L]
    head_norms, chan_norms = [], []
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        xn = np.stack([rms(r, t[p + "norm1"], cfg.norm_eps) for r in x])
        a, hn = attention(xn, t[p + "W_Q"], t[p + "W_K"], t[p + "W_V"], t[p + "W_O"], cfg.n_heads)
        x = x + a
        xn = np.stack([rms(r, t[p + "norm2"], cfg.norm_eps) for r in x])
        f, cn = glu(xn, t[p + "W_U"], t[p + "W_G"], t[p + "W_D"])
        x = x + f
        head_norms.append(hn)
        chan_norms.append(cn)
    xn = np.stack([rms(r, t["norm_f"], cfg.norm_eps) for r in x])
    return xn @ t["head"], head_norms, chan_norms


def nll(logits, targets):
    m = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
    return float(np.mean(lse - logits[np.arange(len(targets)), targets]))
