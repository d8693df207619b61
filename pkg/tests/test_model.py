import math

import numpy as np
import pytest

import oracle
from apexlm import numerics as nx
from apexlm.model import (ConfigError, DataError, ModelConfig, as_tensors, ffn_forward, forward_logits,
                          forward_tensors, init_params, mha_forward, param_count_formula, perplexity, sequence_nll)
from apexlm.numerics import Tensor

TINY = ModelConfig(n_layers=2, d_model=16, n_heads=4, d_ffn=32, vocab_size=32, max_seq_len=12)


def test_init_deterministic():
    a, b = init_params(TINY), init_params(TINY)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_head_blocks():
    p = init_params(ModelConfig(d_model=8, n_heads=2, d_ffn=16))
    assert [p.head_block(0, "W_V", h).shape for h in range(2)] == [(8, 4), (8, 4)]


def test_param_count_matches_closed_form():
    cfg = ModelConfig(n_layers=2, d_model=16, d_ffn=32, vocab_size=256, max_seq_len=64)
    d, f, v, s = 16, 32, 256, 64
    expected = v * d + s * d + 2 * (4 * d * d + 3 * d * f + 2 * d) + d + d * v
    assert init_params(cfg).count() == param_count_formula(cfg) == expected


def test_config_errors():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(activation="relu6")


def test_config_roundtrip_from_strings():
    d = {k: str(v) for k, v in TINY.to_dict().items()}
    assert ModelConfig.from_dict(d) == TINY


def _layer(cfg):
    p = init_params(cfg, dtype=np.float64, std=0.3)
    w = as_tensors(p)
    return p, {k: w[f"layer0.{k}"] for k in ("W_Q", "W_K", "W_V", "W_O", "W_U", "W_G", "W_D")}


def test_single_head_attention_matches_oracle():
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=1, d_ffn=8, max_seq_len=6, seed=3)
    p, w = _layer(cfg)
    x = np.random.default_rng(0).standard_normal((6, 8))
    out, norms = mha_forward(Tensor(x), w, cfg, probe=True)
    ref, ref_norms = oracle.attention(x, *(p[f"layer0.{k}"] for k in ("W_Q", "W_K", "W_V", "W_O")), 1)
    assert np.max(np.abs(out.data - ref)) < 1e-6
    assert np.allclose(norms.data[0], ref_norms, rtol=1e-5)


def test_head_norms_match_elementwise_sum():
    cfg = ModelConfig(n_layers=1, d_model=16, n_heads=4, d_ffn=8, max_seq_len=7, seed=4)
    p, w = _layer(cfg)
    x = np.random.default_rng(1).standard_normal((2, 7, 16))
    _, norms = mha_forward(Tensor(x), w, cfg, probe=True)
    for b in range(2):
        _, ref = oracle.attention(x[b], *(p[f"layer0.{k}"] for k in ("W_Q", "W_K", "W_V", "W_O")), 4)
        assert np.max(np.abs(norms.data[b] - ref) / np.maximum(ref, 1)) < 1e-5


def test_zero_values_give_zero_attention():
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ffn=8, max_seq_len=5)
    _, w = _layer(cfg)
    w["W_V"] = Tensor(np.zeros((8, 8)))
    out, norms = mha_forward(Tensor(np.ones((5, 8))), w, cfg, probe=True)
    assert not out.data.any() and not norms.data.any()


def test_zero_gate_closes_ffn():
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ffn=12, max_seq_len=5)
    _, w = _layer(cfg)
    w["W_G"] = Tensor(np.zeros((8, 12)))
    out, norms = ffn_forward(Tensor(np.ones((5, 8))), w, cfg, probe=True)
    assert not out.data.any() and not norms.data.any()


def test_ffn_identity_down_projection():
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ffn=8, max_seq_len=5)
    _, w = _layer(cfg)
    w["W_D"] = Tensor(np.eye(8))
    w["W_U"] = Tensor(np.zeros((8, 8)))
    w["W_U"].data[0, :] = 1.0
    x = np.zeros((5, 8))
    x[:, 0] = 1.0
    x += np.random.default_rng(2).standard_normal((5, 8)) * np.r_[0, np.ones(7)]
    out, _ = ffn_forward(Tensor(x), w, cfg)
    assert np.allclose(out.data, oracle.silu(x @ w["W_G"].data), atol=1e-12)


def test_channel_norms_match_oracle():
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ffn=12, max_seq_len=5, seed=5)
    p, w = _layer(cfg)
    x = np.random.default_rng(3).standard_normal((3, 5, 8))
    _, norms = ffn_forward(Tensor(x), w, cfg, probe=True)
    for b in range(3):
        _, ref = oracle.glu(x[b], p["layer0.W_U"], p["layer0.W_G"], p["layer0.W_D"])
        assert np.max(np.abs(norms.data[b] - ref)) < 1e-5


def test_forward_single_token_shape_and_determinism():
    p = init_params(TINY)
    logits, _ = forward_logits([5], p)
    assert logits.shape == (1, TINY.vocab_size)
    a, _ = forward_logits(np.arange(10) % 32, p)
    b, _ = forward_logits(np.arange(10) % 32, p)
    assert np.array_equal(a, b)


def test_forward_matches_straight_line_oracle():
    cfg = ModelConfig(n_layers=2, d_model=16, n_heads=4, d_ffn=24, vocab_size=40, max_seq_len=10, seed=7)
    p = init_params(cfg, dtype=np.float64, std=0.2)
    toks = np.random.default_rng(4).integers(0, 40, 9)
    logits, trace = forward_logits(toks, p, probe=True)
    ref, hn, cn = oracle.forward(toks, p.tensors, cfg)
    assert np.max(np.abs(logits - ref)) < 1e-4
    for i in range(2):
        assert np.allclose(trace.mha_head_norms[i][0], hn[i], rtol=1e-8)
        assert np.allclose(trace.ffn_channel_norms[i][0], cn[i], rtol=1e-8)


def test_forward_rejects_bad_tokens():
    with pytest.raises(IndexError):
        forward_logits([0, 32], init_params(TINY))
    with pytest.raises(DataError):
        forward_logits(np.zeros(13, dtype=int), init_params(TINY))


def test_uniform_model_perplexity_is_vocab():
    p = init_params(TINY)
    p["head"][:] = 0
    stream = np.random.default_rng(0).integers(0, 32, 200)
    assert abs(perplexity(p, stream, 10) - 32) < 1e-3


def test_perplexity_matches_definition():
    cfg = ModelConfig(n_layers=1, d_model=16, n_heads=2, d_ffn=16, vocab_size=32, max_seq_len=8, seed=2)
    p = init_params(cfg, dtype=np.float64, std=0.5)
    stream = np.random.default_rng(5).integers(0, 32, 50)
    losses = []
    for s in range(0, 48 - 7, 8):
        w = stream[s:s + 9]
        ref, _, _ = oracle.forward(w[:-1], p.tensors, cfg)
        losses.append(oracle.nll(ref, w[1:]))
    assert abs(perplexity(p, stream, 8) - math.exp(np.mean(losses))) < 1e-4


def test_perplexity_short_stream():
    with pytest.raises(DataError):
        perplexity(init_params(TINY), np.arange(5), 8)


def test_model_gradient_float64():
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ffn=8, vocab_size=16, max_seq_len=6, seed=1)
    p = init_params(cfg, dtype=np.float64, std=0.3)
    w = as_tensors(p)
    toks = np.random.default_rng(0).integers(0, 16, (2, 6))

    def loss():
        logits, _ = forward_tensors(toks[:, :-1], w, cfg)
        return nx.cross_entropy_mean(nx.reshape(logits, (-1, 16)), toks[:, 1:].reshape(-1))

    assert nx.grad_check(loss, w.values(), n_samples=40) < 1e-3
    assert sequence_nll(p, toks) > 0
