import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracle
from apexlm.assessment import (PROBE_FIELDS, ActivationLedger, ModuleStats, StateError, activation_std_report,
                               component_count, mask_components, mask_fraction, probe_rows, recount_scores,
                               rows_to_csv, select_sets, std_rows, top_min_indices, update_scores)
from apexlm.model import ConfigError, ModelConfig, forward_logits, init_params


def test_component_count():
    assert component_count(32, 0.1875) == 6
    assert component_count(16, 0.125) == 2
    assert component_count(4, 0.01) == 1
    for bad in (0.0, 0.3, -0.1):
        with pytest.raises(ConfigError):
            component_count(8, bad)


def test_single_sample_votes():
    led = ActivationLedger(1, 4, 8, 0.25, 0.25)
    update_scores(led, 0, "mha", np.array([4.0, 1.0, 2.0, 3.0]))
    assert led.modules[(0, "mha")].scores.tolist() == [1, -1, 0, 0]


def test_reversed_rankings_cancel():
    led = ActivationLedger(1, 4, 8, 0.25, 0.25)
    x = np.array([4.0, 1.0, 2.0, 3.0])
    update_scores(led, 0, "mha", x)
    update_scores(led, 0, "mha", -x)
    assert not led.modules[(0, "mha")].scores.any()


def test_stream_equals_recount():
    rng = np.random.default_rng(0)
    hist = rng.standard_normal((100, 16)) ** 2
    led = ActivationLedger(1, 4, 16, 0.25, 0.125)
    for row in hist:
        update_scores(led, 0, "ffn", row)
    assert np.array_equal(led.modules[(0, "ffn")].scores, recount_scores(hist, 0.125))
    assert led.samples_seen == 100


def test_batched_update_equals_row_by_row_including_ties():
    rng = np.random.default_rng(1)
    hist = rng.integers(0, 3, (50, 8)).astype(float)
    a = ActivationLedger(1, 8, 8, 0.25, 0.25)
    b = ActivationLedger(1, 8, 8, 0.25, 0.25)
    update_scores(a, 0, "mha", hist)
    for row in hist:
        update_scores(b, 0, "mha", row)
    assert np.array_equal(a.modules[(0, "mha")].scores, b.modules[(0, "mha")].scores)
    assert np.array_equal(a.modules[(0, "mha")].norm_sum, b.modules[(0, "mha")].norm_sum)
    assert np.array_equal(a.modules[(0, "mha")].scores, recount_scores(hist, 0.25))


def test_update_rejects_wrong_width():
    led = ActivationLedger(1, 4, 8, 0.25, 0.25)
    with pytest.raises(Exception):
        update_scores(led, 0, "mha", np.ones(5))


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 20), st.integers(1, 30), st.integers(0, 10_000))
def test_scores_sum_to_zero_and_bounded(n, samples, seed):
    hist = np.random.default_rng(seed).random((samples, n))
    led = ActivationLedger(1, 4, n, 0.25, 0.25)
    update_scores(led, 0, "ffn", hist)
    s = led.modules[(0, "ffn")].scores
    assert s.sum() == 0 and np.all(np.abs(s) <= samples)


def test_top_min_tie_break():
    assert [a.tolist() for a in top_min_indices(np.array([5, -2, 0, 3]), 1)] == [[0], [1]]
    assert top_min_indices(np.array([2, 2, 0, -1]), 1)[0].tolist() == [0]


def _ledger_with(scores, means):
    led = ActivationLedger(1, len(scores), len(scores), 0.25, 0.25)
    for kind in ("mha", "ffn"):
        led.modules[(0, kind)] = ModuleStats(np.array(scores), np.array(means, dtype=float), 1)
    return led


def test_select_rank_and_avg():
    led = _ledger_with([5, -2, 0, 3], [1.0, 9.0, 2.0, 0.5])
    sets = select_sets(led, 0.25, 0.25, "rank")
    assert sets.pos(0, "mha").tolist() == [0] and sets.neg(0, "mha").tolist() == [1]
    sets = select_sets(led, 0.25, 0.25, "avg")
    assert sets.pos(0, "ffn").tolist() == [1] and sets.neg(0, "ffn").tolist() == [3]


def test_select_random_reproducible_and_disjoint():
    led = ActivationLedger(2, 8, 32, 0.25, 0.125)
    a = select_sets(led, strategy="random", seed=3)
    b = select_sets(led, strategy="random", seed=3)
    for key in a.sets:
        p, n = a.sets[key]
        assert np.array_equal(p, b.sets[key][0]) and np.array_equal(n, b.sets[key][1])
        assert len(p) == len(n) and not np.intersect1d(p, n).size
    assert len(a.pos(0, "ffn")) == 4


def test_select_needs_populated_ledger():
    with pytest.raises(StateError):
        select_sets(ActivationLedger(1, 4, 8, 0.25, 0.25))
    with pytest.raises(ConfigError):
        select_sets(_ledger_with([1, 2, 3, 4], [1, 2, 3, 4]), strategy="bogus")


def test_std_report():
    assert activation_std_report(_ledger_with([0, 0], [2.0, 2.0]))[(0, "mha")] == 0.0
    assert activation_std_report(_ledger_with([0, 0], [1.0, 3.0]))[(0, "mha")] == 1.0
    means = np.random.default_rng(4).random(10)
    got = activation_std_report(_ledger_with([0] * 10, means))[(0, "ffn")]
    mu = sum(means) / len(means)
    ref = (sum((m - mu) ** 2 for m in means) / len(means)) ** 0.5
    assert abs(got - ref) < 1e-6
    with pytest.raises(StateError):
        activation_std_report(ActivationLedger(1, 4, 8, 0.25, 0.25))


CFG = ModelConfig(n_layers=2, d_model=16, n_heads=4, d_ffn=32, vocab_size=40, max_seq_len=12, seed=2)


def test_mask_nothing_is_identity():
    p = init_params(CFG)
    q = mask_components(p, 0, "mha", [])
    assert all(np.array_equal(p[k], q[k]) for k in p)


def test_mask_all_heads_matches_ablated_oracle():
    p = init_params(CFG, dtype=np.float64, std=0.2)
    q = p
    for layer in range(CFG.n_layers):
        q = mask_components(q, layer, "mha", range(CFG.n_heads))
    toks = np.random.default_rng(0).integers(0, 40, 10)
    logits, trace = forward_logits(toks, q, probe=True)
    assert all(not h.any() for h in trace.mha_head_norms)
    # oracle: residual stream carries only embeddings and FFN outputs
    t = p.tensors
    x = t["tok_emb"][toks] + t["pos_emb"][:10]
    for i in range(CFG.n_layers):
        xn = np.stack([oracle.rms(r, t[f"layer{i}.norm2"], CFG.norm_eps) for r in x])
        x = x + oracle.glu(xn, t[f"layer{i}.W_U"], t[f"layer{i}.W_G"], t[f"layer{i}.W_D"])[0]
    ref = np.stack([oracle.rms(r, t["norm_f"], CFG.norm_eps) for r in x]) @ t["head"]
    assert np.max(np.abs(logits - ref)) < 1e-9


def test_mask_bad_index():
    with pytest.raises(IndexError):
        mask_components(init_params(CFG), 0, "mha", [4])
    with pytest.raises(IndexError):
        mask_components(init_params(CFG), 0, "ffn", [32])


def test_mask_fraction_counts_and_order():
    led = ActivationLedger(1, 4, 10, 0.25, 0.25)
    cfg = ModelConfig(n_layers=1, d_model=16, n_heads=4, d_ffn=10, vocab_size=40)
    means = np.arange(10, dtype=float)
    led.modules[(0, "ffn")] = ModuleStats(np.zeros(10, dtype=np.int64), means, 1)
    led.modules[(0, "mha")] = ModuleStats(np.zeros(4, dtype=np.int64), np.arange(4.0), 1)
    p = init_params(cfg)
    _, top = mask_fraction(p, led, "top", 0.2)
    _, low = mask_fraction(p, led, "min", 0.2)
    assert top[(0, "ffn")].tolist() == [8, 9] and low[(0, "ffn")].tolist() == [0, 1]
    # floor(4 * 0.2) == 0 heads: nothing masked, no clamp
    assert top[(0, "mha")].size == 0


def test_probe_rows_schema():
    p = init_params(CFG)
    _, trace = forward_logits(np.random.default_rng(0).integers(0, 40, (3, 8)), p, probe=True)
    led = ActivationLedger.for_config(CFG, 0.25, 0.125)
    led.record_trace(trace)
    rows = probe_rows(led)
    assert len(rows) == CFG.n_layers * (CFG.n_heads + CFG.d_ffn)
    assert tuple(rows[0]) == PROBE_FIELDS
    text = rows_to_csv(rows, PROBE_FIELDS)
    assert text.splitlines()[0] == ",".join(PROBE_FIELDS)
    assert len(std_rows(led)) == 2 * CFG.n_layers
