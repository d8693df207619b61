import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from apexlm import numerics as nx
from apexlm.numerics import GradTape, ShapeError, TapeError, Tensor


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# --- matmul -----------------------------------------------------------------

def test_matmul_identity_and_hand_case():
    a = T([[1, 2], [3, 4]])
    assert np.array_equal(nx.matmul(a, T(np.eye(2))).data, a.data)
    assert nx.matmul(T([[1, 2]]), T([[3], [4]])).data.tolist() == [[11.0]]


def _triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
    assert np.max(np.abs(nx.matmul(T(a), T(b)).data - _triple_loop(a, b))) < 1e-6


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        nx.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


# --- softmax / rms_norm / silu / cross entropy --------------------------------

def test_softmax_cases():
    assert np.allclose(nx.softmax(T([0.0, 0.0])).data, [0.5, 0.5])
    big = nx.softmax(T([1000.0, 1000.0])).data
    assert np.all(np.isfinite(big)) and np.allclose(big, [0.5, 0.5])
    x = np.array([1.0, 2.0, 3.0])
    ref = np.exp(x) / np.exp(x).sum()
    assert np.allclose(nx.softmax(T(x)).data, ref, atol=1e-15)


def test_rms_norm_cases():
    assert np.array_equal(nx.rms_norm(T([0.0, 0.0]), T([1.0, 1.0]), 1e-5).data, [0.0, 0.0])
    assert np.array_equal(nx.rms_norm(T([1.0, 2.0]), T([0.0, 0.0]), 1e-5).data, [0.0, 0.0])
    out = nx.rms_norm(T([3.0, 4.0]), T([1.0, 1.0]), 0.0).data
    r = math.sqrt(12.5)
    assert np.allclose(out, [3 / r, 4 / r]) and np.allclose(out, [0.84853, 1.13137], atol=1e-5)


def test_silu_cases():
    assert nx.silu(T([0.0])).data[0] == 0.0
    assert abs(nx.silu(T([100.0])).data[0] - 100.0) < 1e-9
    assert abs(nx.silu(T([1.0])).data[0] - 1 / (1 + math.exp(-1))) < 1e-12
    assert abs(nx.silu(T([1.0])).data[0] - 0.731059) < 1e-6


def test_cross_entropy_cases():
    assert abs(float(nx.cross_entropy_mean(T(np.zeros((1, 4))), np.array([2])).data) - math.log(4)) < 1e-12
    z = np.zeros((1, 5))
    z[0, 3] = 40.0
    assert float(nx.cross_entropy_mean(T(z), np.array([3])).data) < 1e-15
    rng = np.random.default_rng(1)
    logits, tgt = rng.standard_normal((5, 7)), rng.integers(0, 7, 5)
    ref = np.mean([math.log(sum(math.exp(v) for v in row)) - row[t] for row, t in zip(logits, tgt)])
    assert abs(float(nx.cross_entropy_mean(T(logits), tgt).data) - ref) < 1e-5


def test_cross_entropy_bad_target():
    with pytest.raises(IndexError):
        nx.cross_entropy_mean(T(np.zeros((2, 4))), np.array([0, 4]))


# --- tape -----------------------------------------------------------------------

def test_quadratic_gradient():
    x = T([3.0])
    err = nx.grad_check(lambda: nx.sum(nx.square(x)), [x])
    assert x.grad[0] == 6.0 and err < 1e-8


def test_matmul_sum_gradient():
    rng = np.random.default_rng(2)
    a, b = T(rng.standard_normal((4, 3))), T(rng.standard_normal((3, 5)))
    assert nx.grad_check(lambda: nx.sum(nx.matmul(a, b)), [a, b]) < 1e-6


def test_backward_twice_raises():
    x = T([1.0, 2.0], grad=True)
    with GradTape() as tape:
        y = nx.sum(nx.square(x))
    tape.backward(y)
    with pytest.raises(TapeError):
        tape.backward(y)


def test_reused_tensor_accumulates():
    x = T([2.0], grad=True)
    with GradTape() as tape:
        y = nx.sum(nx.mul(x, x))
    tape.backward(y)
    assert x.grad[0] == 4.0


@pytest.mark.parametrize("op", ["silu", "gelu", "softmax", "rms", "std", "ce", "embed"])
def test_op_gradients(op):
    rng = np.random.default_rng(3)
    x = T(rng.standard_normal((3, 6)))
    g = T(rng.standard_normal(6))
    tbl = T(rng.standard_normal((9, 6)))
    ids = np.array([[1, 4, 4], [8, 0, 1]])
    tgt = np.array([0, 5, 2])
    w = T(rng.standard_normal((3, 6)))
    fns = {
        "silu": (lambda: nx.sum(nx.mul(nx.silu(x), w)), [x]),
        "gelu": (lambda: nx.sum(nx.mul(nx.gelu(x), w)), [x]),
        "softmax": (lambda: nx.sum(nx.mul(nx.softmax(x), w)), [x]),
        "rms": (lambda: nx.sum(nx.mul(nx.rms_norm(x, g, 1e-5), w)), [x, g]),
        "std": (lambda: nx.sum(nx.std_population(x)), [x]),
        "ce": (lambda: nx.cross_entropy_mean(x, tgt), [x]),
        "embed": (lambda: nx.sum(nx.square(nx.embedding(tbl, ids))), [tbl]),
    }
    f, params = fns[op]
    assert nx.grad_check(f, params) < 1e-6


def test_expand_gradients():
    rng = np.random.default_rng(4)
    w = T(rng.standard_normal((5, 8)))
    m = T(rng.standard_normal((3, 3)))
    pos, neg = np.array([0, 2, 4]), np.array([1, 5, 7])
    c = T(rng.standard_normal((5, 8)))
    assert nx.grad_check(lambda: nx.sum(nx.mul(nx.expand_cols(w, pos, neg, m), c)), [w, m]) < 1e-6
    wr = T(rng.standard_normal((8, 5)))
    cr = T(rng.standard_normal((8, 5)))
    assert nx.grad_check(lambda: nx.sum(nx.mul(nx.expand_rows(wr, pos, neg, m), cr)), [wr, m]) < 1e-6


def test_monarch_gradient_with_nonzero_r():
    rng = np.random.default_rng(5)
    d = T(rng.standard_normal((3, 3, 3)))
    r = T(rng.standard_normal((3, 3)))
    c = T(rng.standard_normal((9, 9)))
    assert nx.grad_check(lambda: nx.sum(nx.mul(nx.monarch_dense(d, r), c)), [d, r]) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_a_distribution(xs):
    p = nx.softmax(T(xs)).data
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 100))
def test_broadcast_add_gradient(r, c, seed):
    rng = np.random.default_rng(seed)
    a, b = T(rng.standard_normal((r, c))), T(rng.standard_normal(c))
    w = rng.standard_normal((r, c))
    a.requires_grad = b.requires_grad = True
    with GradTape() as tape:
        y = nx.sum(nx.mul(nx.add(a, b), T(w)))
    tape.backward(y)
    assert np.allclose(b.grad, w.sum(axis=0)) and np.allclose(a.grad, w)
