import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from curricuids import nn_core as nn
from curricuids.errors import EvenKernel, ShapeMismatch, TapeReuse
from curricuids.nn_core import Param, Tape, Tensor, grad_check

PROBES = 100
TOL = 1e-4


def P(a, name="p"):
    return Param(np.array(a, dtype=np.float64), name)


def weighted_sum(out: Tensor, seed=7):
    # random projection so every output element reaches the loss with its own weight
    r = np.random.default_rng(seed).normal(size=out.shape)
    return nn.sum_all(nn.mul(out, Tensor(r)))


# ---------------------------------------------------------------- forward oracles

def test_dense_identity_and_bias():
    x = Tensor(np.array([[1.5, -2.0]]))
    y = nn.dense_forward(x, P(np.eye(2)), P(np.zeros(2)))
    assert np.array_equal(y.data, x.data)
    y0 = nn.dense_forward(Tensor(np.zeros((3, 2))), P(np.eye(2)), P([0.3, -0.1]))
    assert np.allclose(y0.data, [[0.3, -0.1]] * 3)


def test_dense_hand_matmul():
    y = nn.dense_forward(Tensor(np.array([1.0, 1.0])), P([[1.0, 2.0], [3.0, 4.0]]), P([0.5, 0.5]))
    assert np.allclose(y.data - 0.5, [4.0, 6.0])


def test_conv_identity_kernel():
    x = np.array([[1.0], [-2.0], [0.5]])
    y = nn.conv1d_forward(Tensor(x), P(np.ones((1, 1, 1))), P([0.0]))
    assert np.array_equal(y.data, x)


def test_conv_zero_input_is_bias():
    y = nn.conv1d_forward(Tensor(np.zeros((5, 2))), P(np.ones((3, 2, 3))), P([1.0, 2.0, 3.0]))
    assert np.allclose(y.data, [[1.0, 2.0, 3.0]] * 5)


def test_conv_hand_cross_correlation():
    # zero-padded [0,1,2,3,0] against [1,0,-1]
    x = np.array([[1.0], [2.0], [3.0]])
    y = nn.conv1d_forward(Tensor(x), P(np.array([1.0, 0.0, -1.0]).reshape(3, 1, 1)), P([0.0]))
    assert np.allclose(y.data.ravel(), [-2.0, -2.0, 2.0])


def test_conv_even_kernel_rejected():
    with pytest.raises(EvenKernel):
        nn.conv1d_forward(Tensor(np.zeros((3, 1))), P(np.zeros((2, 1, 1))), P([0.0]))


def test_layer_norm_examples():
    g, b = P(np.ones(3)), P(np.zeros(3))
    assert np.allclose(nn.layer_norm_forward(Tensor(np.full(3, 4.0)), g, b).data, 0.0)
    two = nn.layer_norm_forward(Tensor(np.array([1.0, -1.0])), P(np.ones(2)), P(np.zeros(2)), eps=0.0)
    assert np.allclose(two.data, [1.0, -1.0])
    y = nn.layer_norm_forward(Tensor(np.array([0.0, 2.0, 4.0])), g, b, eps=0.0)
    s = math.sqrt(8.0 / 3.0)
    assert np.allclose(y.data, [-2.0 / s, 0.0, 2.0 / s], atol=1e-12)
    assert abs(y.data[2] - 1.2247) < 1e-4


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def test_gru_zero_and_closed_gate():
    h = nn.gru_cell_forward(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 3))),
                            P(np.zeros((2, 9))), P(np.zeros((3, 9))), P(np.zeros(9)))
    assert np.array_equal(h.data, np.zeros((1, 3)))
    b = np.zeros(9)
    b[:3] = -60.0  # update gate shut
    hp = np.array([[0.3, -0.7, 0.1]])
    rng = np.random.default_rng(0)
    h = nn.gru_cell_forward(Tensor(rng.normal(size=(1, 2))), Tensor(hp),
                            P(rng.normal(size=(2, 9))), P(rng.normal(size=(3, 9))), P(b))
    assert np.allclose(h.data, hp, atol=1e-12)


def test_gru_scalar_hand_value():
    x, hp = 0.5, 0.0
    z = _sig(x + hp + 1.0)
    r = _sig(x + hp + 1.0)
    n = math.tanh(x + 1.0 + r * hp)
    expect = (1 - z) * hp + z * n
    h = nn.gru_cell_forward(Tensor(np.array([[x]])), Tensor(np.array([[hp]])),
                            P(np.ones((1, 3))), P(np.ones((1, 3))), P(np.ones(3)))
    assert abs(h.data[0, 0] - expect) < 1e-12
    # h_prev = 0, so h = sigmoid(1.5) * tanh(1.5)
    assert abs(expect - 0.740026) < 1e-6


def test_lstm_zero_and_memory_carry():
    zeros = Tensor(np.zeros((1, 2)))
    h, c = nn.lstm_cell_forward(Tensor(np.zeros((1, 3))), zeros, zeros,
                                P(np.zeros((3, 8))), P(np.zeros((2, 8))), P(np.zeros(8)))
    assert np.array_equal(h.data, np.zeros((1, 2))) and np.array_equal(c.data, np.zeros((1, 2)))
    b = np.zeros(8)
    b[:2] = -60.0  # input gate shut
    b[2:4] = 60.0  # forget gate open
    cp = np.array([[0.4, -1.3]])
    rng = np.random.default_rng(1)
    _, c = nn.lstm_cell_forward(Tensor(rng.normal(size=(1, 3))), Tensor(rng.normal(size=(1, 2))),
                                Tensor(cp), P(np.zeros((3, 8))), P(np.zeros((2, 8))), P(b))
    assert np.allclose(c.data, cp, atol=1e-12)


def test_lstm_scalar_hand_value():
    x, hp, cp = 0.5, 0.2, -0.3
    w = np.array([[0.1, 0.2, 0.3, 0.4]])
    u = np.array([[-0.1, 0.5, 0.2, -0.3]])
    b = np.array([0.0, 1.0, 0.0, 0.1])
    a = x * w[0] + hp * u[0] + b
    i, f, g, o = _sig(a[0]), _sig(a[1]), math.tanh(a[2]), _sig(a[3])
    c_exp = f * cp + i * g
    h_exp = o * math.tanh(c_exp)
    h, c = nn.lstm_cell_forward(Tensor(np.array([[x]])), Tensor(np.array([[hp]])),
                                Tensor(np.array([[cp]])), P(w), P(u), P(b))
    assert abs(c.data[0, 0] - c_exp) < 1e-12
    assert abs(h.data[0, 0] - h_exp) < 1e-12


def test_attention_single_step_and_uniform():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 3))
    wq, wk, wv = (P(rng.normal(size=(3, 2))) for _ in range(3))
    y = nn.self_attention_forward(Tensor(x), wq, wk, wv)
    assert np.allclose(y.data, x @ wv.data)
    # zero query weights make every logit equal
    xs = rng.normal(size=(4, 3))
    y = nn.self_attention_forward(Tensor(xs), P(np.zeros((3, 2))), wk, wv)
    assert np.allclose(y.data, np.tile((xs @ wv.data).mean(axis=0), (4, 1)))


def test_attention_two_step_hand_softmax():
    x = np.array([[1.0], [2.0]])
    # q = x, k = x, v = 3x; logits s_ts = x_t x_s
    y = nn.self_attention_forward(Tensor(x), P([[1.0]]), P([[1.0]]), P([[3.0]]))
    for t, xt in enumerate((1.0, 2.0)):
        e1, e2 = math.exp(xt * 1.0), math.exp(xt * 2.0)
        expect = (e1 * 3.0 + e2 * 6.0) / (e1 + e2)
        assert abs(y.data[t, 0] - expect) < 1e-12


@given(st.integers(1, 16), st.integers(0, 10_000))
def test_attention_rows_stochastic(T, seed):
    rng = np.random.default_rng(seed)
    a = nn.attention_weights(rng.normal(size=(T, 3)) * 3, rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))
    assert np.allclose(a.sum(axis=-1), 1.0, atol=1e-9)
    assert (a >= 0).all()


@given(st.integers(0, 10_000), st.floats(0.1, 50.0))
def test_recurrent_outputs_bounded(seed, mag):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3)) * mag)
    h = Tensor(np.tanh(rng.normal(size=(2, 4))))
    g = nn.gru_cell_forward(x, h, P(rng.normal(size=(3, 12)) * mag), P(rng.normal(size=(4, 12))),
                            P(rng.normal(size=12)))
    hl, _ = nn.lstm_cell_forward(x, h, Tensor(rng.normal(size=(2, 4)) * mag),
                                 P(rng.normal(size=(3, 16)) * mag), P(rng.normal(size=(4, 16))),
                                 P(rng.normal(size=16)))
    assert np.abs(g.data).max() <= 1.0 and np.abs(hl.data).max() <= 1.0


def test_bce_examples():
    assert nn.bce_loss(Tensor(np.array([1.0, 0.0])), [1.0, 0.0]).data <= 1e-6
    assert abs(float(nn.bce_loss(Tensor(np.full(4, 0.5)), [1, 0, 1, 1]).data) - math.log(2)) < 1e-12
    v = float(nn.bce_loss(Tensor(np.array([0.9, 0.2])), [1.0, 0.0]).data)
    assert abs(v - 0.5 * (-math.log(0.9) - math.log(0.8))) < 1e-12
    assert abs(v - 0.164252) < 1e-6


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=20), st.integers(0, 1 << 20))
def test_bce_nonnegative(ps, bits):
    p = np.array(ps)
    y = np.array([(bits >> i) & 1 for i in range(len(ps))], dtype=np.float64)
    assert float(nn.bce_loss(Tensor(p), y).data) >= 0.0


def test_bce_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        nn.bce_loss(Tensor(np.zeros(3)), np.zeros(2))


# ----------------------------------------------------------------- autodiff core

def test_backward_sum_and_square():
    x = P([1.0, -2.0, 3.0])
    with Tape() as tape:
        loss = nn.sum_all(x)
    nn.backward(tape, loss)
    assert np.array_equal(x.grad, np.ones(3))
    x.zero_grad()
    with Tape() as tape:
        loss = nn.sum_all(nn.mul(x, x))
    nn.backward(tape, loss)
    assert np.array_equal(x.grad, 2 * x.data)


def test_tape_consumed_once():
    x = P([1.0])
    with Tape() as tape:
        loss = nn.sum_all(x)
    nn.backward(tape, loss)
    with pytest.raises(TapeReuse):
        nn.backward(tape, loss)


def test_forward_bit_identical():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 5, 3))
    ps = [P(rng.normal(size=(3, 4))) for _ in range(3)]
    a = nn.self_attention_forward(Tensor(x), *ps).data
    b = nn.self_attention_forward(Tensor(x.copy()), *ps).data
    assert a.tobytes() == b.tobytes()


# ------------------------------------------------------------------------- adam

def test_adam_zero_grad_keeps_params():
    p = P([1.0, -2.0])
    nn.adam_step(nn.AdamState(lr=0.1), [p])
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    p = P([1.0, -2.0, 0.5])
    p.grad[...] = [3.0, -0.01, 250.0]
    st_ = nn.AdamState(lr=0.01)
    nn.adam_step(st_, [p])
    assert np.allclose(p.data - [1.0, -2.0, 0.5], -0.01 * np.sign([3.0, -0.01, 250.0]), atol=1e-8)
    assert st_.t == 1 and np.all(p.grad == 0)


def test_adam_two_steps_reference_trace():
    lr, b1, b2, eps, g = 0.1, 0.9, 0.999, 1e-8, 0.5
    w, m, v = 2.0, 0.0, 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    p = P([2.0])
    st_ = nn.AdamState(lr=lr)
    for _ in range(2):
        p.grad[...] = g
        nn.adam_step(st_, [p])
    assert abs(p.data[0] - w) < 1e-15


# ------------------------------------------------------------------- grad checks

def test_grad_check_quadratic():
    x = P([0.3, -1.2, 2.0])
    assert grad_check(lambda: nn.sum_all(nn.mul(x, x)), [x]) < 1e-9


def test_grad_check_dense_sigmoid_bce():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(6, 3)))
    w, b = P(rng.normal(size=(3, 1))), P(rng.normal(size=1))
    y = (rng.random(6) < 0.5).astype(float)

    def f():
        return nn.bce_loss(nn.reshape(nn.sigmoid(nn.dense_forward(x, w, b)), (6,)), y)
    assert grad_check(f, [w, b]) < 1e-6


def _primitive_cases():
    rng = np.random.default_rng(5)

    def r(*s):
        return P(rng.normal(size=s))

    cases = {}
    a, b = r(2, 3), r(3)
    cases["add"] = (lambda: weighted_sum(nn.add(a, b)), [a, b])
    c, d = r(2, 3), r(2, 3)
    cases["sub"] = (lambda: weighted_sum(nn.sub(c, d)), [c, d])
    e, f = r(4, 3), r(3)
    cases["mul"] = (lambda: weighted_sum(nn.mul(e, f)), [e, f])
    g = r(3, 2)
    cases["scale"] = (lambda: weighted_sum(nn.scale(g, -1.7)), [g])
    h = r(5)
    cases["sigmoid"] = (lambda: weighted_sum(nn.sigmoid(h)), [h])
    i = r(5)
    cases["tanh"] = (lambda: weighted_sum(nn.tanh(i)), [i])
    j = P(np.array([0.3, -0.8, 1.1, -0.2, 0.6]))  # away from the kink
    cases["relu"] = (lambda: weighted_sum(nn.relu(j)), [j])
    k = r(3, 2)
    cases["mean_all"] = (lambda: nn.mean_all(nn.mul(k, k)), [k])
    m, mw = r(2, 3, 4), r(4, 2)
    cases["matmul"] = (lambda: weighted_sum(nn.matmul(m, mw)), [m, mw])
    n_, nw, nb = r(2, 3, 4), r(4, 3), r(3)
    cases["dense"] = (lambda: weighted_sum(nn.dense_forward(n_, nw, nb)), [n_, nw, nb])
    cx, ck, cb = r(2, 5, 3), r(3, 3, 4), r(4)
    cases["conv1d"] = (lambda: weighted_sum(nn.conv1d_forward(cx, ck, cb)), [cx, ck, cb])
    lx, lg, lb = r(2, 3, 5), r(5), r(5)
    cases["layer_norm"] = (lambda: weighted_sum(nn.layer_norm_forward(lx, lg, lb)), [lx, lg, lb])
    gx, gh, gw, gu, gb = r(2, 3), r(2, 4), r(3, 12), r(4, 12), r(12)
    cases["gru"] = (lambda: weighted_sum(nn.gru_cell_forward(gx, gh, gw, gu, gb)), [gx, gh, gw, gu, gb])
    sx, sh, sc, sw, su, sb = r(2, 3), r(2, 4), r(2, 4), r(3, 16), r(4, 16), r(16)

    def lstm():
        h_, c_ = nn.lstm_cell_forward(sx, sh, sc, sw, su, sb)
        return nn.add(weighted_sum(h_, 1), weighted_sum(c_, 2))
    cases["lstm"] = (lstm, [sx, sh, sc, sw, su, sb])
    ax, aq, ak, av = r(2, 4, 3), r(3, 2), r(3, 2), r(3, 2)
    cases["attention"] = (lambda: weighted_sum(nn.self_attention_forward(ax, aq, ak, av)), [ax, aq, ak, av])
    tx = r(2, 4, 3)
    cases["take_stack_slice"] = (
        lambda: weighted_sum(nn.slice_last(nn.stack_time([nn.take_time(tx, 3), nn.take_time(tx, 1)]), 1, 3)),
        [tx])
    bp = P(np.array([0.2, 0.7, 0.9, 0.4]))
    cases["bce"] = (lambda: nn.bce_loss(bp, [0.0, 1.0, 1.0, 0.0]), [bp])
    return cases


CASES = _primitive_cases()


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_grad_check(name):
    f, params = CASES[name]
    assert grad_check(f, params, n_probes=PROBES, seed=11) < TOL


def test_dropout_train_only():
    x = Tensor(np.ones((3, 4)))
    assert nn.dropout(x, 0.5, np.random.default_rng(0), train=False) is x
    y = nn.dropout(x, 0.5, np.random.default_rng(0), train=True).data
    assert set(np.unique(y)) <= {0.0, 2.0}
