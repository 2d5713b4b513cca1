import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emocaps import tensor as tc
from emocaps.errors import DimensionError, NumericError, UsageError

from conftest import numeric_grad, rel_err


def _leaf(a):
    return tc.Tensor(np.array(a, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(tc.matmul(np.eye(2), b).data, b)


def test_matmul_projector():
    out = tc.matmul(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        tc.matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_matmul_gradient_matches_finite_differences(rng):
    a, b = _leaf(rng.normal((3, 4))), _leaf(rng.normal((4, 2)))
    c = rng.normal((3, 2))
    tc.sum_all(tc.mul(tc.matmul(a, b), c)).backward()
    f = lambda: float((a.data @ b.data * c).sum())
    assert rel_err(a.grad, numeric_grad(f, a.data)) < 1e-6
    assert rel_err(b.grad, numeric_grad(f, b.data)) < 1e-6


def test_batched_matmul_gradients(rng):
    a, b = _leaf(rng.normal((2, 3, 4))), _leaf(rng.normal((2, 4, 5)))
    w = _leaf(rng.normal((4, 5)))
    c = rng.normal((2, 3, 5))
    loss = tc.sum_all(tc.mul(tc.add(tc.matmul(a, b), tc.matmul(a, w)), c))
    loss.backward()
    f = lambda: float(((a.data @ b.data + a.data @ w.data) * c).sum())
    for t in (a, b, w):
        assert rel_err(t.grad, numeric_grad(f, t.data)) < 1e-6


# ---------------------------------------------------------------- softmax

def test_softmax_uniform_row():
    np.testing.assert_allclose(tc.softmax_rows(np.zeros((1, 4))).data, [[0.25] * 4], atol=1e-15)


def test_softmax_stability_large_logit():
    out = tc.softmax_rows(np.array([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-12)


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        tc.softmax_rows(np.array([[np.nan, 0.0]]))


def test_softmax_gradient(rng):
    x = _leaf(rng.normal((3, 5)))
    c = rng.normal((3, 5))
    tc.sum_all(tc.mul(tc.softmax_rows(x), c)).backward()

    def f():
        e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
        return float((e / e.sum(axis=1, keepdims=True) * c).sum())

    assert rel_err(x.grad, numeric_grad(f, x.data)) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(row, shift):
    x = np.array([row])
    p = tc.softmax_rows(x).data
    assert abs(p.sum() - 1.0) < 1e-6
    assert np.all(p >= 0)
    np.testing.assert_allclose(tc.softmax_rows(x + shift).data, p, atol=1e-9)


# ---------------------------------------------------------------- layer norm

def test_layer_norm_constant_row_is_zero():
    out = tc.layer_norm(np.full((1, 5), 3.0), np.ones(5), np.zeros(5)).data
    np.testing.assert_array_equal(out, np.zeros((1, 5)))


def test_layer_norm_already_normalized():
    out = tc.layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2), eps=0.0).data
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-15)


def test_layer_norm_dimension_error():
    with pytest.raises(DimensionError):
        tc.layer_norm(np.ones((2, 3)), np.ones(4), np.zeros(4))


def test_layer_norm_gradient(rng):
    x = _leaf(rng.normal((4, 6)))
    g, b = _leaf(rng.normal((6,))), _leaf(rng.normal((6,)))
    c = rng.normal((4, 6))
    tc.sum_all(tc.mul(tc.layer_norm(x, g, b), c)).backward()

    def f():
        mu = x.data.mean(axis=1, keepdims=True)
        var = x.data.var(axis=1, keepdims=True)
        return float((((x.data - mu) / np.sqrt(var + 1e-5) * g.data + b.data) * c).sum())

    for t in (x, g, b):
        assert rel_err(t.grad, numeric_grad(f, t.data)) < 1e-5


# ---------------------------------------------------------------- small ops

def test_relu_values():
    np.testing.assert_array_equal(tc.relu(np.array([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_concat_extent_and_order():
    a, b, c = np.arange(2.0), np.arange(3.0) + 10, np.arange(4.0) + 20
    out = tc.concat_last_axis([a, b, c]).data
    assert out.shape == (9,)
    np.testing.assert_array_equal(out, np.concatenate([a, b, c]))


def test_concat_leading_mismatch():
    with pytest.raises(DimensionError):
        tc.concat_last_axis([np.ones((2, 3)), np.ones((3, 3))])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_concat_then_slice_is_bit_exact(widths, rows, seed):
    r = tc.Rng(seed)
    parts = [r.normal((rows, w)) for w in widths]
    out = tc.concat_last_axis(parts)
    start = 0
    for p in parts:
        got = tc.slice_last_axis(out, start, start + p.shape[1]).data
        assert np.array_equal(got, p)
        start += p.shape[1]


def test_cross_entropy_uniform_is_log_m():
    for label in range(6):
        assert abs(tc.cross_entropy(np.zeros(6), label).item() - math.log(6)) < 1e-12
    assert abs(math.log(6) - 1.7918) < 1e-4


def test_cross_entropy_gradient(rng):
    z = _leaf(rng.normal((5, 4)))
    y = np.array([0, 3, 1, 1, 2])
    tc.cross_entropy(z, y).backward()

    def f():
        lse = np.log(np.exp(z.data).sum(axis=1))
        return float((lse - z.data[np.arange(5), y]).mean())

    assert rel_err(z.grad, numeric_grad(f, z.data)) < 1e-6


def test_dropout_eval_identity_and_rate_check(rng):
    x = rng.normal((3, 3))
    np.testing.assert_array_equal(tc.dropout(x, 0.5, rng, training=False).data, x)
    with pytest.raises(UsageError):
        tc.dropout(x, 1.0, rng, training=True)


def test_dropout_training_is_unbiased():
    rate, n = 0.3, 100_000
    out = tc.dropout(np.ones(n), rate, tc.Rng(7), training=True).data
    # each entry is 0 or 1/(1-rate): mean 1, std sqrt(rate/(1-rate))
    sigma = math.sqrt(rate / (1 - rate)) / math.sqrt(n)
    assert abs(out.mean() - 1.0) < 3 * sigma
    assert set(np.unique(out)) <= {0.0, 1.0 / (1 - rate)}


def test_dropout_reproducible():
    x = np.ones((4, 4))
    a = tc.dropout(x, 0.5, tc.Rng(3), True).data
    b = tc.dropout(x, 0.5, tc.Rng(3), True).data
    assert np.array_equal(a, b)


def test_rng_stream_is_seed_determined():
    assert np.array_equal(tc.Rng(42).normal((5,)), tc.Rng(42).normal((5,)))
    assert not np.array_equal(tc.Rng(42).normal((5,)), tc.Rng(43).normal((5,)))
    assert np.array_equal(tc.Rng(42).spawn(3).random(4), tc.Rng(42).spawn(3).random(4))


def test_take_rows_and_concat_rows_gradients(rng):
    x = _leaf(rng.normal((4, 3)))
    y = _leaf(rng.normal((2, 3)))
    idx = np.array([0, 2, 2, 5, 1])
    c = rng.normal((5, 3))
    tc.sum_all(tc.mul(tc.take_rows(tc.concat_rows([x, y]), idx), c)).backward()
    f = lambda: float((np.concatenate([x.data, y.data])[idx] * c).sum())
    assert rel_err(x.grad, numeric_grad(f, x.data)) < 1e-8
    assert rel_err(y.grad, numeric_grad(f, y.data)) < 1e-8


def test_shared_subgraph_accumulates():
    x = _leaf([2.0])
    tc.add(tc.mul(x, x), x).backward(np.ones(1))
    assert x.grad[0] == pytest.approx(5.0)


# ---------------------------------------------------------------- LSTM

def _lstm_params(rng, d_in, H, scale=0.5):
    return {"W_ih": _leaf(rng.normal((d_in, 4 * H), scale)),
            "W_hh": _leaf(rng.normal((H, 4 * H), scale)),
            "b": _leaf(rng.normal((4 * H,), scale))}


def test_lstm_cell_zero_everything():
    H, d = 3, 2
    params = {"W_ih": np.zeros((d, 4 * H)), "W_hh": np.zeros((H, 4 * H)), "b": np.zeros(4 * H)}
    params = {k: tc.Tensor(v) for k, v in params.items()}
    h, c = tc.lstm_cell(tc.Tensor(np.zeros(d)), tc.Tensor(np.zeros(H)), tc.Tensor(np.zeros(H)), params)
    assert np.array_equal(h.data, np.zeros(H)) and np.array_equal(c.data, np.zeros(H))


def test_lstm_cell_saturated_forget_gate_keeps_cell(rng):
    H, d = 3, 2
    b = np.zeros(4 * H)
    b[:H] = -50.0      # input gate closed
    b[H:2 * H] = 50.0  # forget gate open
    params = {"W_ih": tc.Tensor(rng.normal((d, 4 * H))), "W_hh": tc.Tensor(rng.normal((H, 4 * H))),
              "b": tc.Tensor(b)}
    c0 = rng.normal((H,))
    _, c1 = tc.lstm_cell(tc.Tensor(rng.normal((d,))), tc.Tensor(rng.normal((H,))), tc.Tensor(c0), params)
    np.testing.assert_allclose(c1.data, c0, atol=1e-12)


def test_lstm_cell_shape_error(rng):
    params = _lstm_params(rng, 2, 3)
    with pytest.raises(DimensionError):
        tc.lstm_cell(tc.Tensor(np.zeros(5)), tc.Tensor(np.zeros(3)), tc.Tensor(np.zeros(3)), params)


def test_lstm_bptt_three_steps(rng):
    d, H, T = 3, 4, 3
    params = _lstm_params(rng, d, H)
    xs = _leaf(rng.normal((T, d)))
    c_out = rng.normal((T, H))

    def loss():
        h = tc.Tensor(np.zeros(H))
        c = tc.Tensor(np.zeros(H))
        total = None
        for t in range(T):
            x_t = tc.reshape(tc.take_rows(xs, np.array([t])), (d,))
            h, c = tc.lstm_cell(x_t, h, c, params)
            term = tc.sum_all(tc.mul(h, c_out[t]))
            total = term if total is None else tc.add(total, term)
        return total

    err = tc.finite_difference_check(loss, {**params, "x": xs})
    assert err < 1e-4


def test_fused_recurrence_matches_unrolled_cells(rng):
    B, L, d, H = 2, 4, 3, 5
    params = _lstm_params(rng, d, H)
    x = rng.normal((B, L, d))
    fused = tc.lstm_sequence(tc.Tensor(x), params).data
    for b in range(B):
        h, c = tc.Tensor(np.zeros(H)), tc.Tensor(np.zeros(H))
        for t in range(L):
            h, c = tc.lstm_cell(tc.Tensor(x[b, t]), h, c, params)
            np.testing.assert_allclose(fused[b, t], h.data, atol=1e-13)


def test_fused_recurrence_gradient(rng):
    params = _lstm_params(rng, 3, 4)
    x = _leaf(rng.normal((2, 5, 3)))
    c = rng.normal((2, 5, 4))
    err = tc.finite_difference_check(lambda: tc.sum_all(tc.mul(tc.lstm_sequence(x, params), c)),
                                     {**params, "x": x})
    assert err < 1e-4


# ---------------------------------------------------------------- Adam

def test_adam_zero_gradient_leaves_params():
    p = {"w": _leaf([1.0, -2.0])}
    state = tc.AdamState(p)
    for _ in range(5):
        p["w"].grad = np.zeros(2)
        tc.adam_step(p, state, lr=0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = {"w": _leaf([0.5])}
    state = tc.AdamState(p)
    p["w"].grad = np.ones(1)
    tc.adam_step(p, state, lr=0.1)
    assert p["w"].data[0] == pytest.approx(0.4, abs=1e-7)


def test_adam_quadratic_matches_scalar_recurrence():
    # independent scalar recurrence, written out longhand
    w_ref, m, v = 0.0, 0.0, 0.0
    for t in range(1, 101):
        g = 2.0 * (w_ref - 3.0)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w_ref -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    p = {"w": _leaf([0.0])}
    state = tc.AdamState(p)
    for _ in range(100):
        p["w"].grad = 2.0 * (p["w"].data - 3.0)
        tc.adam_step(p, state, lr=0.1)
    assert p["w"].data[0] == pytest.approx(w_ref, abs=1e-12)
    assert abs(p["w"].data[0] - 3.0) < 0.05


def test_adam_missing_grad_is_usage_error():
    p = {"w": _leaf([0.0])}
    with pytest.raises(UsageError, match="w"):
        tc.adam_step(p, tc.AdamState(p), lr=0.1)


def test_clip_grad_norm():
    p = {"a": _leaf([0.0, 0.0]), "b": _leaf([0.0])}
    p["a"].grad = np.array([3.0, 0.0])
    p["b"].grad = np.array([4.0])
    assert tc.clip_grad_norm(p, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(p["a"].grad, [0.6, 0.0])
    np.testing.assert_allclose(p["b"].grad, [0.8])
    assert tc.clip_grad_norm(p, None) == pytest.approx(1.0)
    np.testing.assert_allclose(p["b"].grad, [0.8])


# ---------------------------------------------------------------- finite differences

def test_fd_check_square():
    w = _leaf(3.0)
    err = tc.finite_difference_check(lambda: tc.mul(w, w), {"w": w})
    assert w.grad == pytest.approx(6.0)
    assert err < 1e-9


def test_fd_check_non_finite():
    w = _leaf([1.0])
    with pytest.raises(NumericError):
        tc.finite_difference_check(lambda: tc.scale(w, np.inf), {"w": w})


def test_fd_check_detects_wrong_gradient():
    w = _leaf([1.5, -0.5])

    def bad_square(x):
        return tc._make(x.data ** 2, (x,), lambda g: (g * 3.0 * x.data,))

    err = tc.finite_difference_check(lambda: tc.sum_all(bad_square(w)), {"w": w})
    assert err > 0.1


@pytest.mark.parametrize("seed", range(10))
def test_every_differentiable_op_passes_fd_check(seed):
    r = tc.Rng(seed)
    x = _leaf(r.normal((3, 4)))
    w = _leaf(r.normal((4, 4)))
    g, b = _leaf(r.normal((4,))), _leaf(r.normal((4,)))
    c = r.normal((3, 8))

    def f():
        y = tc.matmul(x, w)
        y = tc.layer_norm(tc.add(y, x), g, b)
        y = tc.concat_last_axis([tc.relu(y), tc.softmax_rows(tc.sigmoid(y))])
        y = tc.mul(tc.tanh(y), c)
        z = tc.mean_axis(tc.transpose(tc.reshape(y, (3, 2, 4)), (1, 0, 2)), 1)
        return tc.add(tc.sum_all(z), tc.cross_entropy(tc.sub(tc.scale(y, 0.5), y), [0, 1, 2]))

    assert tc.finite_difference_check(f, {"x": x, "w": w, "g": g, "b": b}) < 1e-4


def test_no_grad_records_nothing():
    w = _leaf([1.0])
    with tc.no_grad():
        y = tc.mul(w, w)
    assert y._backward is None
