"""Fused LSTM recurrence kernels.

The recurrence is the only genuinely sequential loop in the model, so it is
kept out of the autodiff graph: one forward kernel walks the sequence and
stores gate activations, one backward kernel runs truncation-free BPTT.

Both kernels exist twice, as numba ``@njit`` loops and as plain numpy.
``EMOCAPS_DISABLE_NUMBA=1`` selects the numpy versions at import time.

Layout is time-major: ``xp`` is ``(L, B, 4H)`` with gate blocks ordered
input, forget, candidate, output. ``xp`` already contains ``x @ W_ih + b``.
"""
import numpy as np

from ._accel import HAS_NUMBA, njit


def _sigmoid(z):
    # split on sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def lstm_forward_numpy(xp, w_hh):
    L, B, G = xp.shape
    H = G // 4
    gates = np.empty_like(xp)
    hs = np.empty((L, B, H), dtype=xp.dtype)
    cs = np.empty((L, B, H), dtype=xp.dtype)
    h = np.zeros((B, H), dtype=xp.dtype)
    c = np.zeros((B, H), dtype=xp.dtype)
    for t in range(L):
        z = xp[t] + h @ w_hh
        gates[t, :, :H] = _sigmoid(z[:, :H])
        gates[t, :, H:2 * H] = _sigmoid(z[:, H:2 * H])
        gates[t, :, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        gates[t, :, 3 * H:] = _sigmoid(z[:, 3 * H:])
        i, f, g, o = (gates[t, :, k * H:(k + 1) * H] for k in range(4))
        c = f * c + i * g
        h = o * np.tanh(c)
        cs[t] = c
        hs[t] = h
    return hs, cs, gates


def lstm_backward_numpy(dhs, hs, cs, gates, w_hh):
    L, B, H = hs.shape
    dxp = np.empty_like(gates)
    dw_hh = np.zeros_like(w_hh)
    dh_next = np.zeros((B, H), dtype=hs.dtype)
    dc_next = np.zeros((B, H), dtype=hs.dtype)
    zeros = np.zeros((B, H), dtype=hs.dtype)
    for t in range(L - 1, -1, -1):
        i, f, g, o = (gates[t, :, k * H:(k + 1) * H] for k in range(4))
        c_prev = cs[t - 1] if t > 0 else zeros
        h_prev = hs[t - 1] if t > 0 else zeros
        tc = np.tanh(cs[t])
        dh = dhs[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = dxp[t]
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dw_hh += h_prev.T @ dz
        dh_next = dz @ w_hh.T
    return dxp, dw_hh


@njit(cache=True)
def _sig1(z):
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    ez = np.exp(z)
    return ez / (1.0 + ez)


@njit(cache=True)
def lstm_forward_numba(xp, w_hh):
    L, B, G = xp.shape
    H = G // 4
    gates = np.empty_like(xp)
    hs = np.empty((L, B, H), dtype=xp.dtype)
    cs = np.empty((L, B, H), dtype=xp.dtype)
    h = np.zeros((B, H), dtype=xp.dtype)
    c = np.zeros((B, H), dtype=xp.dtype)
    for t in range(L):
        z = xp[t] + np.dot(h, w_hh)
        for b in range(B):
            for j in range(H):
                ig = _sig1(z[b, j])
                fg = _sig1(z[b, H + j])
                gg = np.tanh(z[b, 2 * H + j])
                og = _sig1(z[b, 3 * H + j])
                gates[t, b, j] = ig
                gates[t, b, H + j] = fg
                gates[t, b, 2 * H + j] = gg
                gates[t, b, 3 * H + j] = og
                cv = fg * c[b, j] + ig * gg
                c[b, j] = cv
                h[b, j] = og * np.tanh(cv)
                cs[t, b, j] = cv
                hs[t, b, j] = h[b, j]
    return hs, cs, gates


@njit(cache=True)
def lstm_backward_numba(dhs, hs, cs, gates, w_hh):
    L, B, H = hs.shape
    dxp = np.empty_like(gates)
    dw_hh = np.zeros_like(w_hh)
    w_hh_t = np.ascontiguousarray(w_hh.T)
    dh_next = np.zeros((B, H), dtype=hs.dtype)
    dc_next = np.zeros((B, H), dtype=hs.dtype)
    h_prev = np.zeros((B, H), dtype=hs.dtype)
    dz = np.empty((B, 4 * H), dtype=hs.dtype)
    for t in range(L - 1, -1, -1):
        for b in range(B):
            for j in range(H):
                ig = gates[t, b, j]
                fg = gates[t, b, H + j]
                gg = gates[t, b, 2 * H + j]
                og = gates[t, b, 3 * H + j]
                c_prev = cs[t - 1, b, j] if t > 0 else 0.0
                tc = np.tanh(cs[t, b, j])
                dh = dhs[t, b, j] + dh_next[b, j]
                dc = dc_next[b, j] + dh * og * (1.0 - tc * tc)
                dz[b, j] = dc * gg * ig * (1.0 - ig)
                dz[b, H + j] = dc * c_prev * fg * (1.0 - fg)
                dz[b, 2 * H + j] = dc * ig * (1.0 - gg * gg)
                dz[b, 3 * H + j] = dh * tc * og * (1.0 - og)
                dc_next[b, j] = dc * fg
                h_prev[b, j] = hs[t - 1, b, j] if t > 0 else 0.0
        dxp[t] = dz
        dw_hh += np.dot(h_prev.T, dz)
        dh_next = np.dot(dz, w_hh_t)
    return dxp, dw_hh


if HAS_NUMBA:
    lstm_forward = lstm_forward_numba
    lstm_backward = lstm_backward_numba
else:
    lstm_forward = lstm_forward_numpy
    lstm_backward = lstm_backward_numpy
