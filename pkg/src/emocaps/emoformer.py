"""Emoformer: encoder block + residual concat + 5-layer mapping network.

All functions accept a feature sequence ``U`` of shape ``(T, d_model)`` or a
batch ``(N, T, d_model)``; the sequence axis is always second to last.
"""
import math

import numpy as np

from . import tensor as tc
from .errors import DimensionError

MAP_DEPTH = 5


def mapping_widths(d_in, d_out, depth=MAP_DEPTH):
    """Layer widths interpolated geometrically from ``d_in`` to ``d_out``."""
    ratio = d_out / d_in
    widths = [d_in]
    for k in range(1, depth):
        widths.append(max(1, int(round(d_in * ratio ** (k / depth)))))
    widths.append(d_out)
    return widths


def init_mapping_params(d_in, d_out, rng, dtype=tc.DEFAULT_DTYPE):
    params = {}
    widths = mapping_widths(d_in, d_out)
    for k in range(MAP_DEPTH):
        params[f"map{k}.W"] = tc.init_weight(rng, widths[k], widths[k + 1], dtype)
        params[f"map{k}.b"] = tc.init_const(0.0, widths[k + 1], dtype)
    return params


def init_emoformer_params(cfg, rng, dtype=tc.DEFAULT_DTYPE):
    d, f = cfg.d_model, cfg.d_ff
    params = {
        "W_Q": tc.init_weight(rng, d, d, dtype),
        "W_K": tc.init_weight(rng, d, d, dtype),
        "W_V": tc.init_weight(rng, d, d, dtype),
        "W_O": tc.init_weight(rng, d, d, dtype),
        "ln1.gamma": tc.init_const(1.0, d, dtype),
        "ln1.beta": tc.init_const(0.0, d, dtype),
        "W_1": tc.init_weight(rng, d, f, dtype),
        "b_1": tc.init_const(0.0, f, dtype),
        "W_2": tc.init_weight(rng, f, d, dtype),
        "b_2": tc.init_const(0.0, d, dtype),
        "ln2.gamma": tc.init_const(1.0, d, dtype),
        "ln2.beta": tc.init_const(0.0, d, dtype),
    }
    params.update(init_mapping_params(2 * d, cfg.d_emotion, rng, dtype))
    return params


def mapping_depth(params):
    return sum(1 for k in params if k.startswith("map") and k.endswith(".W"))


def _check_width(U, d, what):
    if U.shape[-1] != d:
        raise DimensionError(f"{what}: feature extent {U.shape[-1]} does not match {d}")


def project_qkv(U, params):
    d = params["W_Q"].shape[0]
    _check_width(U, d, "project_qkv")
    return (tc.matmul(U, params["W_Q"]), tc.matmul(U, params["W_K"]),
            tc.matmul(U, params["W_V"]))


def scaled_dot_attention(Q, K, V, scale_dim=None, return_weights=False):
    """softmax(Q K^T / sqrt(scale_dim)) V; ``scale_dim`` defaults to the head width."""
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"attention: Q {Q.shape}, K {K.shape}, V {V.shape} do not line up")
    nd = len(K.shape)
    perm = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    scores = tc.scale(tc.matmul(Q, tc.transpose(K, perm)),
                      1.0 / math.sqrt(scale_dim or Q.shape[-1]))
    weights = tc.softmax_rows(scores)
    out = tc.matmul(weights, V)
    return (out, weights) if return_weights else out


def _split_heads(x, n_heads):
    *lead, T, d = x.shape
    x = tc.reshape(x, (*lead, T, n_heads, d // n_heads))
    nd = len(lead)
    return tc.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))


def _merge_heads(x):
    *lead, h, T, dh = x.shape
    nd = len(lead)
    x = tc.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))
    return tc.reshape(x, (*lead, T, h * dh))


def multi_head_attention(U, params, n_heads, attention_scale="d_head", return_weights=False):
    d = params["W_Q"].shape[0]
    if d % n_heads:
        raise DimensionError(f"cannot split d_model={d} into {n_heads} heads")
    Q, K, V = project_qkv(U, params)
    scale_dim = d // n_heads if attention_scale == "d_head" else d
    heads, weights = scaled_dot_attention(_split_heads(Q, n_heads), _split_heads(K, n_heads),
                                          _split_heads(V, n_heads), scale_dim=scale_dim,
                                          return_weights=True)
    out = tc.matmul(_merge_heads(heads), params["W_O"])
    return (out, weights) if return_weights else out


def feed_forward(N, params):
    hidden = tc.relu(tc.linear(N, params["W_1"], params["b_1"]))
    return tc.linear(hidden, params["W_2"], params["b_2"])


def encoder_block(U, params, cfg, rng=None, training=False):
    """Post-norm encoder: LN(U + drop(MHA(U))), then LN(N + drop(FFN(N)))."""
    _check_width(U, cfg.d_model, "encoder_block")
    attn = multi_head_attention(U, params, cfg.n_heads, cfg.attention_scale)
    N = tc.layer_norm(tc.add(U, tc.dropout(attn, cfg.dropout_rate, rng, training)),
                      params["ln1.gamma"], params["ln1.beta"])
    F = feed_forward(N, params)
    return tc.layer_norm(tc.add(N, tc.dropout(F, cfg.dropout_rate, rng, training)),
                         params["ln2.gamma"], params["ln2.beta"])


def residual_concat(U, G):
    if U.shape != G.shape:
        raise DimensionError(f"residual_concat: U {U.shape} and G {G.shape} differ")
    return tc.concat_last_axis([U, G])


def mapping_network(H, params, pool=True):
    """Mean-pool over the sequence axis (if ``pool``), then 5 FC layers.

    ReLU between layers, linear output.
    """
    x = tc.mean_axis(H, -2) if pool else H
    _check_width(x, params["map0.W"].shape[0], "mapping_network")
    for k in range(MAP_DEPTH):
        x = tc.linear(x, params[f"map{k}.W"], params[f"map{k}.b"])
        if k < MAP_DEPTH - 1:
            x = tc.relu(x)
    return x


def emoformer_forward(U, params, cfg, rng=None, training=False):
    """Emotion vector ``(d_emotion,)`` (or ``(N, d_emotion)``) for a feature sequence."""
    G = encoder_block(U, params, cfg, rng, training)
    return mapping_network(residual_concat(U, G), params)


def init_text_params(d_text, d_emotion, rng, dtype=tc.DEFAULT_DTYPE):
    return init_mapping_params(d_text, d_emotion, rng, dtype)


def text_emotion_path(U_t, params):
    """Attention-free text path: the mapping network applied to the sentence vector."""
    return mapping_network(U_t, params, pool=False)


def attention_weights(U, params, cfg):
    """Attention maps ``(..., h, T, T)`` for inspection; no graph is kept."""
    with tc.no_grad():
        _, w = multi_head_attention(tc.as_tensor(U), params, cfg.n_heads, cfg.attention_scale,
                                    return_weights=True)
    return np.asarray(w.data)
