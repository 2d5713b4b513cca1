"""Bi-LSTM context model and classifier head."""
import numpy as np

from . import tensor as tc
from .errors import DimensionError, UsageError


def init_lstm_params(d_in, d_h, rng, dtype=tc.DEFAULT_DTYPE):
    return {
        "W_ih": tc.init_weight(rng, d_in, 4 * d_h, dtype),
        "W_hh": tc.init_weight(rng, d_h, 4 * d_h, dtype),
        "b": tc.init_const(0.0, 4 * d_h, dtype),
    }


def init_context_params(d_in, d_h, d_mlp, n_classes, rng, dtype=tc.DEFAULT_DTYPE):
    params = {}
    for direction in ("fwd", "bwd"):
        for k, v in init_lstm_params(d_in, d_h, rng, dtype).items():
            params[f"{direction}.{k}"] = v
    params["W_l"] = tc.init_weight(rng, 2 * d_h, d_mlp, dtype)
    params["b_l"] = tc.init_const(0.0, d_mlp, dtype)
    params["W_smax"] = tc.init_weight(rng, d_mlp, n_classes, dtype)
    params["b_smax"] = tc.init_const(0.0, n_classes, dtype)
    return params


def _direction(params, prefix):
    return {k: params[f"{prefix}.{k}"] for k in ("W_ih", "W_hh", "b")}


def sequence_indices(lengths):
    """Gather indices for packing concatenated dialogues into padded batches.

    Returns ``(fwd, bwd, out_fwd, out_bwd, L)``: ``fwd``/``bwd`` are ``(B, L)``
    row indices into the stacked utterances (``bwd`` reversed within each
    dialogue); ``out_*`` map every utterance back to its flattened
    ``(B * L)`` output slot. Padding sits past each dialogue's end, so it
    never influences real steps.
    """
    lengths = [int(n) for n in lengths]
    if not lengths or min(lengths) < 1:
        raise UsageError("bilstm_context: empty dialogue")
    B, L = len(lengths), max(lengths)
    fwd = np.zeros((B, L), dtype=np.intp)
    bwd = np.zeros((B, L), dtype=np.intp)
    out_fwd = np.empty(sum(lengths), dtype=np.intp)
    out_bwd = np.empty(sum(lengths), dtype=np.intp)
    off = 0
    for b, n in enumerate(lengths):
        t = np.arange(n)
        fwd[b] = off
        bwd[b] = off
        fwd[b, :n] = off + t
        bwd[b, :n] = off + n - 1 - t
        out_fwd[off:off + n] = b * L + t
        out_bwd[off:off + n] = b * L + n - 1 - t
        off += n
    return fwd, bwd, out_fwd, out_bwd, L


def bilstm_context(capsules, params, lengths=None, return_directions=False):
    """Context vectors ``C_i = h_fwd_i ⊕ h_bwd_i`` for stacked dialogues.

    ``capsules`` is ``(N, D)``: the utterances of one or more dialogues in
    conversational order, dialogue after dialogue. ``lengths`` gives the
    utterance count per dialogue (default: one dialogue of N).
    """
    x = tc.as_tensor(capsules)
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise UsageError(f"bilstm_context: expected a nonempty (N, D) sequence, got {x.shape}")
    if lengths is None:
        lengths = [x.shape[0]]
    if sum(lengths) != x.shape[0]:
        raise DimensionError(f"bilstm_context: lengths sum to {sum(lengths)}, have {x.shape[0]} rows")
    d_in = params["fwd.W_ih"].shape[0]
    if x.shape[1] != d_in:
        raise DimensionError(f"bilstm_context: capsule extent {x.shape[1]} vs LSTM input {d_in}")
    fwd, bwd, out_fwd, out_bwd, L = sequence_indices(lengths)
    B = len(lengths)
    H = params["fwd.W_hh"].shape[0]
    D = x.shape[1]
    hf = tc.lstm_sequence(tc.reshape(tc.take_rows(x, fwd.ravel()), (B, L, D)),
                          _direction(params, "fwd"))
    hb = tc.lstm_sequence(tc.reshape(tc.take_rows(x, bwd.ravel()), (B, L, D)),
                          _direction(params, "bwd"))
    h_fwd = tc.take_rows(tc.reshape(hf, (B * L, H)), out_fwd)
    h_bwd = tc.take_rows(tc.reshape(hb, (B * L, H)), out_bwd)
    C = tc.concat_last_axis([h_fwd, h_bwd])
    return (C, h_fwd, h_bwd) if return_directions else C


def head_logits(C, params):
    hidden = tc.relu(tc.linear(C, params["W_l"], params["b_l"]))
    return tc.linear(hidden, params["W_smax"], params["b_smax"])


def classify(C, params):
    """Probability vector(s) over the label set."""
    return tc.softmax_rows(head_logits(C, params))


def predict(P):
    """Argmax label index; ties go to the lowest index."""
    P = np.asarray(P.data if isinstance(P, tc.Tensor) else P)
    return np.argmax(P, axis=-1)
