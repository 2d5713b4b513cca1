"""EmoCaps: Emoformer per modality -> emotion capsule -> Bi-LSTM -> classifier."""
from dataclasses import dataclass

import numpy as np

from . import context, emoformer
from . import tensor as tc
from .capsule import ALL_MODALITIES, build_capsule, mask_modalities
from .config import ModelConfig
from .errors import DimensionError


@dataclass
class Batch:
    """Stacked utterances of one or more dialogues, in dialogue order."""
    text: np.ndarray            # (N, d_t)
    audio: list                 # [(row indices, (n, T, d_a) array)] grouped by T
    visual: list
    labels: np.ndarray | None   # (N,) or None when any utterance is unlabeled
    lengths: list
    dialogue_ids: list
    utterance_ids: list

    @property
    def n_utterances(self):
        return self.text.shape[0]


def _group_by_len(arrays, dtype):
    groups = {}
    for i, a in enumerate(arrays):
        groups.setdefault(a.shape[0], []).append(i)
    return [(np.asarray(idx, dtype=np.intp), np.stack([arrays[i] for i in idx]).astype(dtype))
            for _, idx in sorted(groups.items())]


def collate(dialogues, dtype=np.float64):
    utts = [u for d in dialogues for u in d.utterances]
    labels = [u.label for u in utts]
    return Batch(
        text=np.stack([u.text_feat for u in utts]).astype(dtype),
        audio=_group_by_len([u.audio_feat for u in utts], dtype),
        visual=_group_by_len([u.visual_feat for u in utts], dtype),
        labels=None if any(y is None for y in labels) else np.asarray(labels, dtype=np.intp),
        lengths=[len(d.utterances) for d in dialogues],
        dialogue_ids=[d.id for d in dialogues for _ in d.utterances],
        utterance_ids=[u.id for u in utts],
    )


class EmoCaps:
    """Parameter container plus the forward pass.

    ``params`` is a flat ``{name: Tensor}`` dict with prefixes ``audio.``,
    ``visual.`` (Emoformer blocks), ``text.`` (mapping network) and
    ``context.`` (Bi-LSTM and head).
    """

    def __init__(self, config: ModelConfig, seed=0, params=None):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        if params is None:
            params = self._init_params(tc.Rng(seed))
        self.params = params

    def _init_params(self, rng):
        cfg, dt = self.config, self.dtype
        params = {}
        for modality in ("audio", "visual"):
            p = emoformer.init_emoformer_params(cfg.emoformer(modality), rng.spawn(hash_key(modality)), dt)
            params.update({f"{modality}.{k}": v for k, v in p.items()})
        p = emoformer.init_text_params(cfg.text_dim, cfg.text_emotion_dim, rng.spawn(hash_key("text")), dt)
        params.update({f"text.{k}": v for k, v in p.items()})
        p = context.init_context_params(cfg.capsule_dim, cfg.hidden_dim, cfg.mlp_dim, cfg.n_classes,
                                        rng.spawn(hash_key("context")), dt)
        params.update({f"context.{k}": v for k, v in p.items()})
        for name, t in params.items():
            t.name = name
        return params

    def group(self, prefix):
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def check_batch(self, batch):
        cfg = self.config
        got = (batch.text.shape[1], batch.audio[0][1].shape[-1], batch.visual[0][1].shape[-1])
        want = (cfg.text_dim, cfg.audio_dim, cfg.visual_dim)
        if got != want:
            raise DimensionError(f"data feature dims (text, audio, visual)={got} but model expects {want}")

    def _modality_vectors(self, groups, modality, n, rng, training):
        cfg = self.config.emoformer(modality)
        params = self.group(modality)
        outs, order = [], []
        for idx, arr in groups:
            outs.append(emoformer.emoformer_forward(tc.Tensor(arr), params, cfg, rng, training))
            order.append(idx)
        if len(outs) == 1:
            return outs[0]
        stacked = tc.concat_rows(outs)
        inverse = np.empty(n, dtype=np.intp)
        inverse[np.concatenate(order)] = np.arange(n)
        return tc.take_rows(stacked, inverse)

    def capsules(self, batch, rng=None, training=False, keep=ALL_MODALITIES):
        self.check_batch(batch)
        n = batch.n_utterances
        U_t = tc.Tensor(batch.text)
        E_t = emoformer.text_emotion_path(U_t, self.group("text"))
        E_v = self._modality_vectors(batch.visual, "visual", n, rng, training)
        E_a = self._modality_vectors(batch.audio, "audio", n, rng, training)
        cap = build_capsule(U_t, E_t, E_v, E_a, self.config.capsule_extents)
        if frozenset(keep) != ALL_MODALITIES:
            cap = mask_modalities(cap, keep)
        return cap

    def logits(self, batch, rng=None, training=False, keep=ALL_MODALITIES):
        cap = self.capsules(batch, rng, training, keep)
        x = tc.dropout(cap.vector, self.config.dropout, rng, training)
        ctx = self.group("context")
        C = context.bilstm_context(x, ctx, batch.lengths)
        return context.head_logits(C, ctx)

    def loss(self, batch, rng=None, training=False, keep=ALL_MODALITIES):
        if batch.labels is None:
            raise DimensionError("loss needs every utterance labeled")
        return tc.cross_entropy(self.logits(batch, rng, training, keep), batch.labels)

    def predict_proba(self, batch, keep=ALL_MODALITIES):
        with tc.no_grad():
            return tc.softmax_rows(self.logits(batch, None, False, keep)).data

    def n_parameters(self):
        return sum(p.size for p in self.params.values())


def hash_key(name):
    """Stable small integer for deriving per-component rng streams."""
    return sum((i + 1) * ord(c) for i, c in enumerate(name))
