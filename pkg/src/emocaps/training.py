"""Training loop, evaluation report and modality ablation."""
import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics
from . import tensor as tc
from .capsule import ABLATION_SETTINGS, ALL_MODALITIES, setting_name
from .config import TrainConfig
from .errors import NumericError, UsageError
from .model import collate

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    loss_log: list
    dev_f1: list = field(default_factory=list)
    best_epoch: int | None = None
    best_dev_f1: float | None = None
    best_params: dict | None = None


def snapshot(params):
    return {k: p.data.copy() for k, p in params.items()}


def restore(params, snap):
    for k, p in params.items():
        p.data[...] = snap[k]


def train(model, dialogues, config: TrainConfig, dev=None, keep=ALL_MODALITIES, on_epoch=None):
    """Fit ``model`` in place; returns a :class:`TrainResult`.

    Batches are ``config.batch_size`` whole dialogues; the loss is the mean
    cross-entropy over the utterances of a batch. With ``dev`` given, the
    parameters of the best dev weighted-F1 epoch are kept in
    ``result.best_params`` (the model itself ends at the final epoch).
    """
    if not dialogues:
        raise UsageError("train: empty training set")
    if any(u.label is None for d in dialogues for u in d.utterances):
        raise UsageError("train: every training utterance needs a label")
    rng = tc.Rng(config.seed)
    order_rng = rng.spawn(1)
    drop_rng = rng.spawn(2)
    params = model.params
    state = tc.AdamState(params, config.betas, config.eps)
    result = TrainResult(loss_log=[])
    dtype = model.dtype
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(len(dialogues))
        total, count = 0.0, 0
        for step, start in enumerate(range(0, len(order), config.batch_size), 1):
            batch = collate([dialogues[i] for i in order[start:start + config.batch_size]], dtype)
            for p in params.values():
                p.grad = None
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss = model.loss(batch, drop_rng, training=True, keep=keep)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} step {step}: {exc}") from None
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch} step {step}")
            loss.backward()
            for p in params.values():
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            tc.clip_grad_norm(params, config.clip_norm)
            tc.adam_step(params, state, config.lr)
            total += value * batch.n_utterances
            count += batch.n_utterances
        result.loss_log.append(total / count)
        dev_f1 = None
        if dev:
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    dev_f1 = evaluate(model, dev, keep=keep).weighted_f1
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} dev evaluation: {exc}") from None
            result.dev_f1.append(dev_f1)
            if result.best_dev_f1 is None or dev_f1 > result.best_dev_f1:
                result.best_dev_f1 = dev_f1
                result.best_epoch = epoch
                result.best_params = snapshot(params)
        if on_epoch is not None:
            on_epoch(epoch, result.loss_log[-1], dev_f1)
    return result


@dataclass
class EvalReport:
    label_names: tuple
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    weighted_f1: float
    confusion: np.ndarray
    probabilities: np.ndarray
    predictions: np.ndarray
    gold: np.ndarray
    dialogue_ids: list
    utterance_ids: list

    def to_dict(self):
        return {
            "weighted_f1": self.weighted_f1,
            "per_class": [
                {"label": name, "precision": float(p), "recall": float(r), "f1": float(f),
                 "support": int(s)}
                for name, p, r, f, s in zip(self.label_names, self.precision, self.recall,
                                            self.f1, self.support)],
            "confusion_matrix": self.confusion.tolist(),
            "n_utterances": int(self.confusion.sum()),
        }

    def per_class_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "precision", "recall", "f1", "support"])
        for name, p, r, f, s in zip(self.label_names, self.precision, self.recall, self.f1,
                                    self.support):
            w.writerow([name, repr(float(p)), repr(float(r)), repr(float(f)), int(s)])
        w.writerow(["weighted_avg", "", "", repr(self.weighted_f1), int(self.support.sum())])
        return buf.getvalue()

    def probability_csv(self):
        return probability_table(self.dialogue_ids, self.utterance_ids, self.predictions,
                                 self.probabilities, self.label_names)


def probability_table(dialogue_ids, utterance_ids, predictions, probabilities, label_names):
    """CSV with one row per utterance; probabilities written with ``repr`` so they round-trip."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dialogue_id", "utterance_id", "predicted"] + [f"p_{n}" for n in label_names])
    for d, u, y, row in zip(dialogue_ids, utterance_ids, predictions, probabilities):
        w.writerow([d, u, label_names[int(y)]] + [repr(float(x)) for x in row])
    return buf.getvalue()


def predict_dialogues(model, dialogues, keep=ALL_MODALITIES, batch_size=64, threads=1):
    """Eval-mode probabilities ``(N, m)``, argmax labels and ids, in dialogue order.

    Batches are independent, so ``threads > 1`` evaluates them concurrently
    with identical results.
    """
    batches = [collate(dialogues[s:s + batch_size], model.dtype)
               for s in range(0, len(dialogues), batch_size)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            probs = list(pool.map(lambda b: model.predict_proba(b, keep), batches))
    else:
        probs = [model.predict_proba(b, keep) for b in batches]
    dids = [x for b in batches for x in b.dialogue_ids]
    uids = [x for b in batches for x in b.utterance_ids]
    P = np.concatenate(probs).astype(np.float64)
    return P, np.argmax(P, axis=1), dids, uids


def evaluate(model, dialogues, label_names=None, keep=ALL_MODALITIES, threads=1):
    """Eval-mode predictions and metrics for labeled dialogues."""
    gold = [u.label for d in dialogues for u in d.utterances]
    if any(y is None for y in gold):
        raise UsageError("evaluate: every utterance needs a gold label")
    m = model.config.n_classes
    names = tuple(label_names) if label_names else tuple(f"class{c}" for c in range(m))
    P, pred, dids, uids = predict_dialogues(model, dialogues, keep, threads=threads)
    gold = np.asarray(gold, dtype=np.intp)
    cm = metrics.confusion_matrix(gold, pred, m)
    precision, recall, f1, support = metrics.per_class_scores(cm)
    total = support.sum()
    wf1 = float((f1 * support).sum() / total) if total else 0.0
    return EvalReport(names, precision, recall, f1, support, wf1, cm, P, pred, gold, dids, uids)


def run_ablation(model_factory, train_set, test_set, config, settings=None, seeds=(0,),
                 on_run=None):
    """Weighted test F1 per modality setting, one independent model per (setting, seed).

    ``model_factory(seed)`` returns a fresh model. ``settings`` is a list of
    modality sets; by default all six rows in their usual order. Returns a
    list of ``{"setting", "f1_per_seed", "mean_f1"}`` dicts in row order.
    """
    if settings is None:
        settings = [s for _, s in ABLATION_SETTINGS]
    rows = []
    for keep in settings:
        keep = frozenset(keep)
        scores = []
        for seed in seeds:
            model = model_factory(seed)
            cfg = replace(config, seed=seed)
            train(model, train_set, cfg, keep=keep)
            f1 = evaluate(model, test_set, keep=keep).weighted_f1
            scores.append(f1)
            if on_run is not None:
                on_run(setting_name(keep), seed, f1)
        rows.append({"setting": setting_name(keep), "f1_per_seed": scores,
                     "mean_f1": float(np.mean(scores))})
    return rows
