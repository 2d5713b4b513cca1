"""Classification metrics: confusion matrix, per-class P/R/F1, weighted F1."""
import numpy as np


def confusion_matrix(y_true, y_pred, n_classes):
    """``cm[i, j]`` counts utterances with gold ``i`` predicted as ``j``."""
    y_true = np.asarray(y_true, dtype=np.intp)
    y_pred = np.asarray(y_pred, dtype=np.intp)
    flat = np.bincount(y_true * n_classes + y_pred, minlength=n_classes * n_classes)
    return flat.reshape(n_classes, n_classes)


def _safe_div(num, den):
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def per_class_scores(cm):
    """(precision, recall, f1, support) arrays; zero wherever a denominator is zero."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    support = cm.sum(axis=1)
    precision = _safe_div(tp, predicted)
    recall = _safe_div(tp, support)
    f1 = _safe_div(2.0 * precision * recall, precision + recall)
    return precision, recall, f1, support.astype(np.int64)


def weighted_f1(y_true, y_pred, n_classes):
    cm = confusion_matrix(y_true, y_pred, n_classes)
    _, _, f1, support = per_class_scores(cm)
    total = support.sum()
    return float((f1 * support).sum() / total) if total else 0.0
