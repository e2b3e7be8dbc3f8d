"""Confusion-matrix metrics: accuracy, per-class precision/recall/F1, and
support-weighted / macro F1 (zero-support classes excluded from averaging)."""
from __future__ import annotations

import numpy as np

from .errors import ContractError

Array = np.ndarray


def confusion_matrix(y_true, y_pred, n_classes: int = 3) -> Array:
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ContractError("confusion_matrix: label vectors must match")
    if y_true.size == 0:
        raise ContractError("confusion_matrix: empty input")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    return conf


def _check_conf(conf) -> Array:
    conf = np.asarray(conf)
    if conf.ndim != 2 or conf.shape[0] != conf.shape[1]:
        raise ContractError(f"confusion matrix must be square, got {conf.shape}")
    if np.any(conf < 0) or conf.sum() == 0:
        raise ContractError("confusion matrix must hold nonnegative counts with a nonzero total")
    return conf.astype(np.float64)


def accuracy(conf) -> float:
    conf = _check_conf(conf)
    return float(np.trace(conf) / conf.sum())


def per_class_stats(conf) -> list[dict]:
    conf = _check_conf(conf)
    out = []
    for c in range(conf.shape[0]):
        tp = conf[c, c]
        fn = conf[c].sum() - tp
        fp = conf[:, c].sum() - tp
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        out.append({
            "precision": float(precision),
            "recall": float(recall),
            "f1": float(f1),
            "support": int(conf[c].sum()),
        })
    return out


def weighted_f1(conf) -> float:
    """Support-weighted mean of per-class F1; zero-support classes excluded."""
    stats = per_class_stats(conf)
    supports = np.array([s["support"] for s in stats], dtype=np.float64)
    f1s = np.array([s["f1"] for s in stats])
    present = supports > 0
    return float(np.sum(f1s[present] * supports[present]) / supports[present].sum())


def macro_f1(conf) -> float:
    """Unweighted mean of per-class F1 over classes with nonzero support."""
    stats = per_class_stats(conf)
    vals = [s["f1"] for s in stats if s["support"] > 0]
    return float(np.mean(vals))
