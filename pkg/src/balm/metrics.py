"""Accuracy and support-weighted F1."""

import numpy as np


def _pair(pred, true):
    pred = np.asarray(pred, dtype=np.int64).ravel()
    true = np.asarray(true, dtype=np.int64).ravel()
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions, {true.size} labels")
    return pred, true


def confusion_matrix(pred, true, num_classes):
    """Counts with rows = true class, columns = predicted class."""
    pred, true = _pair(pred, true)
    if pred.size and (min(pred.min(), true.min()) < 0 or max(pred.max(), true.max()) >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def accuracy(pred, true):
    pred, true = _pair(pred, true)
    if pred.size == 0:
        raise ValueError("accuracy of an empty sequence is undefined")
    return float(np.mean(pred == true))


def weighted_f1(pred, true, num_classes):
    """Per-class F1 averaged with weights equal to true-class support.

    A class whose precision and recall are both zero scores 0; classes with
    no true samples get weight 0.
    """
    cm = confusion_matrix(pred, true, num_classes)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    # F1 = 2TP / (2TP + FP + FN) = 2TP / (support + predicted)
    denom = support + predicted
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    total = support.sum()
    if total == 0:
        raise ValueError("weighted F1 of an empty sequence is undefined")
    return float(f1 @ support / total)
