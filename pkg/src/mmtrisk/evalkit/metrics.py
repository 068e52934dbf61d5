"""AUROC and average precision with explicit tie handling."""

import numpy as np

from ..numcore import kernels


class DegenerateLabels(ValueError):
    """The label set cannot support the metric (e.g. a single class)."""


def _prep(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    return s, y.astype(bool)


def auroc(scores, labels):
    """Mann-Whitney AUROC: P(s+ > s-) + P(s+ == s-)/2, via average ranks."""
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("degenerate label set: need at least one positive and one negative")
    ranks = kernels.average_ranks(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _grouped_sweep(s, y):
    """Cumulative TP/FP at the end of each tied-score group, highest score first."""
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    ends = np.r_[np.flatnonzero(s_sorted[1:] != s_sorted[:-1]), s.size - 1]
    tp = np.cumsum(y_sorted)[ends]
    fp = (ends + 1) - tp
    return s_sorted[ends], tp, fp


def auprc(scores, labels):
    """Average precision over a descending sweep with tied scores grouped."""
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise DegenerateLabels("degenerate label set: no positives")
    _, tp, fp = _grouped_sweep(s, y)
    precision = tp / (tp + fp)
    recall_step = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(recall_step * precision))


def roc_curve(scores, labels):
    """(fpr, tpr, thresholds) at every distinct score, starting from (0, 0)."""
    s, y = _prep(scores, labels)
    thr, tp, fp = _grouped_sweep(s, y)
    n_pos, n_neg = y.sum(), y.size - y.sum()
    return (
        np.r_[0.0, fp / max(n_neg, 1)],
        np.r_[0.0, tp / max(n_pos, 1)],
        np.r_[np.inf, thr],
    )


def pr_curve(scores, labels):
    """(recall, precision, thresholds) at every distinct score."""
    s, y = _prep(scores, labels)
    thr, tp, fp = _grouped_sweep(s, y)
    return tp / max(y.sum(), 1), tp / (tp + fp), thr
