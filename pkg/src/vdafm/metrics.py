"""Binary classification metrics and the cross-modal alignment angle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch, ShapeMismatch, SingleClass, ZeroNorm

THRESHOLD = 0.5


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(p, y, threshold: float = THRESHOLD) -> ConfusionCounts:
    """Tally predictions; ``p >= threshold`` predicts the positive class."""
    p, y = np.asarray(p, dtype=np.float64), np.asarray(y)
    if p.shape != y.shape:
        raise LengthMismatch(f"{p.shape} probabilities vs {y.shape} labels")
    pred = p >= threshold
    pos = y == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
    )


def _ratio(num: int, den: int, name: str, degenerate: list) -> float:
    if den == 0:
        degenerate.append(name)
        return 0.0
    return num / den


def scalar_metrics(c: ConfusionCounts) -> dict:
    """acc, f1, recall, precision, specificity; 0/0 ratios become 0 and are
    listed under ``degenerate``."""
    degenerate: list[str] = []
    precision = _ratio(c.tp, c.tp + c.fp, "precision", degenerate)
    recall = _ratio(c.tp, c.tp + c.fn, "recall", degenerate)
    specificity = _ratio(c.tn, c.tn + c.fp, "specificity", degenerate)
    acc = _ratio(c.tp + c.tn, c.total, "acc", degenerate)
    f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "f1", degenerate)
    return {
        "acc": acc,
        "f1": f1,
        "recall": recall,
        "precision": precision,
        "specificity": specificity,
        "degenerate": degenerate,
    }


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    boundaries = np.flatnonzero(np.diff(sorted_x)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(x)]])
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + 1 + e) / 2.0
    return ranks


def roc_auc(p, y) -> float:
    """Area under the ROC curve via the Mann-Whitney rank-sum statistic."""
    p, y = np.asarray(p, dtype=np.float64), np.asarray(y)
    if p.shape != y.shape:
        raise LengthMismatch(f"{p.shape} probabilities vs {y.shape} labels")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs both classes present")
    ranks = _average_ranks(p)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def evaluate(p, y, threshold: float = THRESHOLD) -> dict:
    """All reported metrics in one dict (AUC is None for single-class y)."""
    out = scalar_metrics(confusion(p, y, threshold))
    try:
        out["auc"] = roc_auc(p, y)
    except SingleClass:
        out["auc"] = None
    return out


def alignment_angle(a, b) -> float:
    """Mean per-row angle in degrees between matched rows of ``a`` and ``b``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    ss_a, ss_b = (a * a).sum(axis=-1), (b * b).sum(axis=-1)
    if np.any(ss_a == 0) or np.any(ss_b == 0):
        raise ZeroNorm("alignment_angle on a zero row")
    cos = np.clip((a * b).sum(axis=-1) / np.sqrt(ss_a * ss_b), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())
