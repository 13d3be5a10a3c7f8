"""Partition agreement indices and novelty-detection scores."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from sklearn import metrics as skm


def _check(labels_a, labels_b):
    a = np.asarray(labels_a).reshape(-1)
    b = np.asarray(labels_b).reshape(-1)
    if len(a) != len(b):
        raise ValueError(f"label vectors differ in length: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("label vectors are empty")
    return a, b


def ari(labels_a, labels_b) -> float:
    a, b = _check(labels_a, labels_b)
    return float(skm.adjusted_rand_score(a, b))


def ami(labels_a, labels_b) -> float:
    """Adjusted mutual information, normalized by the larger entropy."""
    a, b = _check(labels_a, labels_b)
    return float(skm.adjusted_mutual_info_score(a, b, average_method="max"))


def fmi(labels_a, labels_b) -> float:
    a, b = _check(labels_a, labels_b)
    _, counts_a = np.unique(a, return_counts=True)
    _, counts_b = np.unique(b, return_counts=True)
    if np.all(counts_a == 1) or np.all(counts_b == 1):
        warnings.warn("a partition has no co-clustered pairs; FMI defined as 0", RuntimeWarning)
        return 0.0
    return float(skm.fowlkes_mallows_score(a, b))


def novelty_f1(true_labels, predicted, novelty_ids: Iterable[int], n_known: int) -> Optional[float]:
    """F1 of the binary novelty decision; ``None`` when no true novelty exists.

    A prediction counts as novelty when its cluster id exceeds ``n_known``.
    """
    t, pred = _check(true_labels, predicted)
    truth = np.isin(t, list(novelty_ids))
    if not truth.any():
        return None
    flagged = pred > n_known
    tp = np.sum(truth & flagged)
    if tp == 0:
        return 0.0
    precision = tp / flagged.sum()
    recall = tp / truth.sum()
    return float(2 * precision * recall / (precision + recall))


@dataclass
class ConfusionMatrix:
    row_ids: np.ndarray
    col_ids: np.ndarray
    counts: np.ndarray

    def to_rows(self, row_names=None, col_names=None):
        row_names = row_names or {}
        col_names = col_names or {}
        header = ["true\\pred"] + [str(col_names.get(int(c), c)) for c in self.col_ids]
        out = [header]
        for rid, row in zip(self.row_ids, self.counts):
            out.append([str(row_names.get(int(rid), rid))] + [int(v) for v in row])
        return out


def confusion_matrix(true_labels, predicted) -> ConfusionMatrix:
    t, p = _check(true_labels, predicted)
    rows, t_idx = np.unique(t, return_inverse=True)
    cols, p_idx = np.unique(p, return_inverse=True)
    counts = np.zeros((len(rows), len(cols)), dtype=int)
    np.add.at(counts, (t_idx, p_idx), 1)
    return ConfusionMatrix(rows, cols, counts)


def all_metrics(true_labels, predicted, novelty_ids=(), n_known: Optional[int] = None) -> dict:
    out = {"ari": ari(true_labels, predicted), "ami": ami(true_labels, predicted),
           "fmi": fmi(true_labels, predicted)}
    if n_known is not None:
        out["novelty_f1"] = novelty_f1(true_labels, predicted, novelty_ids, n_known)
    return out
