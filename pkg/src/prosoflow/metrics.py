"""Objective evaluation: DTW-aligned log-F0 RMSE, break F1, and WER.

All three are pure functions.  The RMSE uses the natural logarithm and a
symmetric-step DTW whose local cost on voiced/voiced pairs is the squared
difference of *register-centered* log f0 (each contour's log values are
shifted by their own voiced mean before alignment); voiced/unvoiced
mismatches cost a fixed 1.0 and both-unvoiced pairs are free.  Centering
makes the alignment invariant to a constant pitch scaling, so two
contours in a constant ratio align on the identity path and the reported
value — computed post-alignment on the raw values — equals |log ratio|
exactly.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .corpus import BreakAnnotation
from .pitch import PitchContour

UV_MISMATCH_PENALTY = 1.0


class UndefinedMetricError(Exception):
    """The metric is undefined for these inputs (e.g. no voiced overlap)."""


def _dtw_path(cost: np.ndarray) -> list[tuple[int, int]]:
    """Symmetric-step DTW ((1,1),(1,0),(0,1)); returns the optimal path."""
    n, m = cost.shape
    acc = np.full((n, m), np.inf)
    acc[0, 0] = cost[0, 0]
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best = np.inf
            if i > 0 and j > 0:
                best = acc[i - 1, j - 1]
            if i > 0:
                best = min(best, acc[i - 1, j])
            if j > 0:
                best = min(best, acc[i, j - 1])
            acc[i, j] = cost[i, j] + best
    path = [(n - 1, m - 1)]
    i, j = n - 1, m - 1
    while (i, j) != (0, 0):
        candidates = []
        if i > 0 and j > 0:
            candidates.append((acc[i - 1, j - 1], (i - 1, j - 1)))
        if i > 0:
            candidates.append((acc[i - 1, j], (i - 1, j)))
        if j > 0:
            candidates.append((acc[i, j - 1], (i, j - 1)))
        _, (i, j) = min(candidates, key=lambda c: c[0])
        path.append((i, j))
    path.reverse()
    return path


def rmse_f0(gt: PitchContour, syn: PitchContour) -> float:
    """DTW-aligned RMSE of log f0 ratios over both-voiced frame pairs."""
    if len(gt) == 0 or len(syn) == 0:
        raise UndefinedMetricError("rmse_f0 needs nonempty contours")
    gv = gt.voiced
    sv = syn.voiced
    if not gv.any() or not sv.any():
        raise UndefinedMetricError("rmse_f0 needs voiced frames in both contours")
    cost = np.full((len(gt), len(syn)), UV_MISMATCH_PENALTY)
    both_un = np.outer(~gv, ~sv)
    cost[both_un] = 0.0
    log_gt = np.log(gt.f0[gv])
    log_syn = np.log(syn.f0[sv])
    centered_gt = log_gt - log_gt.mean()
    centered_syn = log_syn - log_syn.mean()
    cost[np.ix_(gv, sv)] = np.subtract.outer(centered_gt, centered_syn) ** 2
    path = _dtw_path(cost)
    residuals = [
        np.log(gt.f0[i] / syn.f0[j]) for i, j in path if gv[i] and sv[j]
    ]
    if not residuals:
        raise UndefinedMetricError("no aligned pair has both contours voiced")
    return float(np.sqrt(np.mean(np.square(residuals))))


def break_f1(
    gt_breaks: BreakAnnotation, detected: BreakAnnotation
) -> tuple[float, float, float]:
    """Exact word-index matching; returns (precision, recall, F1).

    Conventions: precision (recall) is 1 when both sets are empty and 0
    when only the prediction (truth) is empty; F1 is 0 when P + R = 0.
    """
    gt = set(gt_breaks.last_word_indices)
    pred = set(detected.last_word_indices)
    tp = len(gt & pred)
    precision = tp / len(pred) if pred else (1.0 if not gt else 0.0)
    recall = tp / len(gt) if gt else (1.0 if not pred else 0.0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def wer(ref_words: Sequence[str], hyp_words: Sequence[str]) -> float:
    """Word error rate: Levenshtein edit distance / reference length."""
    if len(ref_words) == 0:
        raise ValueError("WER is undefined for an empty reference")
    n, m = len(ref_words), len(hyp_words)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (ref_words[i - 1] != hyp_words[j - 1])
            dist[i, j] = min(sub, dist[i - 1, j] + 1, dist[i, j - 1] + 1)
    return float(dist[n, m]) / n
