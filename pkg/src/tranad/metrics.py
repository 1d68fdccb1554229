"""Detection and diagnosis metrics.

Detection: precision / recall / F1 over binary timestamp labels, rank-based
ROC AUC, and optional point adjustment (a correct hit anywhere inside a
ground-truth anomaly segment counts the whole segment as detected).

Diagnosis: HitRate@P% and NDCG@P% over per-timestamp dimension rankings,
where the candidate count at a timestamp with G truly anomalous dimensions
is floor(G * P / 100).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .errors import DegenerateTruth, LengthMismatch, NoAnomalousTimestamps


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    auc: float
    tp: int
    fp: int
    fn: int
    tn: int
    point_adjusted: bool = False
    degenerate: bool = False
    hitrate_100: float = None
    hitrate_150: float = None
    ndcg_100: float = None
    ndcg_150: float = None

    def to_dict(self):
        return asdict(self)


def prf1(pred, truth):
    """Precision, recall, F1 with the zero-denominator-means-zero convention."""
    pred, truth = _as_binary(pred, truth)
    tp = int(np.sum((pred == 1) & (truth == 1)))
    fp = int(np.sum((pred == 1) & (truth == 0)))
    fn = int(np.sum((pred == 0) & (truth == 1)))
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def confusion(pred, truth):
    pred, truth = _as_binary(pred, truth)
    tp = int(np.sum((pred == 1) & (truth == 1)))
    fp = int(np.sum((pred == 1) & (truth == 0)))
    fn = int(np.sum((pred == 0) & (truth == 1)))
    tn = int(np.sum((pred == 0) & (truth == 0)))
    return tp, fp, fn, tn


def _as_binary(pred, truth):
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise LengthMismatch(f"pred length {pred.size} != truth length {truth.size}")
    return pred, truth


def roc_auc(scores, truth):
    """Rank-based AUC (Mann-Whitney statistic) with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth).ravel()
    if scores.shape != truth.shape:
        raise LengthMismatch("scores and truth lengths differ")
    npos = int(np.sum(truth == 1))
    nneg = int(np.sum(truth == 0))
    if npos == 0 or nneg == 0:
        raise DegenerateTruth("AUC needs at least one positive and one negative")
    ranks = _midranks(scores)
    pos_rank_sum = ranks[truth == 1].sum()
    return float((pos_rank_sum - npos * (npos + 1) / 2) / (npos * nneg))


def _midranks(x):
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size, dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def point_adjust(pred, truth):
    """Expand any in-segment hit to the full ground-truth anomaly segment.
    Never flips a prediction from 1 to 0."""
    pred, truth = _as_binary(pred, truth)
    adjusted = pred.copy()
    t = 0
    n = truth.size
    while t < n:
        if truth[t] == 1:
            start = t
            while t < n and truth[t] == 1:
                t += 1
            if adjusted[start:t].any():
                adjusted[start:t] = 1
        else:
            t += 1
    return adjusted


def _candidate_count(g, p_pct):
    return int(math.floor(g * p_pct / 100.0))


def _qualifying(rankings, truth):
    truth = np.asarray(truth)
    if len(rankings) != truth.shape[0]:
        raise LengthMismatch("rankings and truth lengths differ")
    ts = [t for t in range(truth.shape[0]) if truth[t].sum() > 0]
    if not ts:
        raise NoAnomalousTimestamps("no timestamp has an anomalous dimension")
    return ts, truth


def hitrate_at(rankings, truth, p_pct):
    """Mean fraction of truly anomalous dimensions found among the top
    floor(G * P / 100) ranked candidates, over anomalous timestamps."""
    ts, truth = _qualifying(rankings, truth)
    total = 0.0
    for t in ts:
        true_dims = set(np.flatnonzero(truth[t]))
        g = len(true_dims)
        top = rankings[t][:_candidate_count(g, p_pct)]
        total += len(true_dims.intersection(top)) / g
    return total / len(ts)


def ndcg_at(rankings, truth, p_pct):
    """Mean normalized discounted cumulative gain with binary relevance over
    the same candidate sets as hitrate_at."""
    ts, truth = _qualifying(rankings, truth)
    total = 0.0
    for t in ts:
        true_dims = set(np.flatnonzero(truth[t]))
        g = len(true_dims)
        k = _candidate_count(g, p_pct)
        top = rankings[t][:k]
        dcg = sum(1.0 / math.log2(rank + 2)
                  for rank, dim in enumerate(top) if dim in true_dims)
        idcg = sum(1.0 / math.log2(rank + 2) for rank in range(min(g, k)))
        total += dcg / idcg if idcg > 0 else 0.0
    return total / len(ts)


def evaluate(scores_agg, pred, truth, point_adjusted=False,
             rankings=None, dim_truth=None):
    """Assemble the full report for one detection run.

    scores_agg: per-timestamp aggregate scores (for AUC); pred/truth: binary
    timestamp labels; rankings/dim_truth enable the diagnosis metrics.
    """
    pred, truth = _as_binary(pred, truth)
    if point_adjusted:
        pred = point_adjust(pred, truth)
    p, r, f1 = prf1(pred, truth)
    tp, fp, fn, tn = confusion(pred, truth)
    degenerate = (tp + fp == 0) or (tp + fn == 0)
    try:
        auc = roc_auc(scores_agg, truth)
    except DegenerateTruth:
        auc = float("nan")
        degenerate = True
    report = EvalReport(precision=p, recall=r, f1=f1, auc=auc,
                        tp=tp, fp=fp, fn=fn, tn=tn,
                        point_adjusted=point_adjusted, degenerate=degenerate)
    if rankings is not None and dim_truth is not None:
        try:
            report.hitrate_100 = hitrate_at(rankings, dim_truth, 100)
            report.hitrate_150 = hitrate_at(rankings, dim_truth, 150)
            report.ndcg_100 = ndcg_at(rankings, dim_truth, 100)
            report.ndcg_150 = ndcg_at(rankings, dim_truth, 150)
        except NoAnomalousTimestamps:
            pass
    return report
