"""Online inference: two-phase scoring of a test stream, per-dimension
labeling against fitted thresholds, and root-cause ranking.

Each timestamp's score depends only on its own window and context (both end
at that timestamp), so records are identical whether the stream is truncated
at t or not; batching below is purely a speed device.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dataset import make_windows
from .training import batch_groups


@dataclass
class ScoreRecord:
    timestamp: int
    scores: np.ndarray        # (m,) nonnegative
    labels: np.ndarray        # (m,) in {0,1}
    label: int                # OR over dimensions

    def __post_init__(self):
        self.label = int(np.any(self.labels))


def score_window(model, W, C, score_reduce="last_row"):
    """Per-dimension anomaly scores for one window: the average of the squared
    phase-1 and conditioned phase-2 deviations."""
    scores = score_batch(model, W[None] if W.ndim == 2 else W,
                         C[None] if C.ndim == 2 else C, score_reduce)
    return scores[0]


def score_batch(model, W, C, score_reduce="last_row"):
    """Scores for a (B, K, m) window stack sharing one context length."""
    with ad.no_grad():
        out = model.forward_two_phase(W, C, training=False)
    d1 = (out.O1.data - W) ** 2
    d2 = (out.O2_hat.data - W) ** 2
    s = 0.5 * d1 + 0.5 * d2
    if score_reduce == "last_row":
        return s[:, -1, :]
    if score_reduce == "window_mean":
        return s.mean(axis=1)
    raise ValueError(f"unknown score_reduce {score_reduce!r}")


def score_series(model, series, score_reduce="last_row", batch_size=256):
    """Per-timestamp, per-dimension scores over a normalized series."""
    batch = make_windows(series, model.config.window_size, model.config.context_cap)
    scores = np.empty((len(batch), series.m))
    for W, C, idx in batch_groups(batch, batch_size):
        scores[idx] = score_batch(model, W, C, score_reduce)
    return scores


def detect_stream(model, test_series, threshold_model, score_reduce="last_row"):
    """One ScoreRecord per test timestamp, in time order."""
    scores = score_series(model, test_series, score_reduce)
    z = threshold_model.thresholds
    records = []
    for t in range(scores.shape[0]):
        labels = (scores[t] >= z).astype(np.int8)
        records.append(ScoreRecord(timestamp=t, scores=scores[t],
                                   labels=labels, label=int(labels.any())))
    return records


def diagnose(records):
    """Per-timestamp ranking of dimensions by descending score; ties broken
    by ascending dimension index."""
    if not records:
        raise ValueError("no records to diagnose")
    rankings = []
    for rec in records:
        # stable sort on negated scores gives the deterministic tie rule
        order = np.argsort(-rec.scores, kind="stable")
        rankings.append(order.tolist())
    return rankings
