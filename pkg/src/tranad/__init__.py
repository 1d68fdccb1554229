"""Transformer-based multivariate time-series anomaly detection and diagnosis.

Pipeline: normalize and window a series (`dataset`), train the two-phase
self-conditioned reconstruction network (`model`, `training`), pick
per-dimension thresholds by peaks-over-threshold extreme value fitting
(`pot`), score and label a test stream (`detection`), and evaluate
(`metrics`).  The `cli` module ties it together.
"""

__version__ = "0.1.0"
