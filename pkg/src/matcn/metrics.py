"""Pair-verification metrics with different-driver pairs as the positive class."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

METRICS_SCHEMA_VERSION = 1


@dataclass
class MetricsReport:
    accuracy: float
    recall: float
    precision: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    n_pairs: int
    threshold: float = 0.5
    config_digest: str = ""
    schema_version: int = METRICS_SCHEMA_VERSION

    @classmethod
    def from_confusion(cls, tp: int, fp: int, tn: int, fn: int, threshold: float = 0.5,
                       config_digest: str = "") -> "MetricsReport":
        n = tp + fp + tn + fn
        if n == 0:
            raise ValueError("no pairs to score")
        recall = tp / (tp + fn) if tp + fn else 0.0
        precision = tp / (tp + fp) if tp + fp else 0.0
        # F1 is 0 when precision and recall are both 0 (or undefined).
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return cls((tp + tn) / n, recall, precision, f1, tp, fp, tn, fn, n, threshold, config_digest)

    def as_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        return (f"accuracy={self.accuracy:.4f} recall={self.recall:.4f} f1={self.f1:.4f} "
                f"(tp={self.tp} fp={self.fp} tn={self.tn} fn={self.fn}, n={self.n_pairs})")


def compute_metrics(labels, scores, threshold: float = 0.5, config_digest: str = "") -> MetricsReport:
    """Label 1 means different drivers; a score >= threshold predicts 1."""
    labels = np.asarray(labels).astype(int)
    pred = (np.asarray(scores, dtype=np.float64) >= threshold).astype(int)
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    return MetricsReport.from_confusion(tp, fp, tn, fn, threshold, config_digest)
