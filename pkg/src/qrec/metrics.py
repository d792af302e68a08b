"""Evaluation metrics and structured run logging."""

import json
from dataclasses import dataclass, field

import numpy as np


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of correct thresholded predictions; ties (score == threshold)
    resolve as positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.size == 0:
        raise ValueError("scores and labels must be same-length and nonempty")
    predicted = scores >= threshold
    return float(np.mean(predicted == (labels > 0.5)))


def roc_auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative, ties 1/2.

    Rank-based: tied scores share their average rank.  Raises
    ValueError("undefined AUC") when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64) > 0.5
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("undefined AUC")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    is_group_start = np.r_[True, sorted_scores[1:] != sorted_scores[:-1]]
    group_id = np.cumsum(is_group_start) - 1
    starts = np.flatnonzero(is_group_start)
    counts = np.diff(np.r_[starts, scores.size])
    group_avg_rank = starts + (counts - 1) / 2.0 + 1.0  # average 1-based rank
    ranks = np.empty(scores.size, dtype=np.float64)
    ranks[order] = group_avg_rank[group_id]
    pos_rank_sum = float(ranks[labels].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class EvalAccumulator:
    """Mergeable score/label/loss shards; merge order never changes the
    final accuracy, AUC, or mean loss."""

    scores: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    loss_sum: float = 0.0
    loss_count: int = 0

    def add(self, scores, labels, loss_sum: float = 0.0, loss_count: int = 0):
        self.scores.append(np.asarray(scores, dtype=np.float64))
        self.labels.append(np.asarray(labels, dtype=np.float64))
        self.loss_sum += float(loss_sum)
        self.loss_count += int(loss_count)

    def merge(self, other: "EvalAccumulator") -> "EvalAccumulator":
        self.scores.extend(other.scores)
        self.labels.extend(other.labels)
        self.loss_sum += other.loss_sum
        self.loss_count += other.loss_count
        return self

    def _flat(self):
        return np.concatenate(self.scores), np.concatenate(self.labels)

    def accuracy(self) -> float:
        return accuracy(*self._flat())

    def roc_auc(self) -> float:
        return roc_auc(*self._flat())

    def mean_loss(self) -> float:
        return self.loss_sum / self.loss_count if self.loss_count else float("nan")


LOG_KINDS = ("header", "train", "eval", "scale_update", "export", "note")


def log_record(kind: str, fields: dict) -> str:
    """One JSON object per line; key order is fixed for byte-reproducibility."""
    if kind not in LOG_KINDS:
        raise ValueError(f"unknown log record kind: {kind}")
    record = {"kind": kind}
    record.update(fields)
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


class MetricsLogger:
    """Append-only JSONL run log (UTF-8, one object per line, no timestamps
    so identical runs produce identical bytes)."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8")

    def log(self, kind: str, **fields):
        self._fh.write(log_record(kind, fields) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def parse_log(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
