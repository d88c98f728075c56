"""Accuracy tables and novelty ROC curves."""

from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import roc_auc_score, roc_curve

from toponets.errors import ExperimentError


def accuracy(predictions: Mapping[int, int], labels: Mapping[int, Optional[int]]) -> float:
    """Share of predicted nodes whose class matches the ground truth."""
    scored = [n for n in predictions if labels.get(n) is not None]
    if not scored:
        return float("nan")
    return sum(predictions[n] == labels[n] for n in scored) / len(scored)


def majority_class(labels: Iterable[Optional[int]]) -> int:
    counts = Counter(label for label in labels if label is not None)
    if not counts:
        raise ExperimentError("no labels to take a majority from")
    # lowest index wins ties
    return min(counts, key=lambda c: (-counts[c], c))


def summarize(records: pd.DataFrame, value: str = "accuracy") -> pd.DataFrame:
    """Mean and population std per engine and task, like an avg./std. table."""
    if records.empty:
        return pd.DataFrame(columns=["engine", "task", "mean", "std", "maps"])
    grouped = records.groupby(["engine", "task"], sort=True)[value]
    table = grouped.agg(mean="mean", std=lambda s: float(np.std(s, ddof=0)), maps="count").reset_index()
    return table


@dataclass(frozen=True, eq=False)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def points(self) -> List[Dict[str, float]]:
        # thresholds are on the per-place log-likelihood scale
        return [{"fpr": float(f), "tpr": float(t), "threshold": float(-h) if np.isfinite(h) else None}
                for f, t, h in zip(self.fpr, self.tpr, self.thresholds)]


def roc_sweep(known_scores: Sequence[float], novel_scores: Sequence[float]) -> RocCurve:
    """ROC of "novel" against "known" when lower per-place log-likelihood means novel."""
    if not len(known_scores) or not len(novel_scores):
        raise ExperimentError("a ROC sweep needs both known and novel scores")
    y_true = np.concatenate([np.zeros(len(known_scores)), np.ones(len(novel_scores))])
    score = -np.concatenate([np.asarray(known_scores, float), np.asarray(novel_scores, float)])
    fpr, tpr, thresholds = roc_curve(y_true, score)
    return RocCurve(fpr, tpr, thresholds, float(roc_auc_score(y_true, score)))


def detection_rate(novel_scores: Sequence[float], threshold: float) -> float:
    """Share of novel maps flagged at ``threshold``."""
    scores = np.asarray(novel_scores, dtype=np.float64)
    return float(np.mean(scores < threshold)) if len(scores) else float("nan")
