"""Classification metrics: confusion rates, exact pair-count AUC, Youden threshold, run aggregation."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

METRIC_NAMES = ("acc", "sen", "spe", "auc")


@dataclass(frozen=True, eq=False)
class ScoredLabels:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=bool)
        if scores.ndim != 1 or scores.shape != labels.shape or scores.size < 1:
            raise ValueError("scores and labels must be equal-length 1-D with >= 1 entries")
        if not np.isfinite(scores).all() or scores.min() < 0.0 or scores.max() > 1.0:
            raise ValueError("scores must be finite probabilities in [0, 1]")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)

    def both_classes(self) -> bool:
        return bool(self.labels.any() and (~self.labels).any())


def confusion_at(sl: ScoredLabels, t: float) -> tuple[float, float, float]:
    """(Acc, Sen, Spe) predicting positive iff score >= t.

    An absent class makes its rate vacuous: it is reported as 1.0 and a
    warning is emitted.
    """
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"threshold must lie in [0, 1], got {t}")
    pred = sl.scores >= t
    pos = sl.labels
    tp = int(np.sum(pred & pos))
    tn = int(np.sum(~pred & ~pos))
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    acc = (tp + tn) / pos.size
    if n_pos == 0:
        warnings.warn("no positive labels: sensitivity is vacuous (1.0)", stacklevel=2)
        sen = 1.0
    else:
        sen = tp / n_pos
    if n_neg == 0:
        warnings.warn("no negative labels: specificity is vacuous (1.0)", stacklevel=2)
        spe = 1.0
    else:
        spe = tn / n_neg
    return acc, sen, spe


def roc_auc(sl: ScoredLabels) -> float:
    """Mann-Whitney AUC by exact pair counting: P(s_pos > s_neg) + 0.5 P(tie)."""
    if not sl.both_classes():
        raise ValueError("AUC needs both classes present")
    pos = sl.scores[sl.labels]
    neg = sl.scores[~sl.labels]
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (pos.size * neg.size))


def _youden_candidates(scores: np.ndarray) -> np.ndarray:
    distinct = np.unique(scores)
    mids = 0.5 * (distinct[:-1] + distinct[1:])
    return np.concatenate([[0.0], mids, [1.0]])


def youden_threshold(sl: ScoredLabels) -> float:
    """Smallest threshold maximizing J = Sen + Spe - 1 over midpoint candidates plus {0, 1}."""
    if not sl.both_classes():
        raise ValueError("Youden threshold needs both classes present")
    best_t = 0.0
    best_j = -np.inf
    pos = sl.labels
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    for t in _youden_candidates(sl.scores):
        pred = sl.scores >= t
        sen = np.sum(pred & pos) / n_pos
        spe = np.sum(~pred & ~pos) / n_neg
        j = sen + spe - 1.0
        if j > best_j + 1e-15:
            best_j = j
            best_t = float(t)
    return best_t


@dataclass(eq=False)
class EvalReport:
    """Per-task mean and population std of each metric over repeated runs."""

    means: dict
    stds: dict
    runs: int
    config: dict | None = None

    def to_jsonable(self) -> dict:
        return {"means": self.means, "stds": self.stds, "runs": self.runs,
                "config": self.config}


def aggregate_runs(reports: list[dict], config: dict | None = None) -> EvalReport:
    """Aggregate per-run {task: {metric: value}} dicts into mean +/- population std."""
    if not reports:
        raise ValueError("need at least one run")
    tasks = list(reports[0].keys())
    means: dict = {}
    stds: dict = {}
    for task in tasks:
        means[task] = {}
        stds[task] = {}
        for metric in METRIC_NAMES:
            values = np.array([r[task][metric] for r in reports], dtype=np.float64)
            means[task][metric] = float(values.mean())
            stds[task][metric] = float(values.std())
    return EvalReport(means, stds, len(reports), config)


def save_eval_report(report: EvalReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_jsonable(), sort_keys=True, indent=1) + "\n")


def load_eval_report(path) -> EvalReport:
    blob = json.loads(Path(path).read_text())
    return EvalReport(blob["means"], blob["stds"], blob["runs"], blob.get("config"))
