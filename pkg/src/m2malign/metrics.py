"""Binary classification metrics and the cross-validation report.

ROC-AUC is computed in its rank (Mann-Whitney) form: the probability that
a randomly chosen positive outscores a randomly chosen negative, with ties
counting half.  PR-AUC is average precision: the mean, over positives in
descending-score order, of the precision at each positive's rank.  Both
are exact; no curve is traced and nothing is interpolated.

Tie rules are pinned down because they change results at small n: equal
scores contribute 0.5 per pair to ROC-AUC, the average-precision ranking
breaks score ties by original sample order (stable sort), and equal logits
count as a class-0 prediction.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError, UndefinedMetricError

METRIC_KEYS = ("pr_auc", "roc_auc", "accuracy")


def _scores_and_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or y.ndim != 1:
        raise ShapeError("scores and labels must be one-dimensional")
    if s.shape[0] != y.shape[0]:
        raise ShapeError(f"{s.shape[0]} scores vs {y.shape[0]} labels")
    if s.shape[0] == 0:
        raise ContractError("no samples")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def _midranks(values):
    """Ranks 1..n with tied values sharing the mean of their positions."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels):
    """P(score of a positive > score of a negative), ties worth half.

    Equivalent to the area under the ROC curve but computed exactly from
    the rank sum of the positives, so no threshold sweep is involved.
    """
    s, y = _scores_and_labels(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc needs both classes present")
    ranks = _midranks(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(scores, labels):
    """Average precision: mean precision at each positive's rank.

    Samples are ranked by descending score; ties keep their original
    order, so callers get the same number for the same inputs on every
    platform.
    """
    s, y = _scores_and_labels(scores, labels)
    if y.sum() == 0:
        raise UndefinedMetricError("pr_auc needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    cum_pos = np.cumsum(hits)
    ranks = np.arange(1, len(y) + 1)
    at_pos = hits == 1
    return float(np.mean(cum_pos[at_pos] / ranks[at_pos]))


def accuracy(logits, labels):
    """Fraction of samples whose argmax logit matches the label.

    Tied logits resolve to the lowest class index (class 0), the numpy
    argmax convention; with two classes that means a perfectly undecided
    model predicts 0.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.ndim != 2:
        raise ShapeError(f"logits must be (n, classes), got rank {z.ndim}")
    if y.ndim != 1 or y.shape[0] != z.shape[0]:
        raise ShapeError(f"{z.shape[0]} logit rows vs {y.shape} labels")
    if z.shape[0] == 0:
        raise ContractError("no samples")
    return float(np.mean(np.argmax(z, axis=1) == y))


@dataclass
class MetricsReport:
    """Per-fold metric dicts plus their mean and population spread.

    `folds` holds one ``{pr_auc, roc_auc, accuracy}`` dict per fold.  The
    aggregate uses the population standard deviation (the folds are the
    whole population of interest, not a sample from one).
    """

    folds: list = field(default_factory=list)

    def add_fold(self, **values):
        missing = [k for k in METRIC_KEYS if k not in values]
        if missing or set(values) != set(METRIC_KEYS):
            raise ContractError(f"fold needs exactly {METRIC_KEYS}, got {sorted(values)}")
        self.folds.append({k: float(values[k]) for k in METRIC_KEYS})

    def _column(self, key):
        if not self.folds:
            raise ContractError("report has no folds")
        return np.array([f[key] for f in self.folds])

    def mean(self):
        return {k: float(self._column(k).mean()) for k in METRIC_KEYS}

    def std(self):
        return {k: float(self._column(k).std()) for k in METRIC_KEYS}

    def as_dict(self):
        return {"folds": [dict(f) for f in self.folds], "mean": self.mean(), "std": self.std()}

    def to_json(self):
        """Stable serialization: sorted keys, two-space indent, newline."""
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    def summary_lines(self):
        m, s = self.mean(), self.std()
        return [f"{k}: {m[k]:.4f} +/- {s[k]:.4f}" for k in METRIC_KEYS]

    @staticmethod
    def from_json(text):
        payload = json.loads(text)
        report = MetricsReport()
        for fold in payload.get("folds", []):
            report.add_fold(**fold)
        return report
