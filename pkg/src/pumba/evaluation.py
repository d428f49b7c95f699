"""Docking evaluation: classification metrics, top-k success rates, CAPRI tallies."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

CATEGORY_ORDER = ("incorrect", "acceptable", "medium", "high")
QUALITY_CATEGORIES = CATEGORY_ORDER[1:]
SUCCESS_KS = (1, 10, 25, 100, 200)
CAPRI_KS = (1, 10, 100)


class UndefinedMetricError(ValueError):
    """The metric has no value for this input (e.g. a single class)."""


def _rank_of(category: str) -> int:
    try:
        return CATEGORY_ORDER.index(category)
    except ValueError:
        raise ValueError(f"unknown CAPRI category {category!r}; expected one of {CATEGORY_ORDER}") from None


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return s, (y == 1)


def auc_roc(scores, labels) -> float:
    """Mann-Whitney estimate of P(pos > neg) + P(tie)/2, as a percentage."""
    s, pos = _check(scores, labels)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC ROC needs both classes")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return 100.0 * u / (n_pos * n_neg)


def average_precision(scores, labels) -> float:
    """Step-wise AP: sum over distinct thresholds of (R_k - R_{k-1}) P_k, as a percentage.

    Tied scores form a single threshold, so the value does not depend on the
    input order.
    """
    s, pos = _check(scores, labels)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s_sorted, p_sorted = s[order], pos[order]
    tp = np.cumsum(p_sorted)
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), len(s) - 1]
    tp_at, n_at = tp[last], last + 1
    recall = tp_at / n_pos
    precision = tp_at / n_at
    gain = np.diff(np.r_[0.0, recall])
    return 100.0 * float(np.sum(gain * precision))


@dataclass
class ThresholdMetrics:
    balanced_accuracy: float
    f1: float
    precision: float
    recall: float
    undefined: tuple[str, ...] = ()


def thresholded_metrics(scores, labels, threshold: float = 0.5) -> ThresholdMetrics:
    """BA, F1, precision and recall (percent) for predictions score >= threshold.

    A metric whose denominator is zero is reported as 0 and named in ``undefined``.
    """
    s, pos = _check(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    tn = int(np.sum(~pred & ~pos))
    flags = []

    def ratio(num, den, name):
        if den == 0:
            flags.append(name)
            return 0.0
        return num / den

    precision = ratio(tp, tp + fp, "precision")
    recall = ratio(tp, tp + fn, "recall")
    tnr = ratio(tn, tn + fp, "specificity")
    if precision + recall == 0:
        flags.append("f1")
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    if "recall" in flags or "specificity" in flags:
        flags.append("balanced_accuracy")
    ba = (recall + tnr) / 2
    return ThresholdMetrics(100 * ba, 100 * f1, 100 * precision, 100 * recall, tuple(flags))


# ---------------------------------------------------------------- per-complex ranking

@dataclass
class RankedModelSet:
    complex_id: str
    model_ids: list[str]
    scores: np.ndarray
    labels: np.ndarray
    categories: list[str]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        n = len(self.model_ids)
        if not (len(self.scores) == len(self.labels) == len(self.categories) == n):
            raise ValueError(f"complex {self.complex_id}: ragged model set")
        if n == 0:
            raise ValueError(f"complex {self.complex_id} has no models")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError(f"complex {self.complex_id}: non-finite scores")
        for c in self.categories:
            _rank_of(c)

    def ranking(self) -> np.ndarray:
        """Indices by descending score, ties broken by ascending model_id."""
        return np.array(sorted(range(len(self.model_ids)),
                               key=lambda i: (-self.scores[i], self.model_ids[i])), dtype=int)

    def best_quality_in_top(self, k: int) -> int:
        top = self.ranking()[:k]
        return max(_rank_of(self.categories[i]) for i in top)


def group_by_complex(complex_ids, model_ids, scores, labels, categories) -> list[RankedModelSet]:
    """Split flat per-model arrays into one RankedModelSet per complex, in first-seen order."""
    buckets: dict[str, list[int]] = {}
    for i, c in enumerate(complex_ids):
        buckets.setdefault(c, []).append(i)
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    return [RankedModelSet(c, [model_ids[i] for i in idx], scores[idx], labels[idx],
                           [categories[i] for i in idx]) for c, idx in buckets.items()]


def success_rate(sets: list[RankedModelSet], ks=SUCCESS_KS) -> dict[int, float]:
    """Percent of complexes with an acceptable-or-better model in the top k."""
    if not sets:
        raise UndefinedMetricError("success rate needs at least one complex")
    ok = _rank_of("acceptable")
    return {k: 100.0 * sum(s.best_quality_in_top(k) >= ok for s in sets) / len(sets) for k in ks}


def capri_quality_counts(sets: list[RankedModelSet], ks=CAPRI_KS) -> dict[int, dict[str, int]]:
    """Complexes whose top k holds a model of at least each category (cumulative)."""
    out = {}
    for k in ks:
        best = [s.best_quality_in_top(k) for s in sets]
        out[k] = {c: sum(b >= _rank_of(c) for b in best) for c in QUALITY_CATEGORIES}
    return out


# ---------------------------------------------------------------- report

@dataclass
class MetricsReport:
    auc_roc: float
    ap: float
    balanced_accuracy: float
    f1: float
    precision: float
    recall: float
    success: dict[int, float] = field(default_factory=dict)
    capri: dict[int, dict[str, int]] = field(default_factory=dict)
    undefined: tuple[str, ...] = ()
    n_complexes: int = 0

    def classification_rows(self) -> list[tuple[str, float]]:
        return [("AUC ROC", self.auc_roc), ("AP", self.ap), ("BA", self.balanced_accuracy),
                ("F1", self.f1), ("Precision", self.precision), ("Recall", self.recall)]

    def to_text(self) -> str:
        lines = ["Classification (%)"]
        lines += [f"  {name:<10}{value:>8.2f}" for name, value in self.classification_rows()]
        lines.append("")
        lines.append("Success rate (%)")
        lines.append("  " + "".join(f"{'Top' + str(k):>8}" for k in self.success))
        lines.append("  " + "".join(f"{round(v):>8d}" for v in self.success.values()))
        lines.append("")
        lines.append(f"CAPRI quality counts ({self.n_complexes} complexes)")
        lines.append(f"  {'':<8}" + "".join(f"{c:>12}" for c in QUALITY_CATEGORIES))
        for k, row in self.capri.items():
            lines.append(f"  {'Top' + str(k):<8}" + "".join(f"{row[c]:>12d}" for c in QUALITY_CATEGORIES))
        if self.undefined:
            lines.append("")
            lines.append("undefined (reported as 0): " + ", ".join(self.undefined))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        """Long-format CSV: table, row, column, value."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["table", "row", "column", "value"])
        for name, value in self.classification_rows():
            w.writerow(["classification", "model", name, f"{value:.6f}"])
        for k, v in self.success.items():
            w.writerow(["success_rate", "model", f"Top{k}", f"{v:.6f}"])
        for k, row in self.capri.items():
            for c in QUALITY_CATEGORIES:
                w.writerow(["capri", f"Top{k}", c, row[c]])
        return buf.getvalue()


def evaluate(complex_ids, model_ids, scores, labels, categories, threshold: float = 0.5,
             success_ks=SUCCESS_KS, capri_ks=CAPRI_KS) -> MetricsReport:
    sets = group_by_complex(complex_ids, model_ids, scores, labels, categories)
    th = thresholded_metrics(scores, labels, threshold)
    return MetricsReport(auc_roc(scores, labels), average_precision(scores, labels),
                         th.balanced_accuracy, th.f1, th.precision, th.recall,
                         success_rate(sets, success_ks), capri_quality_counts(sets, capri_ks),
                         th.undefined, len(sets))
