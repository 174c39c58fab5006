"""
Detection metrics: FPR at a fixed ID TPR, AUROC and AUPR.

In-distribution is the positive class and a sample counts as predicted ID
when its score is >= tau. The `oracle_*` functions recompute every metric by
exhaustive enumeration and are kept free of any code shared with the fast
paths; tests compare the two.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from sklearn.metrics import average_precision_score, roc_auc_score

from backend.src.errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_TPR = 0.95


@dataclass(frozen=True, eq=False)
class ScoreSet:
    id_scores: np.ndarray
    ood_scores: np.ndarray
    method_name: str = "unnamed"
    orientation: str = field(default="larger_is_id", init=False)

    def __post_init__(self):
        for name in ("id_scores", "ood_scores"):
            values = np.asarray(getattr(self, name), dtype=np.float64).ravel()
            if values.size == 0:
                raise ConfigError(f"{name} must be non-empty")
            if not np.all(np.isfinite(values)):
                raise ConfigError(f"{name} contains NaN or Inf")
            object.__setattr__(self, name, values)

    def swapped(self):
        """OOD as the positive class, orientation kept by negating scores."""
        return ScoreSet(-self.ood_scores, -self.id_scores, self.method_name)


@dataclass(frozen=True)
class DetectionReport:
    method_name: str
    fpr95: float
    auroc: float
    aupr: float
    tau: float
    num_id: int
    num_ood: int
    seed: Optional[int] = None
    aupr_positive: str = "id"

    def to_dict(self):
        return asdict(self)


def _min_positive_count(n, tpr):
    m = min(n, max(1, math.ceil(tpr * n)))
    while m > 1 and (m - 1) / n >= tpr:
        m -= 1
    while m < n and m / n < tpr:
        m += 1
    return m


# === FAST PATHS ===
def fpr_at_tpr(scores, tpr=DEFAULT_TPR):
    """
    tau = largest threshold with at least `tpr` of ID scores >= tau;
    fpr = fraction of OOD scores >= tau.
    """
    if not (0 < tpr < 1):
        raise ConfigError(f"tpr must lie in (0, 1), got {tpr!r}")
    ranked = np.sort(scores.id_scores)[::-1]
    m = _min_positive_count(ranked.size, tpr)
    tau = float(ranked[m - 1])
    fpr = float(np.count_nonzero(scores.ood_scores >= tau)) / scores.ood_scores.size
    return fpr, tau


def _labelled(scores):
    y_score = np.concatenate([scores.id_scores, scores.ood_scores])
    y_true = np.concatenate([np.ones(scores.id_scores.size, dtype=np.int8), np.zeros(scores.ood_scores.size, dtype=np.int8)])
    return y_true, y_score


def auroc(scores):
    """Area under the ROC curve with ID positive; ties get half credit."""
    return float(roc_auc_score(*_labelled(scores)))


def aupr(scores):
    """Average precision with ID positive; tied scores enter as one block."""
    return float(average_precision_score(*_labelled(scores)))


def evaluate(scores, tpr=DEFAULT_TPR, seed=None, flip_aupr=False):
    fpr, tau = fpr_at_tpr(scores, tpr)
    if flip_aupr:
        pr, positive = aupr(scores.swapped()), "ood"
    else:
        pr, positive = aupr(scores), "id"
    report = DetectionReport(
        method_name=scores.method_name,
        fpr95=fpr,
        auroc=auroc(scores),
        aupr=pr,
        tau=tau,
        num_id=int(scores.id_scores.size),
        num_ood=int(scores.ood_scores.size),
        seed=seed,
        aupr_positive=positive,
    )
    logger.info(
        "%s: FPR@%.0f%%TPR=%.4f AUROC=%.4f AUPR-%s=%.4f",
        scores.method_name, tpr * 100, report.fpr95, report.auroc, positive, report.aupr,
    )
    return report


# === ORACLE (tests only) ===
def oracle_fpr_at_tpr(scores, tpr=DEFAULT_TPR):
    candidates = sorted(set(scores.id_scores.tolist()) | set(scores.ood_scores.tolist()), reverse=True)
    n_id, n_ood = scores.id_scores.size, scores.ood_scores.size
    for t in candidates:
        hits = sum(1 for s in scores.id_scores if s >= t)
        if hits / n_id >= tpr:
            false_hits = sum(1 for s in scores.ood_scores if s >= t)
            return false_hits / n_ood, t
    raise AssertionError("no threshold reaches the requested TPR")


def oracle_auroc(scores):
    diff = scores.id_scores[:, None] - scores.ood_scores[None, :]
    credit = np.where(diff > 0, 1.0, np.where(diff == 0, 0.5, 0.0))
    return float(credit.sum() / credit.size)


def oracle_aupr(scores):
    n_id = scores.id_scores.size
    total, prev_recall = 0.0, 0.0
    for t in sorted(set(scores.id_scores.tolist()) | set(scores.ood_scores.tolist()), reverse=True):
        tp = int(np.count_nonzero(scores.id_scores >= t))
        fp = int(np.count_nonzero(scores.ood_scores >= t))
        recall = tp / n_id
        total += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return total


def oracle_metrics(scores, tpr=DEFAULT_TPR, seed=None):
    fpr, tau = oracle_fpr_at_tpr(scores, tpr)
    return DetectionReport(
        method_name=scores.method_name,
        fpr95=fpr,
        auroc=oracle_auroc(scores),
        aupr=oracle_aupr(scores),
        tau=tau,
        num_id=int(scores.id_scores.size),
        num_ood=int(scores.ood_scores.size),
        seed=seed,
    )
