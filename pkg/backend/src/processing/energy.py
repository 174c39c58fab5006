"""
Energy scores and the threshold decision built on them.

All scores here follow the larger-is-more-in-distribution orientation, so the
multi-class free energy is returned negated.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import logsumexp

from backend.src.errors import CalibrationError, DimensionError

logger = logging.getLogger(__name__)

DEFAULT_TARGET_TPR = 0.95
MIN_CALIBRATION_SCORES = 20

# Gap below the minimum score used when every calibration score is tied
TIE_FALLBACK_GAP = 1.0


def _logits(logits):
    f = np.asarray(logits, dtype=np.float64)
    if f.ndim == 0 or f.shape[-1] == 0:
        raise DimensionError("logits must be non-empty")
    return f


def softplus(x):
    """ln(1 + e^x), overflow-safe."""
    return np.logaddexp(0.0, x)


def free_energy(logits):
    """-E(x) = log sum_i e^{f_i} over the last axis."""
    f = _logits(logits)
    result = logsumexp(f, axis=-1)
    return float(result) if np.ndim(result) == 0 else result


def label_energy(f_i):
    """E_{y_i}(x) = -ln(1 + e^{f_i}); always strictly negative."""
    result = -softplus(np.asarray(f_i, dtype=np.float64))
    return float(result) if np.ndim(result) == 0 else result


def joint_energy(logits):
    """E_joint(x) = sum_i -E_{y_i}(x) over the last axis; strictly positive."""
    f = _logits(logits)
    result = -np.sum(label_energy(f), axis=-1)
    return float(result) if np.ndim(result) == 0 else result


# === THRESHOLD ===
class Decision(str, Enum):
    IN = "in"
    OUT = "out"


@dataclass(frozen=True)
class Threshold:
    tau: float
    target_tpr: float = DEFAULT_TARGET_TPR
    calibration_size: int = 0


def _min_count(n, target_tpr):
    """Smallest m with m / n >= target_tpr."""
    m = min(n, max(0, math.ceil(target_tpr * n)))
    while m > 0 and (m - 1) / n >= target_tpr:
        m -= 1
    while m < n and m / n < target_tpr:
        m += 1
    return m


def calibrate_tau(id_scores, target_tpr=DEFAULT_TARGET_TPR):
    """
    Largest score value tau with at least `target_tpr` of the ID scores strictly above it.

    Candidates are the observed scores (no interpolation). When no observed
    score qualifies, e.g. all scores tied, tau = min(scores) - 1 so every ID
    sample is still classified "in".
    """
    scores = np.sort(np.asarray(id_scores, dtype=np.float64).ravel())
    if not (0 < target_tpr < 1):
        raise CalibrationError(f"target_tpr must lie in (0, 1), got {target_tpr!r}")
    if scores.size < MIN_CALIBRATION_SCORES:
        raise CalibrationError(
            f"need at least {MIN_CALIBRATION_SCORES} ID scores to calibrate, got {scores.size}"
        )
    if not np.all(np.isfinite(scores)):
        raise CalibrationError("calibration scores contain NaN or Inf")

    n = scores.size
    m = _min_count(n, target_tpr)
    # tau must stay strictly below the m-th largest score
    bound = scores[n - m]
    below = scores[scores < bound]
    if below.size:
        tau = float(below[-1])
    else:
        tau = float(scores[0] - TIE_FALLBACK_GAP)
        logger.warning("[WARNING] calibration scores give no threshold below %.6g; using tau=%.6g", bound, tau)
    return Threshold(tau=tau, target_tpr=float(target_tpr), calibration_size=n)


def detect(score, threshold):
    """Out if score <= tau, in if score > tau."""
    return Decision.IN if score > threshold.tau else Decision.OUT


class JointEnergyDetector:
    """
    Deployment wrapper: joint energy of a trained classifier plus a calibrated tau.
    """

    def __init__(self, model, threshold=None):
        self.model = model
        self.threshold = threshold

    def scores(self, features):
        return np.atleast_1d(joint_energy(self.model(features)))

    def calibrate(self, id_features, target_tpr=DEFAULT_TARGET_TPR):
        self.threshold = calibrate_tau(self.scores(id_features), target_tpr)
        logger.info(
            "Calibrated tau=%.6g on %d ID samples (target TPR %.2f)",
            self.threshold.tau, self.threshold.calibration_size, target_tpr,
        )
        return self.threshold

    def decide(self, features):
        if self.threshold is None:
            raise CalibrationError("detector has not been calibrated")
        scores = self.scores(features)
        return scores, [detect(s, self.threshold) for s in scores]
