"""Distribution-free prediction intervals from calibration residuals.

Covers the exchangeable split construction, the weighted-quantile variant for
calibration/test shift together with its coverage-gap bound, and the naive
plug-in Gaussian interval kept as the baseline it is meant to outperform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


@dataclass
class ConformalCalibration:
    """Calibration scores with optional shift weights and a target level."""

    scores: np.ndarray
    alpha: float
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        if np.any(self.scores < 0):
            raise ValueError("scores must be non-negative")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must be in (0, 1)")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if self.weights.shape != self.scores.shape:
                raise ValueError("weights must align with scores")
            if np.any(self.weights <= 0):
                raise ValueError("weights must be positive")

    def quantile(self) -> float:
        if self.weights is None:
            return split_quantile(self.scores, self.alpha)
        return weighted_quantile(self.scores, self.weights, self.alpha)


@dataclass(frozen=True)
class Interval:
    lower: float
    upper: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError("interval lower bound exceeds upper bound")

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def residual_scores(preds, actuals) -> np.ndarray:
    preds = np.asarray(preds, dtype=float)
    actuals = np.asarray(actuals, dtype=float)
    if preds.shape != actuals.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {actuals.shape}")
    return np.abs(actuals - preds)


def split_quantile(scores, alpha: float) -> float:
    """Finite-sample calibration quantile: the ceil((1+N)(1-alpha))-th
    smallest score, or +inf when that index exceeds N.

    The rank is computed in exact rational arithmetic so that e.g.
    alpha=0.05, N=19 yields rank 19 rather than tripping over the binary
    representation of 0.95.
    """
    scores = np.sort(np.asarray(scores, dtype=float))
    n = len(scores)
    if n < 1:
        raise ValueError("need at least one calibration score")
    n_alpha = math.ceil((1 + n) * (1 - Fraction(alpha)))
    if n_alpha > n:
        return math.inf
    return float(scores[n_alpha - 1])


def weighted_quantile(scores, weights, alpha: float) -> float:
    """Smallest score q with normalized weighted mass of {S <= q} >= 1-alpha."""
    scores = np.asarray(scores, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if scores.shape != weights.shape or scores.ndim != 1:
        raise ValueError("scores and weights must be aligned 1-d arrays")
    if np.any(weights <= 0):
        raise ValueError("weights must be positive")
    order = np.argsort(scores, kind="stable")
    cum = np.cumsum(weights[order])
    target = (1.0 - alpha) * cum[-1]
    idx = min(int(np.searchsorted(cum, target, side="left")), len(scores) - 1)
    return float(scores[order][idx])


def gap_bound(epsilon: float, p_min: float) -> float:
    """Worst-case coverage shortfall under an epsilon-mixture shift."""
    if not (0.0 <= epsilon < 1.0):
        raise ValueError("epsilon must be in [0, 1)")
    if p_min <= 0:
        raise ValueError("p_min must be positive")
    return epsilon / ((1.0 - epsilon) * p_min)


def conformal_interval(pred: float, q: float) -> Interval:
    if q < 0:
        raise ValueError("radius must be non-negative")
    return Interval(pred - q, pred + q)


def coverage_eval(intervals, actuals) -> float:
    actuals = np.asarray(actuals, dtype=float)
    if len(intervals) != len(actuals):
        raise ValueError("intervals and actuals must align")
    hits = sum(iv.contains(a) for iv, a in zip(intervals, actuals))
    return hits / len(actuals)


# Rational approximation coefficients for the standard normal quantile
# (Acklam's algorithm, |relative error| < 1.15e-9 on (0, 1)).
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)


def normal_quantile(p: float) -> float:
    """Inverse standard-normal CDF via a rational approximation."""
    if not (0.0 < p < 1.0):
        raise ValueError("p must be in (0, 1)")
    p_low, p_high = 0.02425, 1 - 0.02425
    if p < p_low:
        q = math.sqrt(-2 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
               ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    if p > p_high:
        q = math.sqrt(-2 * math.log(1 - p))
        return -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
               ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    q = p - 0.5
    s = q * q
    return (((((_A[0] * s + _A[1]) * s + _A[2]) * s + _A[3]) * s + _A[4]) * s + _A[5]) * q / \
           (((((_B[0] * s + _B[1]) * s + _B[2]) * s + _B[3]) * s + _B[4]) * s + 1)


def plugin_interval(pred: float, sigma: float, alpha: float = 0.05) -> Interval:
    """Gaussian interval pred +/- z_{1-alpha/2} * sigma (z = 1.959964 at 5%)."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    z = 1.959964 if alpha == 0.05 else normal_quantile(1.0 - alpha / 2.0)
    return Interval(pred - z * sigma, pred + z * sigma)
