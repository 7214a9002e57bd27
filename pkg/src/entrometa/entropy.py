"""Annotation-entropy budgets and their label-noise equivalents.

A labeling effort that spends H nats of entropy on m samples drawn from C
balanced classes leaves each label correct with probability exp(H/m)/C.
All logarithms here are natural (nats); H therefore lives in [0, m*ln C],
with H = m*ln C full supervision and H = 0 uniformly random labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EntropyBudget",
    "NoiseSpec",
    "expected_correct",
    "noise_probability",
    "entropy_for_noise",
    "corrupt_labels",
    "distinct_class_probability",
]


@dataclass(frozen=True)
class EntropyBudget:
    """Annotation regime: m samples, C classes, H nats spent labeling."""

    m: int
    C: int
    H: float

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"m must be positive, got {self.m}")
        if self.C < 2:
            raise ValueError(f"C must be >= 2, got {self.C}")
        hi = self.m * math.log(self.C)
        if not (0.0 <= self.H <= hi * (1 + 1e-12)):
            raise ValueError(f"H={self.H} outside [0, m*ln(C)] = [0, {hi}]")

    @property
    def p_correct(self) -> float:
        """Probability a single label is correct: exp(H/m)/C."""
        return min(1.0, math.exp(self.H / self.m) / self.C)


@dataclass(frozen=True)
class NoiseSpec:
    """Per-label correctness probability plus the seed that realizes it."""

    p_correct: float
    seed: int

    def __post_init__(self):
        if not (0.0 < self.p_correct <= 1.0):
            raise ValueError(f"p_correct must be in (0, 1], got {self.p_correct}")


def expected_correct(budget: EntropyBudget) -> float:
    """Expected number of correctly labeled samples, (m/C)*exp(H/m)."""
    return budget.m * budget.p_correct


def noise_probability(budget: EntropyBudget) -> float:
    """Fraction of labels expected wrong: 1 - exp(H/m)/C, in [0, (C-1)/C]."""
    return 1.0 - budget.p_correct


def entropy_for_noise(p_noise: float, m: int, C: int) -> float:
    """Entropy budget H (nats) whose expected noise fraction is ``p_noise``.

    Inverse of :func:`noise_probability`: H = m*ln(C*(1 - p_noise)).
    """
    if C < 2:
        raise ValueError(f"C must be >= 2, got {C}")
    if m < 1:
        raise ValueError(f"m must be positive, got {m}")
    hi = (C - 1) / C
    if not (0.0 <= p_noise <= hi):
        raise ValueError(f"p_noise={p_noise} outside [0, {hi}]")
    # roundoff at the p_noise = (C-1)/C edge can land at -1e-15
    return max(0.0, m * math.log(C * (1.0 - p_noise)))


def corrupt_labels(labels, budget: EntropyBudget, seed: int) -> np.ndarray:
    """Corrupt integer labels to match the budget's correctness probability.

    Each label is independently kept with probability exp(H/m)/C and
    otherwise replaced by a uniform draw over the other C-1 classes.
    Deterministic for a fixed seed.  The expected-correct-count claims
    assume balanced classes; the corruption itself works on any vector.
    """
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integers")
    if y.size and (y.min() < 0 or y.max() >= budget.C):
        raise ValueError(f"label out of range [0, {budget.C})")
    rng = np.random.default_rng(seed)
    keep = rng.random(y.size) < budget.p_correct
    # uniform over the C-1 wrong classes: draw in [0, C-1) and skip the truth
    wrong = rng.integers(0, budget.C - 1, size=y.size)
    wrong = np.where(wrong >= y, wrong + 1, wrong)
    return np.where(keep, y, wrong).astype(y.dtype)


def distinct_class_probability(C1: int, C2: int, k: int) -> float:
    """Probability that C2 samples drawn from a C1-class pool (k per class)
    all land in different classes.

    Evaluated in log-space via lgamma:
    P = C1! * k^C2 * (C1*k - C2)! / ((C1 - C2)! * (C1*k)!).
    """
    if C2 < 1 or k < 1:
        raise ValueError(f"C2 and k must be >= 1, got C2={C2}, k={k}")
    if C2 > C1:
        raise ValueError(f"C2={C2} exceeds C1={C1}")
    log_p = (
        math.lgamma(C1 + 1)
        + C2 * math.log(k)
        + math.lgamma(C1 * k - C2 + 1)
        - math.lgamma(C1 - C2 + 1)
        - math.lgamma(C1 * k + 1)
    )
    return min(1.0, math.exp(log_p))
