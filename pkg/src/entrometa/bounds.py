"""Generalization-error upper bounds under an annotation-entropy budget.

Whole-class training over C1 classes and episodic bi-level training over
n tasks (C2 classes, k samples per class each) admit uniform-stability
bounds whose dominant terms differ only in a sqrt(C1) vs sqrt(k*C2^2)
factor once both are charged the same entropy budget H.  The regime test
``corollary_check`` (k*C2^2 < C1) says when the episodic bound is tighter.

Stability constants default to beta = c/sqrt(m) and beta_tilde =
c/sqrt(n) with c = 0.1 (a vanishing-stability parametrization); the
regime comparison itself is constant-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

__all__ = [
    "BoundInputs",
    "CorollaryResult",
    "wct_bound",
    "meta_bound",
    "wct_bound_conventional",
    "meta_bound_conventional",
    "corollary_check",
    "dominant_term_ratio",
]

DEFAULT_STABILITY_SCALE = 0.1


@dataclass(frozen=True)
class BoundInputs:
    """Shared inputs of the two bounds.

    ``n`` defaults to the worst case m/(k*C2), where no sample is shared
    between tasks; ``beta``/``beta_tilde`` default to 0.1/sqrt(m) and
    0.1/sqrt(n).  ``H`` is measured in nats.
    """

    m: int
    C1: int
    C2: int
    k: int
    H: float
    n: float | None = None
    beta: float | None = None
    beta_tilde: float | None = None
    M: float = 1.0
    delta: float = 0.01
    stability_scale: float = DEFAULT_STABILITY_SCALE
    n_eff: float = field(init=False)
    beta_eff: float = field(init=False)
    beta_tilde_eff: float = field(init=False)

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"m must be positive, got {self.m}")
        if self.C1 < 2 or self.C2 < 1 or self.k < 1:
            raise ValueError(f"need C1 >= 2, C2 >= 1, k >= 1; got {self.C1}, {self.C2}, {self.k}")
        if self.C2 > self.C1:
            raise ValueError(f"C2={self.C2} exceeds C1={self.C1}")
        if self.H < 0:
            raise ValueError(f"H must be non-negative, got {self.H}")
        if self.M <= 0:
            raise ValueError(f"M must be positive, got {self.M}")
        if not (0.0 < self.delta < 1.0):
            raise ValueError(f"delta must be in (0,1), got {self.delta}")
        n = self.m / (self.k * self.C2) if self.n is None else float(self.n)
        if n <= 0:
            raise ValueError(f"n must be positive, got {n}")
        beta = self.stability_scale / math.sqrt(self.m) if self.beta is None else self.beta
        beta_t = self.stability_scale / math.sqrt(n) if self.beta_tilde is None else self.beta_tilde
        if beta < 0 or beta_t < 0:
            raise ValueError("stability constants must be non-negative")
        object.__setattr__(self, "n_eff", n)
        object.__setattr__(self, "beta_eff", float(beta))
        object.__setattr__(self, "beta_tilde_eff", float(beta_t))


def _check_entropy_domain(H: float, m: int, C: int):
    hi = m * math.log(C)
    if not (0.0 <= H <= hi * (1 + 1e-12)):
        raise ValueError(f"H={H} outside [0, m*ln(C)] = [0, {hi}] for C={C}")


def wct_bound(inp: BoundInputs) -> float:
    """Whole-class-training bound: 2b + (4mb + M)*sqrt(C1*ln(1/d) / (2m*e^{H/m})).

    Non-increasing in H (valid for H in [0, m*ln C1]), non-decreasing in C1.
    """
    _check_entropy_domain(inp.H, inp.m, inp.C1)
    b = inp.beta_eff
    root = math.sqrt(
        inp.C1 * math.log(1.0 / inp.delta) / (2.0 * inp.m * math.exp(inp.H / inp.m))
    )
    return 2.0 * b + (4.0 * inp.m * b + inp.M) * root


def meta_bound(inp: BoundInputs) -> float:
    """Episodic bound: 2b + 2bt + (4n*bt + M)*sqrt(k*C2^2*ln(1/d) / (2m*e^{H/m})).

    The entropy domain is [0, m*ln C2]: within a task, labels carry at
    most ln C2 nats each.  The 4n*bt factor keeps the raw task count n.
    """
    if inp.C2 < 2:
        raise ValueError(f"meta bound needs C2 >= 2, got {inp.C2}")
    _check_entropy_domain(inp.H, inp.m, inp.C2)
    b, bt = inp.beta_eff, inp.beta_tilde_eff
    root = math.sqrt(
        inp.k * inp.C2**2 * math.log(1.0 / inp.delta)
        / (2.0 * inp.m * math.exp(inp.H / inp.m))
    )
    return 2.0 * b + 2.0 * bt + (4.0 * inp.n_eff * bt + inp.M) * root


def wct_bound_conventional(m: int, beta: float, M: float = 1.0, delta: float = 0.01) -> float:
    """Full-supervision form: 2b + (4mb + M)*sqrt(ln(1/d)/(2m))."""
    return 2.0 * beta + (4.0 * m * beta + M) * math.sqrt(math.log(1.0 / delta) / (2.0 * m))


def meta_bound_conventional(
    n: float, beta: float, beta_tilde: float, M: float = 1.0, delta: float = 0.01
) -> float:
    """Full-supervision episodic form: 2b + 2bt + (4n*bt + M)*sqrt(ln(1/d)/(2n))."""
    return (
        2.0 * beta
        + 2.0 * beta_tilde
        + (4.0 * n * beta_tilde + M) * math.sqrt(math.log(1.0 / delta) / (2.0 * n))
    )


@dataclass(frozen=True)
class CorollaryResult:
    holds: bool
    lhs: int
    rhs: int


def corollary_check(C1: int, C2: int, k: int) -> CorollaryResult:
    """Regime test: the episodic bound is tighter iff C2^2 * k < C1 (strict)."""
    if C1 < 1 or C2 < 1 or k < 1:
        raise ValueError(f"need positive integers, got C1={C1}, C2={C2}, k={k}")
    lhs = C2 * C2 * k
    return CorollaryResult(holds=lhs < C1, lhs=lhs, rhs=C1)


def dominant_term_ratio(inp: BoundInputs) -> float:
    """Ratio of the episodic to whole-class dominant terms: sqrt(k*C2^2/C1).

    Entropy and confidence factors cancel, so the ratio is < 1 exactly
    when :func:`corollary_check` holds.
    """
    return math.sqrt(inp.k * inp.C2**2 / inp.C1)
