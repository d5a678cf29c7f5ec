"""Statistical primitives for provenance testing.

One-sided two-proportion z-test, the Holm-Bonferroni step-down procedure and
the confidence radius used by successive elimination.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

from .errors import ConfigurationError

_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class ProportionPair:
    """Two agreement ratios measured on the same ``n`` prompts."""

    mu_a: float
    mu_b: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError(f"n must be >= 1, got {self.n}")
        for name in ("mu_a", "mu_b"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0 or math.isnan(v):
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class PValueRecord:
    model_id: str
    p: float
    threshold: float | None = None

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "p": self.p, "threshold": self.threshold}


def normal_sf(z: float) -> float:
    """Upper tail 1 - Phi(z), computed through erfc to avoid cancellation."""
    return 0.5 * math.erfc(z / _SQRT2)


def z_test_one_sided(pair: ProportionPair) -> float:
    """p-value for H1: mu_a > mu_b under the pooled equal-n z-test.

    Returns 1.0 when the pooled proportion is 0 or 1 (no variance to test).
    """
    pooled = 0.5 * (pair.mu_a + pair.mu_b)
    var = 2.0 * pooled * (1.0 - pooled) / pair.n
    if var <= 0.0:
        return 1.0
    z = (pair.mu_a - pair.mu_b) / math.sqrt(var)
    return min(1.0, max(0.0, normal_sf(z)))


def z_test(mu_a: float, mu_b: float, n: int) -> float:
    return z_test_one_sided(ProportionPair(mu_a, mu_b, n))


def holm_bonferroni(
    pvalues: Sequence[PValueRecord], alpha: float
) -> tuple[bool, list[PValueRecord]]:
    """Holm step-down test of the whole family.

    The k-th smallest p-value (1-based) gets threshold ``alpha / (n - k + 1)``.
    Returns ``(all_rejected, records)`` where ``records`` keeps the input order
    with ``threshold`` filled in.
    """
    if not pvalues:
        raise ConfigurationError("holm_bonferroni needs at least one p-value")
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1), got {alpha}")
    n = len(pvalues)
    order = sorted(range(n), key=lambda i: (pvalues[i].p, i))
    thresholds = [0.0] * n
    all_rejected = True
    for k, idx in enumerate(order):
        rec = pvalues[idx]
        if not 0.0 <= rec.p <= 1.0:
            raise ConfigurationError(f"p-value out of range: {rec.p}")
        thresholds[idx] = alpha / (n - k)
        if rec.p > thresholds[idx]:
            all_rejected = False
    annotated = [replace(r, threshold=t) for r, t in zip(pvalues, thresholds)]
    return all_rejected, annotated


def bai_confidence_radius(t: int, alpha: float) -> float:
    """sqrt(ln(4 t^2 / alpha) / (2 t)), natural log."""
    if t < 1:
        raise ConfigurationError(f"round counter must be >= 1, got {t}")
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1), got {alpha}")
    return math.sqrt(math.log(4.0 * t * t / alpha) / (2.0 * t))
