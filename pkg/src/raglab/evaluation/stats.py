"""Run statistics: accuracy, binomial confidence intervals, McNemar, throughput.

McNemar's exact two-sided p doubles the smaller binomial tail,
p = min(1, 2 * P(X <= min(b, c))) for X ~ Binomial(b + c, 1/2), computed with
exact integer binomials; above the small-sample threshold the chi-square
statistic with continuity correction ((|b - c| - 1)^2 / (b + c), 1 df) is
used instead. The 1-df chi-square survival function is erfc(sqrt(x / 2)),
so no external stats dependency is needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

EXACT_MCNEMAR_MAX_DISCORDANT = 25
Z_95 = 1.96


@dataclass(frozen=True)
class PairedComparison:
    """Discordant counts and test result for runs A vs B on the same items.

    Orientation is B minus A: ``b`` counts items only B got right, ``c``
    counts items only A got right, so delta_acc = (b - c) / n = acc(B) - acc(A).
    """

    name: str
    b: int
    c: int
    n: int
    delta_acc: float
    p_value: float
    method: str   # exact | chi2cc


def score_run(items: Sequence) -> float:
    """Exact-match accuracy: correct count over item count."""
    if not items:
        raise ValueError("cannot score an empty run")
    return sum(1 for it in items if it.correct) / len(items)


def wald_ci95(acc: float, n: int) -> Tuple[float, float]:
    """Normal-approximation interval acc +/- 1.96*sqrt(acc(1-acc)/n), clamped."""
    if not 0.0 <= acc <= 1.0:
        raise ValueError("accuracy must lie in [0, 1]")
    if n < 1:
        raise ValueError("n must be >= 1")
    half = Z_95 * math.sqrt(acc * (1.0 - acc) / n)
    return max(0.0, acc - half), min(1.0, acc + half)


def wilson_ci95(acc: float, n: int) -> Tuple[float, float]:
    """Wilson score interval, offered alongside Wald for comparison."""
    if not 0.0 <= acc <= 1.0:
        raise ValueError("accuracy must lie in [0, 1]")
    if n < 1:
        raise ValueError("n must be >= 1")
    z2 = Z_95 * Z_95
    center = (acc + z2 / (2 * n)) / (1 + z2 / n)
    half = (Z_95 / (1 + z2 / n)) * math.sqrt(acc * (1 - acc) / n + z2 / (4 * n * n))
    return max(0.0, center - half), min(1.0, center + half)


def _exact_two_sided_p(b: int, c: int) -> float:
    n = b + c
    if n == 0:
        return 1.0
    m = min(b, c)
    tail = sum(math.comb(n, k) for k in range(m + 1))
    return min(1.0, 2.0 * tail / (2 ** n))


def _chi2cc_p(b: int, c: int) -> float:
    stat = (abs(b - c) - 1.0) ** 2 / (b + c)
    return math.erfc(math.sqrt(stat / 2.0))


def mcnemar(items_a: Sequence, items_b: Sequence, name: str = "") -> PairedComparison:
    """Paired test on discordant counts between two runs over identical qids."""
    a_by_qid = {it.qid: it for it in items_a}
    b_by_qid = {it.qid: it for it in items_b}
    if set(a_by_qid) != set(b_by_qid):
        raise ValueError("runs do not cover the same qid set")
    b_count = sum(1 for qid, a in a_by_qid.items()
                  if not a.correct and b_by_qid[qid].correct)
    c_count = sum(1 for qid, a in a_by_qid.items()
                  if a.correct and not b_by_qid[qid].correct)
    discordant = b_count + c_count
    if discordant <= EXACT_MCNEMAR_MAX_DISCORDANT:
        p, method = _exact_two_sided_p(b_count, c_count), "exact"
    else:
        p, method = _chi2cc_p(b_count, c_count), "chi2cc"
    n = len(a_by_qid)
    return PairedComparison(name=name, b=b_count, c=c_count, n=n,
                            delta_acc=(b_count - c_count) / n, p_value=p,
                            method=method)


def throughput(n: int, runtime_s: float) -> float:
    """Evaluated examples per second of wall-clock runtime."""
    if runtime_s <= 0:
        raise ValueError("runtime must be positive")
    return n / runtime_s
