"""Segmentation metrics and the hypothesis tests used for benchmarking."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NumericError, ValidationError
from .grid import NUM_LABELS, STRUCTURES, LabelMap

EXACT_MAX_N = 12
_EXACT_RANKSUM_MAX_COMBOS = 20_000


@dataclass(frozen=True)
class DscReport:
    per_structure: tuple[float, ...]
    mean: float


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    method: str

    __test__ = False  # keep pytest from collecting this class


def _labels(x) -> np.ndarray:
    return x.labels if isinstance(x, LabelMap) else np.asarray(x)


def dsc(a: LabelMap | np.ndarray, b: LabelMap | np.ndarray) -> DscReport:
    """Per-structure Dice for labels 1..9.

    Empty/empty counts as 1.0 and empty/nonempty as 0.0.
    """
    la, lb = _labels(a), _labels(b)
    if la.shape != lb.shape:
        raise ValidationError(f"dims mismatch {la.shape} vs {lb.shape}")
    la = la.ravel()
    lb = lb.ravel()
    size_a = np.bincount(la, minlength=NUM_LABELS)
    size_b = np.bincount(lb, minlength=NUM_LABELS)
    inter = np.bincount(la[la == lb], minlength=NUM_LABELS)
    scores = []
    for lab in STRUCTURES:
        denom = int(size_a[lab]) + int(size_b[lab])
        scores.append(1.0 if denom == 0 else 2.0 * int(inter[lab]) / denom)
    return DscReport(tuple(scores), float(np.mean(scores)))


def mean_dsc(a, b) -> float:
    return dsc(a, b).mean


def mae(y_true: Sequence[float], y_pred: Sequence[float]) -> float:
    t = np.asarray(y_true, dtype=np.float64).ravel()
    p = np.asarray(y_pred, dtype=np.float64).ravel()
    if t.size != p.size:
        raise ValidationError(f"length mismatch {t.size} vs {p.size}")
    if t.size == 0:
        raise ValidationError("mae of empty sequences")
    return float(np.mean(np.abs(t - p)))


def rankdata(x: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties given their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    n = x.size
    while i < n:
        j = i
        while j + 1 < n and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _tie_counts(values: np.ndarray) -> np.ndarray:
    _, counts = np.unique(values, return_counts=True)
    return counts[counts > 1].astype(np.float64)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size:
        raise ValidationError("length mismatch")
    if x.size < 3:
        raise ValidationError("pearson needs at least 3 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValidationError("zero variance input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    return pearson(rankdata(x), rankdata(y))


# --------------------------------------------------------------------------
# distribution functions

def normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-15) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise NumericError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValidationError("betainc needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def f_cdf(x: float, d1: float, d2: float) -> float:
    if x <= 0:
        return 0.0
    return betainc(d1 / 2.0, d2 / 2.0, d1 * x / (d1 * x + d2))


def f_sf(x: float, d1: float, d2: float) -> float:
    if x <= 0:
        return 1.0
    # upper tail via the symmetric identity keeps precision for large F
    return betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * x))


# --------------------------------------------------------------------------
# tests

_ALTERNATIVES = ("two-sided", "greater", "less")


def _tail_p(p_greater: float, p_less: float, alternative: str) -> float:
    if alternative == "greater":
        p = p_greater
    elif alternative == "less":
        p = p_less
    else:
        p = 2.0 * min(p_greater, p_less)
    return float(min(1.0, max(0.0, p)))


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float],
                         alternative: str = "two-sided",
                         method: str = "auto") -> TestResult:
    """Paired signed-rank test on ``a - b``; statistic is W+ (sum of positive ranks).

    Zero differences are dropped.  ``method='auto'`` enumerates the exact null
    for n <= 12 and otherwise uses the tie-corrected normal approximation with
    a 0.5 continuity correction.
    """
    if alternative not in _ALTERNATIVES:
        raise ValidationError(f"alternative must be one of {_ALTERNATIVES}")
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        raise ValidationError("all pairs tied: no informative differences")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    use_exact = method == "exact" or (method == "auto" and n <= EXACT_MAX_N)
    if use_exact:
        if n > 20:
            raise ValidationError("exact enumeration limited to n <= 20")
        signs = (np.arange(2 ** n)[:, None] >> np.arange(n)[None, :]) & 1
        null = signs @ ranks
        tol = 1e-9
        p_greater = float(np.mean(null >= w_plus - tol))
        p_less = float(np.mean(null <= w_plus + tol))
        return TestResult(w_plus, _tail_p(p_greater, p_less, alternative), "wilcoxon-exact")
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(_tie_counts(np.abs(d)) ** 3
                                                         - _tie_counts(np.abs(d)))) / 48.0
    if var <= 0:
        raise NumericError("degenerate signed-rank variance")
    sd = math.sqrt(var)
    p_greater = 1.0 - normal_cdf((w_plus - mean - 0.5) / sd)
    p_less = normal_cdf((w_plus - mean + 0.5) / sd)
    return TestResult(w_plus, _tail_p(p_greater, p_less, alternative), "wilcoxon-normal")


def rank_sum(a: Sequence[float], b: Sequence[float], alternative: str = "two-sided",
             method: str = "auto") -> TestResult:
    """Wilcoxon rank-sum (Mann-Whitney) test; statistic is U for sample ``a``.

    ``alternative='less'`` tests whether ``a`` tends to be smaller than ``b``.
    """
    if alternative not in _ALTERNATIVES:
        raise ValidationError(f"alternative must be one of {_ALTERNATIVES}")
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    n1, n2 = x.size, y.size
    if n1 == 0 or n2 == 0:
        raise ValidationError("rank_sum needs two non-empty samples")
    pooled = np.concatenate([x, y])
    ranks = rankdata(pooled)
    r1 = float(ranks[:n1].sum())
    u1 = r1 - n1 * (n1 + 1) / 2.0
    N = n1 + n2
    use_exact = method == "exact" or (
        method == "auto" and math.comb(N, n1) <= _EXACT_RANKSUM_MAX_COMBOS)
    if use_exact:
        totals = np.array([ranks[list(c)].sum() for c in itertools.combinations(range(N), n1)])
        null_u = totals - n1 * (n1 + 1) / 2.0
        tol = 1e-9
        p_greater = float(np.mean(null_u >= u1 - tol))
        p_less = float(np.mean(null_u <= u1 + tol))
        return TestResult(u1, _tail_p(p_greater, p_less, alternative), "ranksum-exact")
    ties = _tie_counts(pooled)
    var = n1 * n2 / 12.0 * ((N + 1) - float(np.sum(ties ** 3 - ties)) / (N * (N - 1)))
    if var <= 0:
        raise ValidationError("rank_sum: all values tied")
    sd = math.sqrt(var)
    mean = n1 * n2 / 2.0
    p_greater = 1.0 - normal_cdf((u1 - mean - 0.5) / sd)
    p_less = normal_cdf((u1 - mean + 0.5) / sd)
    return TestResult(u1, _tail_p(p_greater, p_less, alternative), "ranksum-normal")


def anova_oneway(groups: Sequence[Sequence[float]]) -> TestResult:
    """One-way ANOVA F test across groups."""
    gs = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(gs) < 2:
        raise ValidationError("anova needs at least 2 groups")
    if any(g.size < 2 for g in gs):
        raise ValidationError("each anova group needs at least 2 values")
    k = len(gs)
    n_total = sum(g.size for g in gs)
    grand = float(np.sum([g.sum() for g in gs])) / n_total
    ss_between = float(sum(g.size * (g.mean() - grand) ** 2 for g in gs))
    ss_within = float(sum(np.sum((g - g.mean()) ** 2) for g in gs))
    if ss_within == 0.0:
        raise ValidationError("zero within-group variance in every group")
    d1, d2 = k - 1, n_total - k
    f = (ss_between / d1) / (ss_within / d2)
    return TestResult(f, f_sf(f, d1, d2), "anova-oneway")
