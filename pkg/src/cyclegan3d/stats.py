"""Subjective-score statistics: MOS, rank/linear correlation, Kruskal-Wallis, Mann-Whitney U."""
from __future__ import annotations

import csv
import itertools
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaincc

SCORE_HEADER = ["rater", "item", "method", "scenario", "score"]


class StatsError(ValueError):
    pass


class UndefinedCorrelationError(StatsError):
    """A correlation whose denominator is zero (constant input)."""


# ------------------------------------------------------------- score table

@dataclass(frozen=True)
class Score:
    rater: str
    item: str
    method: str
    scenario: str
    score: float


class ScoreTable:
    def __init__(self, records):
        self.records = list(records)
        if not self.records:
            raise StatsError("score table is empty")
        for r in self.records:
            if not (1 <= r.score <= 100):
                raise StatsError(f"score {r.score} outside [1, 100] (rater {r.rater}, item {r.item})")

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != SCORE_HEADER:
                raise StatsError(f"{path}: header must be {','.join(SCORE_HEADER)}, got {reader.fieldnames}")
            recs = []
            for lineno, row in enumerate(reader, start=2):
                try:
                    recs.append(Score(row["rater"], row["item"], row["method"], row["scenario"],
                                      float(row["score"])))
                except (TypeError, ValueError):
                    raise StatsError(f"{path}:{lineno}: malformed row {row}") from None
        return cls(recs)

    def methods(self):
        return sorted({r.method for r in self.records})

    def scenarios(self):
        return sorted({r.scenario for r in self.records})

    def scores(self, method=None, scenario=None):
        return [r.score for r in self.records
                if (method is None or r.method == method) and (scenario is None or r.scenario == scenario)]


def mos(table, group_by=("method", "scenario")):
    """Arithmetic mean score per group key."""
    groups = defaultdict(list)
    for r in table.records:
        groups[tuple(getattr(r, g) for g in group_by)].append(r.score)
    if not groups:
        raise StatsError("no groups to average")
    return {k: float(np.mean(v)) for k, v in sorted(groups.items())}


# ------------------------------------------------------------------- ranks

def midranks(values):
    """1-based ranks with ties sharing the mean of the positions they span."""
    a = np.asarray(values, dtype=np.float64)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(len(a))
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def tie_sizes(values):
    _, counts = np.unique(np.asarray(values, dtype=np.float64), return_counts=True)
    return counts


def _pearson(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise StatsError("correlation inputs must be 1-D and equally long")
    if len(a) < 3:
        raise StatsError("correlation needs at least 3 pairs")
    ac, bc = a - a.mean(), b - b.mean()
    saa, sbb = ac @ ac, bc @ bc
    if saa == 0 or sbb == 0:
        raise UndefinedCorrelationError("correlation undefined: an input has zero variance")
    return float(np.clip(ac @ bc / math.sqrt(saa * sbb), -1.0, 1.0))


def lcc(a, b):
    """Pearson linear correlation."""
    return _pearson(a, b)


def srocc(a, b):
    """Spearman rank-order correlation (Pearson on midranks)."""
    return _pearson(midranks(a), midranks(b))


# ---------------------------------------------------------------- tests

def chi2_sf(x, df):
    """Chi-square upper tail through the regularized upper incomplete gamma."""
    if x <= 0:
        return 1.0
    return float(gammaincc(df / 2.0, x / 2.0))


def kruskal_wallis(groups):
    """H statistic (tie corrected) and its chi-square p-value with k-1 dof."""
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(groups) < 2:
        raise StatsError("Kruskal-Wallis needs at least 2 groups")
    if any(len(g) < 2 for g in groups):
        raise StatsError("every Kruskal-Wallis group needs at least 2 observations")
    pooled = np.concatenate(groups)
    n = len(pooled)
    ranks = midranks(pooled)
    correction = 1 - float(np.sum(tie_sizes(pooled) ** 3 - tie_sizes(pooled))) / (n ** 3 - n)
    if correction == 0:
        raise StatsError("all observations are identical; Kruskal-Wallis is undefined")
    h, start = 0.0, 0
    for g in groups:
        r = ranks[start:start + len(g)]
        h += len(g) * (r.mean() - (n + 1) / 2) ** 2
        start += len(g)
    h = 12.0 / (n * (n + 1)) * h / correction
    return h, chi2_sf(h, len(groups) - 1)


def mann_whitney_u(a, b, bonferroni_m=1):
    """U for sample ``a``, two-sided normal-approximation p, and min(1, m p)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    if na == 0 or nb == 0:
        raise StatsError("Mann-Whitney needs two nonempty samples")
    pooled = np.concatenate([a, b])
    n = na + nb
    ranks = midranks(pooled)
    u_a = float(ranks[:na].sum() - na * (na + 1) / 2)
    mu = na * nb / 2
    t = tie_sizes(pooled)
    var = na * nb / 12 * ((n + 1) - float(np.sum(t ** 3 - t)) / (n * (n - 1))) if n > 1 else 0.0
    if var <= 0:
        p = 1.0
    else:
        z = (abs(u_a - mu) - 0.5) / math.sqrt(var)
        p = min(1.0, math.erfc(z / math.sqrt(2)))
    return u_a, p, min(1.0, bonferroni_m * p)


# ------------------------------------------------------------- summaries

def scenario_tests(table, scenario):
    """Kruskal-Wallis over methods plus Bonferroni-adjusted pairwise Mann-Whitney U."""
    methods = [m for m in table.methods() if table.scores(m, scenario)]
    if len(methods) < 2:
        raise StatsError(f"scenario {scenario!r} has {len(methods)} method(s); "
                         "Kruskal-Wallis needs at least 2 to compare")
    h, p = kruskal_wallis([table.scores(m, scenario) for m in methods])
    pairs = list(itertools.combinations(methods, 2))
    pairwise = []
    for m1, m2 in pairs:
        u, praw, padj = mann_whitney_u(table.scores(m1, scenario), table.scores(m2, scenario), len(pairs))
        pairwise.append((m1, m2, u, praw, padj))
    return (h, p), pairwise
