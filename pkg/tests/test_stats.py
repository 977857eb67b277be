import math

import numpy as np
import pytest
from scipy import integrate
from scipy import stats as sps

from cyclegan3d.stats import (Score, ScoreTable, StatsError, UndefinedCorrelationError, chi2_sf,
                              kruskal_wallis, lcc, mann_whitney_u, midranks, mos, scenario_tests, srocc)


# ---------------------------------------------------------------- oracles

def brute_midranks(v):
    return np.array([1 + sum(b < a for b in v) + (sum(b == a for b in v) - 1) / 2 for a in v])


def brute_pearson(a, b):
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    return cov / math.sqrt(sum((x - ma) ** 2 for x in a) * sum((y - mb) ** 2 for y in b))


def brute_u(a, b):
    return sum(1.0 if x > y else 0.5 if x == y else 0.0 for x in a for y in b)


def brute_h(groups):
    pooled = [v for g in groups for v in g]
    n = len(pooled)
    ranks = brute_midranks(pooled)
    h, start = 0.0, 0
    for g in groups:
        h += sum(ranks[start:start + len(g)]) ** 2 / len(g)
        start += len(g)
    h = 12 / (n * (n + 1)) * h - 3 * (n + 1)
    ties = [pooled.count(v) for v in set(pooled)]
    return h / (1 - sum(t ** 3 - t for t in ties) / (n ** 3 - n))


def quad_chi2_sf(x, df):
    pdf = lambda t: t ** (df / 2 - 1) * math.exp(-t / 2) / (2 ** (df / 2) * math.gamma(df / 2))
    return integrate.quad(pdf, x, np.inf, epsabs=1e-13, epsrel=1e-12)[0]


def tied_sample(r, n):
    return list(r.integers(1, 8, size=n).astype(float))


# ----------------------------------------------------------------- ranks

def test_midranks_with_ties():
    np.testing.assert_array_equal(midranks([10, 20, 20, 30]), [1, 2.5, 2.5, 4])
    r = np.random.default_rng(0)
    for _ in range(50):
        v = tied_sample(r, int(r.integers(3, 30)))
        np.testing.assert_array_equal(midranks(v), brute_midranks(v))


def test_correlation_examples():
    a = [1, 2, 3, 4]
    assert srocc(a, [10, 20, 30, 40]) == 1.0 and srocc(a, [40, 30, 20, 10]) == -1.0
    assert lcc(a, [2 * x + 1 for x in a]) == pytest.approx(1.0, abs=1e-15)
    assert lcc(a, [-x for x in a]) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(UndefinedCorrelationError):
        lcc(a, [5, 5, 5, 5])
    with pytest.raises(UndefinedCorrelationError):
        srocc([1, 1, 1], [1, 2, 3])
    with pytest.raises(StatsError):
        srocc([1, 2], [1, 2])


def test_correlations_match_oracles():
    r = np.random.default_rng(1)
    for _ in range(100):
        n = int(r.integers(3, 25))
        a, b = tied_sample(r, n), tied_sample(r, n)
        if len(set(a)) < 2 or len(set(b)) < 2:
            continue
        assert srocc(a, b) == pytest.approx(brute_pearson(brute_midranks(a), brute_midranks(b)), abs=1e-12)
        x, y = r.normal(size=n), r.normal(size=n)
        assert lcc(x, y) == pytest.approx(brute_pearson(x, y), abs=1e-12)
        assert srocc(a, b) == pytest.approx(sps.spearmanr(a, b)[0], abs=1e-8)


# ------------------------------------------------------------------ tests

def test_kruskal_hand_example():
    h, p = kruskal_wallis([[1, 2, 3], [4, 5, 6]])
    assert h == pytest.approx(27 / 7, abs=1e-12)
    assert p == pytest.approx(quad_chi2_sf(27 / 7, 1), abs=1e-8)


@pytest.mark.parametrize("df", [1, 2, 3, 5, 10])
def test_chi2_tail_against_quadrature(df):
    for x in (0.1, 1.0, 3.857, 7.5, 20.0):
        assert chi2_sf(x, df) == pytest.approx(quad_chi2_sf(x, df), abs=1e-8)
    assert chi2_sf(0, df) == 1.0


def test_kruskal_matches_oracles_with_ties():
    r = np.random.default_rng(2)
    for _ in range(100):
        k = int(r.integers(2, 6))
        groups = [tied_sample(r, int(r.integers(2, 9))) for _ in range(k)]
        if len({v for g in groups for v in g}) < 2:
            continue
        h, p = kruskal_wallis(groups)
        assert h == pytest.approx(brute_h(groups), abs=1e-8)
        assert p == pytest.approx(quad_chi2_sf(h, k - 1), abs=1e-8)
        ref = sps.kruskal(*groups)
        assert h == pytest.approx(ref.statistic, abs=1e-8) and p == pytest.approx(ref.pvalue, abs=1e-8)


def test_kruskal_errors():
    with pytest.raises(StatsError, match="identical"):
        kruskal_wallis([[3, 3], [3, 3]])
    with pytest.raises(StatsError):
        kruskal_wallis([[1, 2]])
    with pytest.raises(StatsError):
        kruskal_wallis([[1, 2], [3]])


def test_kruskal_calibration():
    passes = 0
    for t in range(100):
        r = np.random.default_rng(1000 + t)
        passes += kruskal_wallis([r.normal(size=200), r.normal(size=200)])[1] > 0.01
    assert passes >= 95


def test_mann_whitney_examples():
    assert mann_whitney_u([1, 2], [3, 4])[0] == 0
    a = [1, 2, 2, 5]
    assert mann_whitney_u(a, a)[0] == 8
    u, p, padj = mann_whitney_u([1, 2, 3], [4, 5, 6], bonferroni_m=3)
    assert padj == min(1.0, 3 * p)
    with pytest.raises(StatsError):
        mann_whitney_u([], [1])


def test_mann_whitney_matches_oracles():
    r = np.random.default_rng(3)
    for _ in range(100):
        a, b = tied_sample(r, int(r.integers(1, 15))), tied_sample(r, int(r.integers(1, 15)))
        u, p, _ = mann_whitney_u(a, b)
        assert u == brute_u(a, b)
        if len(set(a + b)) > 1:
            ref = sps.mannwhitneyu(a, b, use_continuity=True, alternative="two-sided", method="asymptotic")
            assert u == ref.statistic
            assert p == pytest.approx(ref.pvalue, abs=1e-8)


def test_statistics_invariant_to_order_and_monotone_maps():
    r = np.random.default_rng(4)
    a, b = tied_sample(r, 12), tied_sample(r, 12)
    perm = r.permutation(12)
    assert srocc(a, b) == pytest.approx(srocc(np.array(a)[perm], np.array(b)[perm]), abs=1e-12)
    assert srocc(a, b) == pytest.approx(srocc(np.exp(a), b), abs=1e-12)
    assert kruskal_wallis([a, b])[0] == pytest.approx(kruskal_wallis([b, a])[0], abs=1e-12)


# -------------------------------------------------------------------- MOS

ITEMS_W_REF = ["A2L_D24", "A2R_D24", "B3R_D24"]
ITEMS_WO_REF = ["A2R_D10", "A2R_D14", "A2R_D17", "B3L_D24", "B3R_D17", "TX12E2L_D14", "TX12E2R_D14",
                "TX12E3L_D14", "TX13B1L_D14", "TX13B3R_D14"]

# per-item MOS and the rounded (W Ref, W/O Ref, All) summaries for each method
REFERENCE_MOS = {
    "UNSB": ([31.7, 22.9, 33.3, 26.1, 19.4, 25.8, 26.6, 30.0, 33.9, 24.2, 22.2, 26.3, 19.1],
             (29.300, 25.360, 26.269)),
    "2D CycleGAN": ([37.0, 42.3, 30.7, 31.4, 44.2, 42.7, 40.4, 48.0, 35.9, 42.2, 35.4, 49.0, 47.1],
                    (36.667, 41.630, 40.485)),
    "3D CycleGAN-GL": ([46.9, 42.1, 62.2, 63.3, 39.0, 46.3, 50.4, 42.8, 46.1, 47.1, 47.4, 50.8, 62.3],
                       (50.400, 49.550, 49.746)),
    "3D CycleGAN-2": ([56.9, 65.3, 39.7, 37.5, 62.9, 45.7, 55.9, 57.6, 55.4, 48.2, 52.9, 62.3, 50.2],
                      (53.967, 52.860, 53.115)),
    "3D CycleGAN-3": ([54.5, 65.9, 50.2, 57.7, 56.8, 58.9, 60.0, 50.6, 56.6, 56.1, 40.3, 55.5, 71.0],
                      (56.867, 56.350, 56.469)),
}


def reference_table():
    recs = []
    for method, (scores, _) in REFERENCE_MOS.items():
        for item, s in zip(ITEMS_W_REF + ITEMS_WO_REF, scores):
            scen = "w_ref" if item in ITEMS_W_REF else "wo_ref"
            recs.append(Score("panel", item, method, scen, s))
    return ScoreTable(recs)


def test_mos_examples():
    t = ScoreTable([Score("r1", "i", "m", "s", 56)])
    assert mos(t) == {("m", "s"): 56.0}
    t = ScoreTable([Score("r1", "i", "m", "s", 50), Score("r2", "i", "m", "s", 60)])
    assert mos(t) == {("m", "s"): 55.0}
    with pytest.raises(StatsError):
        ScoreTable([Score("r", "i", "m", "s", 0)])


def test_mos_reproduces_reference_totals():
    t = reference_table()
    by_scenario, overall = mos(t), mos(t, group_by=("method",))
    for method, (_, (w_ref, wo_ref, total)) in REFERENCE_MOS.items():
        assert round(by_scenario[(method, "w_ref")], 3) == w_ref
        assert round(by_scenario[(method, "wo_ref")], 3) == wo_ref
        assert round(overall[(method,)], 3) == total


def test_scenario_tests_pairs_and_bonferroni():
    (h, p), pairs = scenario_tests(reference_table(), "wo_ref")
    assert len(pairs) == 10
    assert 0 <= p <= 1
    for m1, m2, u, praw, padj in pairs:
        assert padj == min(1.0, 10 * praw)
    one = ScoreTable([Score("r", "i", "only", "s", 50), Score("r", "j", "only", "s", 60)])
    with pytest.raises(StatsError, match="at least 2"):
        scenario_tests(one, "s")


def test_score_csv_round_trip(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("rater,item,method,scenario,score\nr1,a,m,s,40\nr1,b,m,s,60\n")
    assert ScoreTable.read_csv(str(p)).scores() == [40.0, 60.0]
    p.write_text("rater,item,method,score\nr1,a,m,40\n")
    with pytest.raises(StatsError, match="header"):
        ScoreTable.read_csv(str(p))
    p.write_text("rater,item,method,scenario,score\nr1,a,m,s,abc\n")
    with pytest.raises(StatsError, match=":2"):
        ScoreTable.read_csv(str(p))
