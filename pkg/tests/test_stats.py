import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats as sps

from segqa.errors import ValidationError
from segqa.stats import (anova_oneway, betainc, dsc, f_sf, mae, mean_dsc, normal_cdf, pearson,
                         rank_sum, rankdata, spearman, wilcoxon_signed_rank)

from oracles import dice_loop, mae_loop, pearson_loop

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_dsc_matches_loop_oracle_on_small_grids(rng):
    for _ in range(20):
        a = rng.integers(0, 10, (4, 4, 4)).astype(np.uint8)
        b = rng.integers(0, 10, (4, 4, 4)).astype(np.uint8)
        got = dsc(a, b)
        want = dice_loop(a, b)
        assert np.allclose(got.per_structure, want, atol=1e-10, rtol=0)
        assert abs(got.mean - np.mean(want)) < 1e-10


def test_dsc_empty_conventions():
    z = np.zeros((3, 3, 3), np.uint8)
    one = z.copy()
    one[1, 1, 1] = 4
    rep = dsc(z, one)
    assert rep.per_structure[3] == 0.0
    assert all(v == 1.0 for i, v in enumerate(rep.per_structure) if i != 3)


def test_dsc_dims_mismatch():
    with pytest.raises(ValidationError):
        dsc(np.zeros((2, 2, 2), np.uint8), np.zeros((2, 2, 3), np.uint8))


@given(st.lists(st.integers(0, 9), min_size=8, max_size=8),
       st.lists(st.integers(0, 9), min_size=8, max_size=8))
def test_dsc_symmetric_and_bounded(a, b):
    a = np.array(a, np.uint8).reshape(2, 2, 2)
    b = np.array(b, np.uint8).reshape(2, 2, 2)
    assert mean_dsc(a, b) == mean_dsc(b, a)
    assert 0.0 <= mean_dsc(a, b) <= 1.0
    assert mean_dsc(a, a) == 1.0


@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=30))
def test_mae_matches_loop(pairs):
    t, p = zip(*pairs)
    assert abs(mae(t, p) - mae_loop(t, p)) <= 1e-10 * max(1.0, mae_loop(t, p))


def test_mae_validation():
    with pytest.raises(ValidationError):
        mae([], [])
    with pytest.raises(ValidationError):
        mae([1.0], [1.0, 2.0])


@given(st.lists(st.tuples(finite, finite), min_size=3, max_size=30))
def test_pearson_matches_loop(pairs):
    x, y = map(list, zip(*pairs))
    if np.ptp(x) < 1e-3 or np.ptp(y) < 1e-3:
        return
    assert abs(pearson(x, y) - pearson_loop(x, y)) < 1e-10


def test_pearson_degenerate():
    with pytest.raises(ValidationError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValidationError):
        pearson([1, 2], [1, 2])


def test_rankdata_ties():
    assert rankdata([10, 20, 20, 30]).tolist() == [1.0, 2.5, 2.5, 4.0]


def test_spearman_monotone_transform():
    x = np.linspace(0.1, 3, 20)
    assert spearman(x, np.exp(x)) == pytest.approx(1.0)
    assert spearman(x, -x ** 3) == pytest.approx(-1.0)


def test_normal_cdf_and_f_sf_frozen_values():
    assert normal_cdf(0.0) == 0.5
    assert normal_cdf(1.959963984540054) == pytest.approx(0.975, abs=1e-12)
    assert f_sf(1.0, 5, 5) == pytest.approx(0.5, abs=1e-10)
    # upper 5% point of F(2, 15)
    assert f_sf(3.6823203436732412, 2, 15) == pytest.approx(0.05, abs=1e-9)


@given(st.floats(0.1, 20), st.floats(0.1, 20), st.floats(0.0, 1.0))
def test_betainc_matches_scipy(a, b, x):
    from scipy.special import betainc as ref
    assert betainc(a, b, x) == pytest.approx(float(ref(a, b, x)), abs=1e-9)


def test_wilcoxon_exact_all_positive_n6():
    a = np.array([1.1, 2.3, 3.2, 4.5, 5.1, 6.7])
    res = wilcoxon_signed_rank(a, np.zeros(6), alternative="greater")
    assert res.method == "wilcoxon-exact"
    assert res.statistic == 21.0
    assert res.p_value == 0.015625


def test_wilcoxon_exact_vs_normal_n12():
    d = np.array([1.5, -0.7, 2.2, 3.1, -1.2, 0.4, 2.8, 1.9, -0.3, 2.5, 1.1, 0.9])
    ex = wilcoxon_signed_rank(d, np.zeros(12), "greater", method="exact")
    no = wilcoxon_signed_rank(d, np.zeros(12), "greater", method="normal")
    assert ex.method == "wilcoxon-exact" and no.method == "wilcoxon-normal"
    assert abs(ex.p_value - no.p_value) < 0.02


def test_wilcoxon_matches_scipy_exact(rng):
    for _ in range(10):
        a, b = rng.normal(size=9), rng.normal(size=9)
        for alt in ("two-sided", "greater", "less"):
            ours = wilcoxon_signed_rank(a, b, alt)
            ref = sps.wilcoxon(a, b, alternative=alt, method="exact")
            assert ours.p_value == pytest.approx(ref.pvalue, abs=1e-12)


def test_wilcoxon_all_tied_rejected():
    with pytest.raises(ValidationError):
        wilcoxon_signed_rank([1, 2, 3], [1, 2, 3])


def test_rank_sum_matches_scipy(rng):
    for n1, n2 in ((5, 7), (30, 40)):
        a, b = rng.normal(size=n1), rng.normal(0.5, size=n2)
        for alt in ("two-sided", "less", "greater"):
            ours = rank_sum(a, b, alt)
            method = "exact" if ours.method == "ranksum-exact" else "asymptotic"
            ref = sps.mannwhitneyu(a, b, alternative=alt, method=method,
                                   use_continuity=True)
            assert ours.statistic == ref.statistic
            assert ours.p_value == pytest.approx(ref.pvalue, abs=1e-10)


def test_anova_textbook_example():
    groups = [[6, 8, 4, 5, 3, 4], [8, 12, 9, 11, 6, 8], [13, 9, 11, 8, 7, 12]]
    res = anova_oneway(groups)
    assert abs(res.statistic - 315.0 / 34.0) < 1e-6
    assert res.p_value == pytest.approx(sps.f_oneway(*groups).pvalue, abs=1e-10)


def test_anova_validation():
    with pytest.raises(ValidationError):
        anova_oneway([[1, 2, 3]])
    with pytest.raises(ValidationError):
        anova_oneway([[1], [2, 3]])
    with pytest.raises(ValidationError):
        anova_oneway([[1, 1], [2, 2]])


@given(st.lists(st.lists(st.floats(-50, 50), min_size=2, max_size=8), min_size=2, max_size=5))
def test_anova_matches_scipy(groups):
    if all(np.ptp(g) < 1e-6 for g in groups):
        return
    res = anova_oneway(groups)
    ref = sps.f_oneway(*groups)
    assert res.statistic == pytest.approx(ref.statistic, rel=1e-7, abs=1e-9)
    assert 0.0 <= res.p_value <= 1.0
    if math.isfinite(ref.pvalue):
        assert res.p_value == pytest.approx(ref.pvalue, abs=1e-8)
