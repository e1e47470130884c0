import math
import statistics

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from meanrev.errors import NoSignalError, RankDeficiencyError, ValidationError
from meanrev.regression import (
    LoadingsMatrix,
    StrategyShaping,
    cross_sectional_regression,
    demean_by_cluster,
    holdings_from_residuals,
    normalize_residuals,
    regress_and_hold,
    scale_to_gross,
)

seeds = st.integers(0, 2**32 - 1)


def cluster_loadings(groups, k):
    lam = np.zeros((len(groups), k))
    lam[np.arange(len(groups)), groups] = 1.0
    return lam


# ---- examples


def test_weighted_intercept_regression_matches_weighted_mean():
    res = cross_sectional_regression([1.0, 3.0], np.ones((2, 1)), weights=[1.0, 3.0])
    # weighted mean (1*1 + 3*3) / 4 = 2.5
    np.testing.assert_allclose(res.coefficients, [2.5])
    np.testing.assert_allclose(res.residuals, [-1.5, 0.5])
    np.testing.assert_allclose(res.regressed, [-1.5, 1.5])
    assert abs(res.regressed.sum()) < 1e-15


def test_single_cluster_unit_weights_is_demeaning():
    res = cross_sectional_regression([1.0, 2.0, 3.0], np.ones((3, 1)))
    np.testing.assert_allclose(res.residuals, [-1, 0, 1], atol=1e-15)
    np.testing.assert_allclose(res.regressed, [-1, 0, 1], atol=1e-15)


def test_returns_in_span_give_zero_residuals(rng):
    omega = rng.normal(size=(8, 3))
    R = omega @ np.array([0.3, -1.0, 2.0])
    res = cross_sectional_regression(R, omega, weights=rng.uniform(0.5, 2, 8))
    assert np.max(np.abs(res.residuals)) < 1e-12


def test_intercept_appended_only_when_not_spanned(rng):
    R = rng.normal(size=6)
    lam = cluster_loadings([0, 0, 1, 1, 2, 2], 3)
    assert cross_sectional_regression(R, lam, with_intercept=True).columns == ("f0", "f1", "f2")
    res = cross_sectional_regression(R, rng.normal(size=(6, 2)), with_intercept=True)
    assert res.columns[-1] == "intercept"
    assert abs(res.regressed.sum()) < 1e-12


def test_rank_deficiency_names_dependent_columns(rng):
    a = rng.normal(size=(10, 2))
    omega = LoadingsMatrix(np.column_stack([a, a[:, 0] + a[:, 1]]), ("x", "y", "xy"))
    with pytest.raises(RankDeficiencyError, match="xy"):
        cross_sectional_regression(rng.normal(size=10), omega)
    res = cross_sectional_regression(rng.normal(size=10), omega, drop_dependent=True)
    assert res.dropped == ("xy",)
    assert res.columns == ("x", "y")


def test_invalid_inputs():
    with pytest.raises(ValidationError):
        cross_sectional_regression([1.0, 2.0], np.ones((2, 1)), weights=[1.0, 0.0])
    with pytest.raises(ValidationError):
        LoadingsMatrix(np.zeros((3, 1)))
    with pytest.raises(ValidationError):
        cross_sectional_regression([1.0, np.nan], np.ones((2, 1)))
    with pytest.raises(RankDeficiencyError):
        cross_sectional_regression([1.0, 2.0], np.eye(2)[:, [0, 1, 1]] + [[0, 0, 1], [0, 0, 0]])


def test_demean_by_cluster_examples():
    lam = cluster_loadings([0, 0, 1], 2)
    np.testing.assert_allclose(demean_by_cluster([1.0, 3.0, 7.0], lam), [-1, 1, 0])
    np.testing.assert_array_equal(demean_by_cluster([4.0, 4.0, 4.0], np.ones((3, 1))), [0, 0, 0])
    with pytest.raises(ValidationError):
        demean_by_cluster([1.0, 2.0], [[0.5], [1.0]])


def test_demean_matches_regression_random_instance(rng):
    groups = np.r_[np.arange(4), rng.integers(0, 4, 16)]
    lam = cluster_loadings(groups, 4)
    R = rng.normal(size=20)
    np.testing.assert_allclose(demean_by_cluster(R, lam), cross_sectional_regression(R, lam).residuals, atol=1e-12)


def test_linear_holdings_example():
    h = holdings_from_residuals([-1.0, 0.0, 1.0], StrategyShaping("linear", 2.0))
    assert h.gamma == 1.0
    np.testing.assert_array_equal(h.dollars, [1.0, 0.0, -1.0])
    assert h.mishedge == 0.0


def test_sign_holdings_example():
    h = holdings_from_residuals([-0.1, 0.2, 0.3], StrategyShaping("sign", 3.0))
    np.testing.assert_allclose(h.dollars, [1.0, -1.0, -1.0])
    assert h.mishedge == pytest.approx(-1.0)


def test_sign_of_zero_is_zero():
    h = holdings_from_residuals([-0.2, 0.0, 0.1, 0.3], StrategyShaping("sign", 3.0))
    np.testing.assert_allclose(h.dollars, [1.0, 0.0, -1.0, -1.0])


def test_tanh_small_residuals_close_to_linear(rng):
    x = rng.normal(size=30) * 1e-4
    lin = holdings_from_residuals(x, StrategyShaping("linear", 1e6)).dollars
    th = holdings_from_residuals(x, StrategyShaping("tanh", 1e6, kappa=1.0)).dollars
    assert np.max(np.abs(th - lin)) <= 0.01 * np.max(np.abs(lin))


def test_tanh_default_kappa_is_population_stdev():
    x = [-2.0, -1.0, 0.5, 2.5]
    h = holdings_from_residuals(x, StrategyShaping("tanh"))
    assert h.kappa == pytest.approx(statistics.pstdev(x), rel=1e-14)


def test_rank_and_power_kinds():
    x = np.array([0.3, -0.1, 0.2, -0.3])
    rank = holdings_from_residuals(x, StrategyShaping("rank", 10.0)).dollars
    # |x| ascending: -0.1 (1), 0.2 (2), 0.3 (3, first), -0.3 (4)
    np.testing.assert_allclose(rank, -10.0 * np.array([3, -1, 2, -4]) / 10)
    power = holdings_from_residuals(x, StrategyShaping("power", 1.0)).dollars
    expected = -x * np.abs(x)
    np.testing.assert_allclose(power, expected / np.abs(expected).sum())
    custom = holdings_from_residuals(x, StrategyShaping("custom", 1.0, func=lambda r: np.abs(r))).dollars
    np.testing.assert_allclose(custom, power)


def test_holdings_errors():
    with pytest.raises(NoSignalError):
        holdings_from_residuals([0.0, 0.0], StrategyShaping())
    with pytest.raises(ValidationError):
        StrategyShaping("quadratic")
    with pytest.raises(ValidationError):
        StrategyShaping(investment=0.0)
    with pytest.raises(ValidationError):
        StrategyShaping("custom")


def test_normalize_symmetric_input():
    out = normalize_residuals([-2.0, 0.0, 2.0])
    assert out[1] == pytest.approx(0.0, abs=1e-15)
    assert out[2] > 0
    assert out[0] == pytest.approx(-out[2], rel=1e-14)


def _quantile_vector(n):
    # quantiles from the stdlib normal, independent of the implementation's scipy path
    nd = statistics.NormalDist()
    q = np.array([nd.inv_cdf((r - 0.5) / n) for r in range(1, n + 1)])
    return (q - q.mean()) / q.std()


def test_normalize_fixed_point_on_gaussian_quantiles(rng):
    x = rng.permutation(_quantile_vector(41)) * 0.03 + 0.001
    np.testing.assert_allclose(normalize_residuals(x), x, atol=1e-10)


def test_normalize_squashes_outlier(rng):
    x = rng.normal(size=50)
    x[7] = 40.0
    out = normalize_residuals(x)
    assert np.max(np.abs(out)) < np.max(np.abs(x))


def test_normalize_errors():
    with pytest.raises(ValidationError):
        normalize_residuals([1.0, 2.0])
    with pytest.raises(ValidationError):
        normalize_residuals([3.0, 3.0, 3.0])


def test_regress_and_hold_is_neutral(rng):
    omega = rng.normal(size=(25, 3))
    res, h = regress_and_hold(rng.normal(size=25), omega, StrategyShaping(investment=5e6), with_intercept=True)
    assert math.fsum(np.abs(h.dollars)) == 5e6
    assert abs(h.dollars.sum()) <= 1e-10 * 5e6
    assert np.max(np.abs(h.dollars @ omega)) <= 1e-9 * 5e6


# ---- properties


@given(seeds, st.integers(5, 50), st.integers(1, 5))
def test_regressed_returns_orthogonal_to_loadings(seed, n, k):
    rng = np.random.default_rng(seed)
    k = min(k, n - 1)
    omega = rng.normal(size=(n, k))
    R = rng.normal(size=n)
    res = cross_sectional_regression(R, omega, weights=rng.uniform(0.1, 10, n), with_intercept=True)
    full = np.column_stack([omega, np.ones(n)]) if "intercept" in res.columns else omega
    bound = 1e-10 * np.linalg.norm(R) * np.linalg.norm(full, axis=0)
    assert np.all(np.abs(res.regressed @ full) <= bound)
    assert abs(res.regressed.sum()) <= 1e-10 * np.linalg.norm(R) * math.sqrt(n)


@given(seeds, st.integers(5, 40), st.integers(1, 4))
def test_regression_idempotent(seed, n, k):
    rng = np.random.default_rng(seed)
    omega = rng.normal(size=(n, min(k, n - 1)))
    eps = cross_sectional_regression(rng.normal(size=n), omega).residuals
    again = cross_sectional_regression(eps, omega).residuals
    assert np.max(np.abs(again - eps)) <= 1e-12 * max(1.0, np.max(np.abs(eps)))


@given(seeds, st.integers(2, 50), st.integers(1, 6))
def test_cluster_regression_equals_demeaning(seed, n, k):
    rng = np.random.default_rng(seed)
    k = min(k, n)
    groups = np.r_[np.arange(k), rng.integers(0, k, n - k)]
    lam = cluster_loadings(groups, k)
    R = rng.normal(size=n)
    np.testing.assert_allclose(demean_by_cluster(R, lam), cross_sectional_regression(R, lam).residuals,
                               atol=1e-12)


@given(seeds, st.integers(2, 60), st.sampled_from(["linear", "sign", "tanh", "rank", "power"]),
       st.floats(1e-3, 1e9))
def test_gross_exposure_exact(seed, n, kind, investment):
    rng = np.random.default_rng(seed)
    h = holdings_from_residuals(rng.normal(size=n), StrategyShaping(kind, investment))
    assert math.fsum(np.abs(h.dollars)) == investment


@given(seeds, st.integers(3, 80))
def test_normalize_preserves_order_and_mean(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.standard_t(3, size=n)
    out = normalize_residuals(x)
    np.testing.assert_array_equal(np.argsort(out, kind="stable"), np.argsort(x, kind="stable"))
    assert abs(out.mean() - x.mean()) <= 1e-14 * max(1.0, np.abs(x).max())
    assert out.std() == pytest.approx(x.std(), rel=1e-10)


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=40), st.floats(1e-6, 1e12))
def test_scale_to_gross_exact(values, investment):
    x = np.array(values)
    if not np.any(x):
        return
    d, gamma = scale_to_gross(x, investment)
    assert math.fsum(np.abs(d)) == investment
    assert gamma > 0
