import math
from dataclasses import replace
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from meanrev.backtest import (
    BacktestConfig,
    annualized_sharpe,
    cents_per_share,
    compare_normalization,
    holdings_for_date,
    performance_stats,
    return_on_capital,
    run_backtest,
    summary_text,
    write_report,
)
from meanrev.datapanel import ClassificationMap, PricePanel, cluster_synthetic_spec, generate_synthetic_panel
from meanrev.errors import UndefinedStatisticError, ValidationError


def panel_from_returns(overnight, intraday, volume=None, base=40.0):
    """Panel whose log overnight/intraday returns at column ``s`` are given (column 0 most recent)."""
    n, t = overnight.shape
    chron_on, chron_in = overnight[:, ::-1], intraday[:, ::-1]
    log_close = np.log(base) + np.cumsum(chron_on + chron_in, axis=1)
    prev = np.hstack([np.full((n, 1), np.log(base)), log_close[:, :-1]])
    o = np.exp(prev + chron_on)[:, ::-1]
    c = np.exp(log_close)[:, ::-1]
    v = np.full((n, t), 1e6) if volume is None else volume
    dates = tuple(date(2020, 1, 1) + timedelta(days=t - 1 - s) for s in range(t))
    return PricePanel(tuple(f"A{i:03d}" for i in range(n)), dates, o, c, o, c, v)


def synthetic(seed=3, n=40, clusters=4, dates=80, **kw):
    spec = cluster_synthetic_spec(n, clusters, dates, seed, reversion=0.5, **kw)
    return generate_synthetic_panel(spec), spec.classification


CFG = BacktestConfig(top_n=30, addv_days=5, period=10, investment=1e6)


# ---- statistics


def test_constant_pnl_statistics():
    pnl = np.full(50, 1e6 * 0.001)
    assert return_on_capital(pnl, 1e6) == pytest.approx(0.252, rel=1e-12)
    with pytest.raises(UndefinedStatisticError):
        annualized_sharpe(pnl)


def test_cents_per_share_example():
    assert cents_per_share(100.0, 10_000.0) == 1.0
    with pytest.raises(UndefinedStatisticError):
        cents_per_share(1.0, 0.0)


def test_sharpe_uses_sample_deviation():
    pnl = np.array([1.0, 2.0, 3.0, 6.0])
    assert annualized_sharpe(pnl) == pytest.approx(3.0 / np.std(pnl, ddof=1) * np.sqrt(252), rel=1e-14)
    with pytest.raises(UndefinedStatisticError):
        annualized_sharpe([1.0])
    with pytest.raises(UndefinedStatisticError):
        return_on_capital([], 1.0)


def test_config_validation():
    with pytest.raises(ValidationError):
        BacktestConfig(investment=0)
    with pytest.raises(ValidationError):
        BacktestConfig(top_n=1)
    with pytest.raises(ValidationError):
        BacktestConfig(level="desk")
    with pytest.raises(ValidationError):
        BacktestConfig(addv_days=0)


# ---- pipeline invariants


@pytest.mark.parametrize("seed", [3, 11])
@pytest.mark.parametrize("normalize", [False, True])
def test_gross_exact_and_dollar_neutral(seed, normalize):
    panel, cmap = synthetic(seed=seed)
    cfg = replace(CFG, normalize=normalize)
    rep = run_backtest(panel, cmap, cfg)
    assert len(rep.days) > 50
    for day in rep.days:
        assert math.fsum(np.abs(day.holdings)) == cfg.investment
        assert abs(day.holdings.sum()) <= 1e-9 * cfg.investment


def test_raw_holdings_cluster_neutral():
    panel, cmap = synthetic()
    rep = run_backtest(panel, cmap, CFG)
    for day in rep.days:
        labels = np.array([cmap.level(t, "industry") for t in day.tickers])
        for lab in np.unique(labels):
            assert abs(day.holdings[labels == lab].sum()) <= 1e-9 * CFG.investment


def test_pnl_and_shares_formulas():
    panel, cmap = synthetic()
    rep = run_backtest(panel, cmap, CFG)
    day = rep.days[3]
    idx = panel.ticker_index(day.tickers)
    o, c = panel.open[idx, day.s], panel.close[idx, day.s]
    np.testing.assert_array_equal(day.pnl, day.holdings * (c / o - 1))
    np.testing.assert_array_equal(day.shares, 2 * np.abs(day.holdings) / o)


def test_contrarian_sign():
    on = np.zeros((4, 30))
    on[:, 0] = [0.02, -0.01, 0.0, -0.01]
    panel = panel_from_returns(on, np.zeros((4, 30)))
    cmap = ClassificationMap({t: ("S", "I", "U") for t in panel.tickers})
    _, d, reason = holdings_for_date(panel, cmap, CFG, panel.tickers, 0)
    assert reason is None
    assert d[0] < 0 and d[1] > 0 and d[3] > 0


def test_bit_identical_rerun():
    panel, cmap = synthetic(seed=5)
    a = run_backtest(panel, cmap, CFG)
    b = run_backtest(*synthetic(seed=5), CFG)
    assert len(a.days) == len(b.days)
    for x, y in zip(a.days, b.days):
        assert x.tickers == y.tickers
        assert x.holdings.tobytes() == y.holdings.tobytes()
        assert x.pnl.tobytes() == y.pnl.tobytes()


def test_no_lookahead():
    panel, cmap = synthetic(seed=9)
    s = 30
    rng = np.random.default_rng(0)
    arrays = {}
    for name in ("open", "close", "adj_open", "adj_close", "volume"):
        a = getattr(panel, name).copy()
        a[:, :s] *= rng.uniform(0.5, 1.5, a[:, :s].shape)
        if name in ("close", "adj_close", "volume"):
            a[:, s] *= rng.uniform(0.5, 1.5, a.shape[0])
        arrays[name] = a
    future = replace(panel, **arrays)
    before = {d.s: d for d in run_backtest(panel, cmap, CFG).days}
    after = {d.s: d for d in run_backtest(future, cmap, CFG).days}
    for k in range(s, panel.n_dates):
        if k in before:
            assert before[k].tickers == after[k].tickers
            np.testing.assert_array_equal(before[k].holdings, after[k].holdings)
    assert s in before


def test_universe_limited_to_top_liquidity():
    panel, cmap = synthetic(seed=2)
    rep = run_backtest(panel, cmap, replace(CFG, top_n=10))
    assert all(len(d.tickers) == 10 for d in rep.days)


def test_no_signal_date_skipped():
    on = np.full((5, 30), 0.01)
    intra = np.zeros((5, 30))
    on[:, 1:] = np.random.default_rng(0).normal(scale=0.01, size=(5, 29))
    panel = panel_from_returns(on, intra)
    cmap = ClassificationMap({t: ("S", "I", "U") for t in panel.tickers})
    rep = run_backtest(panel, cmap, CFG)
    assert panel.dates[0] not in rep.dates
    assert any(d == panel.dates[0] and "no signal" in r for d, r in rep.skipped)
    assert f"skipped {panel.dates[0].isoformat()}" in summary_text(rep)


def test_missing_data_excluded():
    panel, cmap = synthetic(seed=4, n=12, clusters=2)
    close = panel.close.copy()
    close[0, 20] = np.nan
    rep = run_backtest(replace(panel, close=close, adj_close=close), cmap, CFG)
    day = {d.s: d for d in rep.days}
    assert panel.tickers[0] not in day[20].tickers
    assert panel.tickers[0] not in day[19].tickers


def test_date_range_filter():
    panel, cmap = synthetic()
    lo, hi = panel.dates[40], panel.dates[20]
    rep = run_backtest(panel, cmap, replace(CFG, start=lo, end=hi))
    assert rep.dates and min(rep.dates) >= lo and max(rep.dates) <= hi


# ---- normalization


def test_normalization_tames_outliers():
    panel, cmap = synthetic(seed=1, outlier_prob=0.03, outlier_scale=10)
    cmp = compare_normalization(panel, cmap, CFG)
    raw = max(np.abs(d.holdings).max() for d in cmp.raw.days) / CFG.investment
    norm = max(np.abs(d.holdings).max() for d in cmp.normalized.days) / CFG.investment
    assert norm < raw
    assert cmp.table().startswith("metric,raw,normalized,diff\nroc,")


def test_gaussian_cross_sections_are_fixed_points():
    n, t = 25, 40
    rng = np.random.default_rng(12)
    q = stats.norm.ppf((np.arange(1, n + 1) - 0.5) / n)
    on = np.stack([rng.permutation(q) * 0.01 + rng.normal(scale=0.005) for _ in range(t)], axis=1)
    panel = panel_from_returns(on, rng.normal(scale=0.01, size=(n, t)))
    cmap = ClassificationMap({k: ("S", "I", "U") for k in panel.tickers})
    cfg = replace(CFG, top_n=n)
    cmp = compare_normalization(panel, cmap, cfg)
    assert len(cmp.raw.days) == len(cmp.normalized.days) > 0
    for a, b in zip(cmp.raw.days, cmp.normalized.days):
        np.testing.assert_allclose(b.holdings, a.holdings, rtol=1e-6, atol=1e-12 * cfg.investment)


def test_report_files(tmp_path):
    panel, cmap = synthetic()
    rep = run_backtest(panel, cmap, CFG)
    text = write_report(rep, tmp_path)
    assert "ROC = " in text and "SR = " in text and "CPS = " in text
    pnl_lines = (tmp_path / "daily_pnl.csv").read_text().splitlines()
    assert pnl_lines[0] == "date,total_pnl,cum_pnl" and len(pnl_lines) == len(rep.days) + 1
    stats_ = performance_stats(rep)
    assert np.isfinite([stats_.roc, stats_.sharpe, stats_.cps]).all()


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.booleans(), st.sampled_from(["sector", "industry", "subindustry"]))
def test_invariants_hold_for_any_seed(seed, normalize, level):
    panel, cmap = synthetic(seed=seed, n=20, clusters=3, dates=40)
    cfg = replace(CFG, normalize=normalize, level=level, top_n=15)
    for day in run_backtest(panel, cmap, cfg).days:
        assert math.fsum(np.abs(day.holdings)) == cfg.investment
        assert abs(math.fsum(day.holdings)) <= 1e-9 * cfg.investment
