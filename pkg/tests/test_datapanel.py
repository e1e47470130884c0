import math
from datetime import date

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from meanrev.datapanel import (
    ClassificationMap,
    PricePanel,
    SyntheticSpec,
    addv,
    cluster_synthetic_spec,
    generate_synthetic_panel,
    intraday_returns,
    load_classification,
    load_price_panel,
    loadings_from_classification,
    overnight_returns,
    rebalance_schedule,
    select_universe,
    write_classification,
    write_price_panel,
)
from meanrev.errors import (
    DataRangeError,
    DuplicateRowError,
    InsufficientDataError,
    NotPositiveDefiniteError,
    ParseError,
    ValidationError,
)
from meanrev.factor_model import sample_covariance

HEADER = "date,ticker,open,close,adj_open,adj_close,volume\n"


def write(tmp_path, text, name="p.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def small_panel(open_, close, volume=None, adj_open=None, adj_close=None):
    open_ = np.atleast_2d(np.asarray(open_, dtype=float))
    close = np.atleast_2d(np.asarray(close, dtype=float))
    n, t = open_.shape
    volume = np.ones((n, t)) if volume is None else np.atleast_2d(np.asarray(volume, dtype=float))
    dates = tuple(date(2020, 1, 31 - j) for j in range(t))
    return PricePanel(tuple(f"T{i}" for i in range(n)), dates, open_, close,
                      open_ if adj_open is None else np.atleast_2d(adj_open),
                      close if adj_close is None else np.atleast_2d(adj_close), volume)


def test_load_small_panel(tmp_path):
    rows = [f"2014-09-0{d},{t},10,11,10,11,100\n" for d in (3, 4, 5) for t in ("AAPL", "MSFT")]
    panel = load_price_panel(write(tmp_path, HEADER + "".join(rows)))
    assert panel.observation_count() == 6
    assert panel.tickers == ("AAPL", "MSFT")
    assert panel.dates[0] == date(2014, 9, 5)


def test_zero_price_rejected(tmp_path):
    with pytest.raises(ValidationError, match=":2:"):
        load_price_panel(write(tmp_path, HEADER + "2014-09-05,AAPL,0.0,1,1,1,5\n"))


def test_duplicate_row_rejected(tmp_path):
    text = HEADER + "2014-09-05,AAPL,1,1,1,1,5\n2014-09-05,AAPL,2,2,2,2,5\n"
    with pytest.raises(DuplicateRowError, match="AAPL, 2014-09-05"):
        load_price_panel(write(tmp_path, text))


def test_parse_errors_carry_line_numbers(tmp_path):
    with pytest.raises(ParseError, match=":3:"):
        load_price_panel(write(tmp_path, HEADER + "2014-09-05,A,1,1,1,1,5\n2014-09-06,A,x,1,1,1,5\n"))
    with pytest.raises(ParseError, match=":2:"):
        load_price_panel(write(tmp_path, HEADER + "2014-13-05,A,1,1,1,1,5\n"))
    with pytest.raises(ParseError):
        load_price_panel(write(tmp_path, "d,t\n"))


def test_missing_values_are_nan(tmp_path):
    text = HEADER + "2014-09-04,A,1,1,1,1,5\n2014-09-05,A,,2,2,2,5\n2014-09-05,B,1,1,1,1,na\n"
    panel = load_price_panel(write(tmp_path, text))
    assert math.isnan(panel.open[0, 0])
    assert math.isnan(panel.volume[1, 0])
    assert math.isnan(panel.close[1, 1])


def test_panel_csv_round_trip(tmp_path):
    spec = cluster_synthetic_spec(6, 2, 12, seed=5)
    panel = generate_synthetic_panel(spec)
    write_price_panel(panel, tmp_path / "x.csv")
    back = load_price_panel(tmp_path / "x.csv")
    assert back.tickers == panel.tickers and back.dates == panel.dates
    np.testing.assert_array_equal(back.close, panel.close)
    write_classification(spec.classification, tmp_path / "c.csv")
    assert load_classification(tmp_path / "c.csv").labels == spec.classification.labels


def test_overnight_returns_examples():
    panel = small_panel([[102, 1], [100, 1], [95, 1]], [[1, 100], [1, 100], [1, 100]])
    cs = overnight_returns(panel, 0)
    np.testing.assert_allclose(cs.values, [math.log(1.02), 0.0, math.log(0.95)], rtol=1e-15)
    assert cs.values[0] == pytest.approx(0.019803, abs=1e-6)
    assert cs.values[2] == pytest.approx(-0.051293, abs=1e-6)
    with pytest.raises(DataRangeError):
        overnight_returns(panel, 1)


def test_overnight_uses_adjusted_prices():
    panel = small_panel([[50, 1]], [[1, 100]], adj_open=[[102, 1]], adj_close=[[1, 100]])
    assert overnight_returns(panel, 0).values[0] == pytest.approx(math.log(1.02), rel=1e-15)


def test_intraday_returns_examples():
    panel = small_panel([[10], [7], [20]], [[10.5], [7], [19]])
    np.testing.assert_allclose(intraday_returns(panel, 0).values, [0.05, 0.0, -0.05], atol=1e-15)


def test_missing_inputs_excluded_and_reported():
    panel = small_panel([[10, 10], [np.nan, 10]], [[11, 10], [10, 10]])
    cs = intraday_returns(panel, 0)
    assert cs.tickers == ("T0",) and cs.excluded == ("T1",)


def test_addv_examples():
    panel = small_panel(np.ones((1, 3)), [[99, 10, 10]], volume=[[7, 100, 200]])
    assert addv(panel, 0, 2).values[0] == 1500.0
    panel = small_panel(np.ones((1, 2)), [[1, 10]], volume=[[5, 0]])
    assert addv(panel, 0, 1).values[0] == 0.0
    with pytest.raises(DataRangeError):
        addv(panel, 0, 2)


def test_addv_matches_naive_resummation():
    panel = generate_synthetic_panel(cluster_synthetic_spec(8, 2, 40, seed=11))
    d, s = 21, 5
    got = addv(panel, s, d).values
    for i in range(panel.n_tickers):
        total = 0.0
        for r in range(1, d + 1):
            total += panel.volume[i, s + r] * panel.close[i, s + r]
        assert got[i] == pytest.approx(total / d, rel=1e-12)


def test_select_universe_examples():
    assert select_universe({"A": 3, "B": 1, "C": 2}, 2).members == ("A", "C")
    assert set(select_universe({"A": 3, "B": 1}, 5).members) == {"A", "B"}
    assert select_universe({"B": 2, "A": 2}, 1).members == ("A",)
    with pytest.raises(ValidationError):
        select_universe({}, 1)


@given(st.dictionaries(st.text("ABCDEFG", min_size=1, max_size=3), st.integers(0, 5), min_size=1),
       st.integers(1, 10), st.randoms())
def test_select_universe_permutation_invariant(liq, top_n, rnd):
    items = list(liq.items())
    rnd.shuffle(items)
    assert select_universe(dict(items), top_n).members == select_universe(liq, top_n).members


def test_rebalance_schedule_examples():
    assert [len(iv.dates) for iv in rebalance_schedule(63, 21)] == [21, 21, 21]
    assert len(rebalance_schedule(21, 21)) == 1
    sched = rebalance_schedule(50, 21)
    assert [len(iv.dates) for iv in sched] == [21, 21, 8]
    assert sched[2].partial and sched[2].formation == sched[1].formation
    with pytest.raises(InsufficientDataError):
        rebalance_schedule(30, 21, lookback=10)


def test_rebalance_schedule_oldest_first_and_lookback():
    sched = rebalance_schedule(30, 5, lookback=4)
    flat = [s for iv in sched for s in iv.dates]
    assert flat == list(range(25, -1, -1))
    assert all(iv.formation == iv.dates[0] for iv in sched if not iv.partial)


def test_loadings_from_classification():
    cmap = ClassificationMap({"A": ("X", "i1", "u1"), "B": ("X", "i2", "u2"), "C": ("Y", "i3", "u3")})
    lm = loadings_from_classification(cmap, ["A", "B", "C"], "sector")
    np.testing.assert_array_equal(lm.values, [[1, 0], [1, 0], [0, 1]])
    one = loadings_from_classification(cmap, ["A", "B"], "sector")
    np.testing.assert_array_equal(one.values, [[1], [1]])
    assert lm.columns == ("X", "Y") and one.columns == ("X",)
    with pytest.raises(ValidationError, match="'D'"):
        loadings_from_classification(cmap, ["A", "D"], "sector")
    with pytest.raises(ValidationError):
        loadings_from_classification(cmap, ["A"], "country")


def test_cluster_rows_and_columns():
    spec = cluster_synthetic_spec(23, 4, 5)
    lm = loadings_from_classification(spec.classification, spec.tickers, "industry")
    assert np.all(lm.values.sum(axis=1) == 1)
    np.testing.assert_array_equal(lm.values.sum(axis=0), [6, 6, 6, 5])


def test_synthetic_determinism():
    spec = cluster_synthetic_spec(10, 3, 30, seed=9, reversion=0.3, outlier_prob=0.05, outlier_scale=5)
    a, b = generate_synthetic_panel(spec), generate_synthetic_panel(spec)
    for name in ("open", "close", "adj_open", "adj_close", "volume"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_synthetic_spec_validation():
    with pytest.raises(NotPositiveDefiniteError):
        SyntheticSpec([0.1, 0.1], [[1.0], [1.0]], [[-1.0]], 10)
    with pytest.raises(ValidationError):
        SyntheticSpec([0.0, 0.1], np.zeros((2, 0)), np.zeros((0, 0)), 10)


def _close_returns(panel):
    # chronological close-to-close log returns, one row per date
    lc = np.log(panel.close[:, ::-1])
    return np.diff(lc, axis=1).T


def test_synthetic_no_factor_covariance_is_diagonal():
    xi = np.array([0.01, 0.02, 0.015])
    panel = generate_synthetic_panel(SyntheticSpec(xi, np.zeros((3, 0)), np.zeros((0, 0)), 20001, seed=1))
    cov = sample_covariance(_close_returns(panel)).cov
    np.testing.assert_allclose(np.diag(cov), xi**2, rtol=0.05)
    off = cov - np.diag(np.diag(cov))
    assert np.max(np.abs(off)) < 0.05 * xi.min() ** 2


def test_synthetic_single_factor_tiny_specific_risk_is_perfectly_correlated():
    spec = SyntheticSpec([1e-7] * 4, np.ones((4, 1)), [[1e-4]], 2000, seed=2)
    corr = sample_covariance(_close_returns(generate_synthetic_panel(spec))).corr
    assert np.min(corr) > 1 - 1e-6


def test_synthetic_covariance_converges_to_theta():
    rng = np.random.default_rng(4)
    omega = rng.normal(size=(5, 2)) * 0.01
    phi = np.array([[1.0, 0.3], [0.3, 0.5]])
    spec = SyntheticSpec(rng.uniform(0.005, 0.01, 5), omega, phi, 100001, seed=3)
    cov = sample_covariance(_close_returns(generate_synthetic_panel(spec))).cov
    theta = spec.theta
    assert np.linalg.norm(cov - theta) / np.linalg.norm(theta) < 0.1
