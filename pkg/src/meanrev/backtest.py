"""Intraday mean-reversion backtest.

Each trading date ``s`` the overnight returns of the current universe are
demeaned within classification clusters (a unit-weight regression over
binary loadings), optionally conformed to a normal cross-section, and
turned into contrarian dollar holdings with ``sum |D| = I``. Positions are
filled at the open and closed at the close of the same day, without costs
or slippage, so the P&L of ticker ``i`` is ``D_i (C_i / O_i - 1)``.

Dates are indexed as in :class:`~meanrev.datapanel.PricePanel`: ``s = 0`` is
the most recent date and larger ``s`` lies further in the past.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path

import numpy as np

from .datapanel import (
    LEVELS,
    ClassificationMap,
    PricePanel,
    addv,
    loadings_from_classification,
    rebalance_schedule,
    select_universe,
)
from .errors import UndefinedStatisticError, ValidationError
from .regression import demean_by_cluster, normalize_residuals, scale_to_gross

logger = logging.getLogger(__name__)

TRADING_DAYS = 252
NO_SIGNAL_TOL = 1e-12


@dataclass(frozen=True)
class BacktestConfig:
    level: str = "industry"
    normalize: bool = False
    investment: float = 1.0e7
    top_n: int = 2000
    addv_days: int = 21
    period: int = 21
    start: date | None = None
    end: date | None = None

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValidationError(f"unknown classification level {self.level!r}; expected one of {LEVELS}")
        if not (self.investment > 0 and math.isfinite(self.investment)):
            raise ValidationError("investment level must be positive")
        if self.top_n < 2:
            raise ValidationError("top_n must be at least 2")
        if self.addv_days < 1:
            raise ValidationError("ADDV lookback must be at least 1 day")
        if self.period < 1:
            raise ValidationError("rebalance period must be at least 1 day")
        if self.start is not None and self.end is not None and self.start > self.end:
            raise ValidationError("start date is after end date")


@dataclass(frozen=True)
class DateResult:
    s: int
    date: date
    tickers: tuple[str, ...]
    holdings: np.ndarray
    pnl: np.ndarray
    shares: np.ndarray

    @property
    def total_pnl(self):
        return math.fsum(self.pnl)

    @property
    def total_shares(self):
        return math.fsum(self.shares)


@dataclass(frozen=True)
class BacktestReport:
    config: BacktestConfig
    days: tuple[DateResult, ...]
    skipped: tuple[tuple[date, str], ...] = ()

    @property
    def dates(self):
        return [d.date for d in self.days]

    @property
    def daily_pnl(self):
        return np.array([d.total_pnl for d in self.days])

    @property
    def daily_shares(self):
        return np.array([d.total_shares for d in self.days])


@dataclass(frozen=True)
class PerformanceStats:
    roc: float
    sharpe: float
    cps: float


def return_on_capital(daily_pnl, investment) -> float:
    """Annualized mean daily P&L over the investment level."""
    p = np.asarray(daily_pnl, dtype=float)
    if p.size == 0:
        raise UndefinedStatisticError("no P&L observations")
    return float(np.mean(p)) / investment * TRADING_DAYS


def annualized_sharpe(daily_pnl) -> float:
    p = np.asarray(daily_pnl, dtype=float)
    if p.size < 2:
        raise UndefinedStatisticError("Sharpe ratio needs at least 2 daily observations")
    mean = float(np.mean(p))
    sd = float(np.std(p, ddof=1))
    if sd <= 1e-12 * max(abs(mean), np.finfo(float).tiny):
        raise UndefinedStatisticError("daily P&L has zero variance; Sharpe ratio undefined")
    return mean / sd * math.sqrt(TRADING_DAYS)


def cents_per_share(total_pnl, total_shares) -> float:
    if not total_shares > 0:
        raise UndefinedStatisticError("no shares traded; cents per share undefined")
    return 100.0 * total_pnl / total_shares


def performance_stats(report: BacktestReport, investment=None) -> PerformanceStats:
    inv = report.config.investment if investment is None else investment
    pnl = report.daily_pnl
    return PerformanceStats(
        return_on_capital(pnl, inv),
        annualized_sharpe(pnl),
        cents_per_share(math.fsum(pnl), math.fsum(report.daily_shares)),
    )


def _trading_dates(panel: PricePanel, config: BacktestConfig):
    schedule = rebalance_schedule(panel.n_dates, config.period, config.addv_days)
    for interval in schedule:
        for s in interval.dates:
            d = panel.dates[s]
            if config.start is not None and d < config.start:
                continue
            if config.end is not None and d > config.end:
                continue
            yield interval.formation, s


def _universe(panel, cmap, config, formation):
    liq = addv(panel, formation, config.addv_days)
    ranked = {t: v for t, v in zip(liq.tickers, liq.values.tolist()) if t in cmap}
    if len(ranked) < 2:
        return ()
    return select_universe(ranked, config.top_n, formation).members


def holdings_for_date(panel: PricePanel, cmap: ClassificationMap, config: BacktestConfig, members, s):
    """Holdings at date ``s`` for ``members``; returns ``(tickers, D, reason)``.

    ``reason`` is ``None`` when the date is tradable; otherwise ``D`` is
    ``None`` and ``reason`` says why the date is skipped.
    """
    idx = panel.ticker_index(members)
    with np.errstate(invalid="ignore", divide="ignore"):
        ret = np.log(panel.adj_open[idx, s] / panel.adj_close[idx, s + 1])
    ok = np.isfinite(ret) & np.isfinite(panel.open[idx, s]) & np.isfinite(panel.close[idx, s])
    tickers = tuple(t for t, good in zip(members, ok) if good)
    if len(tickers) < 2:
        return tickers, None, "fewer than 2 tickers with complete data"
    r = ret[ok]
    lm = loadings_from_classification(cmap, tickers, config.level)
    eps = demean_by_cluster(r, lm)
    if not np.max(np.abs(eps)) > NO_SIGNAL_TOL * np.max(np.abs(r)):
        return tickers, None, "no signal (all residuals zero)"
    if config.normalize:
        if len(tickers) < 3:
            return tickers, None, "too few tickers to normalize residuals"
        eps = normalize_residuals(eps)
    dollars, _ = scale_to_gross(eps, config.investment)
    return tickers, dollars, None


def run_backtest(panel: PricePanel, cmap: ClassificationMap, config: BacktestConfig) -> BacktestReport:
    days = []
    skipped = []
    universes = {}
    for formation, s in _trading_dates(panel, config):
        if formation not in universes:
            universes[formation] = _universe(panel, cmap, config, formation)
        members = universes[formation]
        if len(members) < 2:
            skipped.append((panel.dates[s], "universe has fewer than 2 classified tickers"))
            continue
        tickers, dollars, reason = holdings_for_date(panel, cmap, config, members, s)
        if dollars is None:
            logger.info("skipping %s: %s", panel.dates[s], reason)
            skipped.append((panel.dates[s], reason))
            continue
        idx = panel.ticker_index(tickers)
        o = panel.open[idx, s]
        c = panel.close[idx, s]
        days.append(DateResult(s, panel.dates[s], tickers, dollars, dollars * (c / o - 1.0),
                               2.0 * np.abs(dollars) / o))
    if not days:
        logger.warning("no tradable dates")
    return BacktestReport(config, tuple(days), tuple(skipped))


@dataclass(frozen=True)
class NormalizationComparison:
    raw: BacktestReport
    normalized: BacktestReport
    raw_stats: PerformanceStats | None = None
    normalized_stats: PerformanceStats | None = None
    notes: tuple[str, ...] = field(default=())

    def table(self):
        rows = ["metric,raw,normalized,diff"]
        if self.raw_stats is None or self.normalized_stats is None:
            return "\n".join(rows + [f"# {n}" for n in self.notes]) + "\n"
        for name in ("roc", "sharpe", "cps"):
            a = getattr(self.raw_stats, name)
            b = getattr(self.normalized_stats, name)
            rows.append(f"{name},{a!r},{b!r},{b - a!r}")
        return "\n".join(rows) + "\n"


def compare_normalization(panel, cmap, config: BacktestConfig) -> NormalizationComparison:
    raw = run_backtest(panel, cmap, replace(config, normalize=False))
    norm = run_backtest(panel, cmap, replace(config, normalize=True))
    try:
        return NormalizationComparison(raw, norm, performance_stats(raw), performance_stats(norm))
    except UndefinedStatisticError as exc:
        return NormalizationComparison(raw, norm, notes=(str(exc),))


def write_report(report: BacktestReport, out_dir):
    """Write ``daily_pnl.csv``, ``holdings.csv`` and ``summary.txt``; returns the summary text."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "daily_pnl.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "total_pnl", "cum_pnl"])
        cum = []
        for day in report.days:
            cum.append(day.total_pnl)
            w.writerow([day.date.isoformat(), repr(day.total_pnl), repr(math.fsum(cum))])
    with open(d / "holdings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "ticker", "holding", "pnl", "shares"])
        for day in report.days:
            ds = day.date.isoformat()
            for t, h, p, q in zip(day.tickers, day.holdings, day.pnl, day.shares):
                w.writerow([ds, t, repr(float(h)), repr(float(p)), repr(float(q))])
    text = summary_text(report)
    (d / "summary.txt").write_text(text)
    return text


def summary_text(report: BacktestReport) -> str:
    cfg = report.config
    lines = [
        f"level = {cfg.level}",
        f"normalize = {str(cfg.normalize).lower()}",
        f"investment = {cfg.investment!r}",
        f"traded_dates = {len(report.days)}",
        f"skipped_dates = {len(report.skipped)}",
    ]
    pnl = report.daily_pnl
    for name, fn in (
        ("ROC", lambda: f"{100 * return_on_capital(pnl, cfg.investment):.6f}%"),
        ("SR", lambda: f"{annualized_sharpe(pnl):.6f}"),
        ("CPS", lambda: f"{cents_per_share(math.fsum(pnl), math.fsum(report.daily_shares)):.6f}"),
    ):
        try:
            lines.append(f"{name} = {fn()}")
        except UndefinedStatisticError as exc:
            lines.append(f"{name} = undefined ({exc})")
    for d, reason in report.skipped:
        lines.append(f"skipped {d.isoformat()}: {reason}")
    return "\n".join(lines) + "\n"
