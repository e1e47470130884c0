"""Price panels, returns, liquidity, universes and synthetic data.

Date index convention: ``s = 0`` is the most recent date and ``s`` grows
into the past, so ``s + 1`` is the previous trading day. Every array in a
:class:`PricePanel` is shaped ``(n_tickers, n_dates)`` with that column
order. Missing observations are NaN; prices are never silently zero.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import date
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    DataRangeError,
    DuplicateRowError,
    InsufficientDataError,
    NotPositiveDefiniteError,
    ParseError,
    ValidationError,
)
from .regression import LoadingsMatrix

logger = logging.getLogger(__name__)

PRICE_HEADER = ("date", "ticker", "open", "close", "adj_open", "adj_close", "volume")
CLASS_HEADER = ("ticker", "sector", "industry", "subindustry")
LEVELS = ("sector", "industry", "subindustry")
MISSING = ("", "na", "nan", "null")


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PricePanel:
    tickers: tuple[str, ...]
    dates: tuple[date, ...]
    open: np.ndarray
    close: np.ndarray
    adj_open: np.ndarray
    adj_close: np.ndarray
    volume: np.ndarray

    def __post_init__(self):
        n, t = len(self.tickers), len(self.dates)
        if len(set(self.tickers)) != n:
            raise ValidationError("duplicate tickers in panel")
        if any(self.dates[k] <= self.dates[k + 1] for k in range(t - 1)):
            raise ValidationError("panel dates must be strictly decreasing in s (s=0 most recent)")
        for name in ("open", "close", "adj_open", "adj_close", "volume"):
            arr = _frozen(getattr(self, name))
            if arr.shape != (n, t):
                raise ValidationError(f"{name} has shape {arr.shape}, expected {(n, t)}")
            present = arr[~np.isnan(arr)]
            if name == "volume":
                if np.any(present < 0) or not np.all(np.isfinite(present)):
                    raise ValidationError("volume must be finite and nonnegative")
            elif np.any(present <= 0) or not np.all(np.isfinite(present)):
                raise ValidationError(f"{name} prices must be finite and strictly positive")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "tickers", tuple(self.tickers))
        object.__setattr__(self, "dates", tuple(self.dates))

    @property
    def n_tickers(self):
        return len(self.tickers)

    @property
    def n_dates(self):
        return len(self.dates)

    def ticker_index(self, tickers: Sequence[str] | None = None) -> np.ndarray:
        if tickers is None:
            return np.arange(self.n_tickers)
        lookup = {t: k for k, t in enumerate(self.tickers)}
        try:
            return np.array([lookup[t] for t in tickers], dtype=int)
        except KeyError as exc:
            raise ValidationError(f"ticker {exc.args[0]!r} not in panel") from None

    def observation_count(self):
        return int(np.sum(~np.isnan(self.close)))


@dataclass(frozen=True)
class CrossSection:
    """Per-ticker values at one date plus the tickers that had to be left out."""

    tickers: tuple[str, ...]
    values: np.ndarray
    excluded: tuple[str, ...] = ()

    def as_dict(self):
        return dict(zip(self.tickers, self.values.tolist()))


@dataclass(frozen=True)
class ClassificationMap:
    """ticker -> (sector, industry, subindustry)."""

    labels: Mapping[str, tuple[str, str, str]]

    def level(self, ticker, level):
        try:
            return self.labels[ticker][LEVELS.index(level)]
        except KeyError:
            raise ValidationError(f"ticker {ticker!r} is not classified") from None
        except ValueError:
            raise ValidationError(f"unknown classification level {level!r}") from None

    def __contains__(self, ticker):
        return ticker in self.labels


@dataclass(frozen=True)
class UniverseSnapshot:
    members: tuple[str, ...]
    formed_at: int | None = None
    dates: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.members:
            raise ValidationError("a universe must have at least one member")


# ---------------------------------------------------------------- loading


def _parse_float(text, path, line, column):
    if text.strip().lower() in MISSING:
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"column {column!r}: cannot parse {text!r} as a number", path, line) from None


def load_price_panel(path) -> PricePanel:
    """Read a ``date,ticker,open,close,adj_open,adj_close,volume`` CSV."""
    rows: dict[tuple[str, date], tuple[float, ...]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PRICE_HEADER:
            raise ParseError(f"expected header {','.join(PRICE_HEADER)}, got {header}", path, 1)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(PRICE_HEADER):
                raise ParseError(f"expected {len(PRICE_HEADER)} fields, got {len(row)}", path, line)
            try:
                d = date.fromisoformat(row[0].strip())
            except ValueError:
                raise ParseError(f"bad ISO-8601 date {row[0]!r}", path, line) from None
            ticker = row[1].strip()
            if not ticker:
                raise ParseError("empty ticker", path, line)
            vals = tuple(_parse_float(row[k], path, line, PRICE_HEADER[k]) for k in range(2, 7))
            for name, v in zip(PRICE_HEADER[2:6], vals[:4]):
                if not math.isnan(v) and not (v > 0 and math.isfinite(v)):
                    raise ValidationError(f"{path}:{line}: nonpositive {name} price {v!r} for {ticker}")
            if not math.isnan(vals[4]) and not (vals[4] >= 0 and math.isfinite(vals[4])):
                raise ValidationError(f"{path}:{line}: negative volume for {ticker}")
            key = (ticker, d)
            if key in rows:
                raise DuplicateRowError(f"duplicate row for ({ticker}, {d.isoformat()})", path, line)
            rows[key] = vals
    if not rows:
        raise ParseError("no data rows", path)
    tickers = sorted({k[0] for k in rows})
    dates = sorted({k[1] for k in rows}, reverse=True)
    ti = {t: i for i, t in enumerate(tickers)}
    di = {d: j for j, d in enumerate(dates)}
    data = np.full((5, len(tickers), len(dates)), np.nan)
    for (t, d), vals in rows.items():
        data[:, ti[t], di[d]] = vals
    return PricePanel(tuple(tickers), tuple(dates), *data)


def write_price_panel(panel: PricePanel, path):
    """Write a panel in the CSV schema read by :func:`load_price_panel`."""
    fields = (panel.open, panel.close, panel.adj_open, panel.adj_close, panel.volume)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRICE_HEADER)
        for j in range(panel.n_dates - 1, -1, -1):
            d = panel.dates[j].isoformat()
            for i, t in enumerate(panel.tickers):
                if all(np.isnan(f[i, j]) for f in fields):
                    continue
                w.writerow([d, t] + ["" if np.isnan(f[i, j]) else repr(float(f[i, j])) for f in fields])


def load_classification(path) -> ClassificationMap:
    labels = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CLASS_HEADER:
            raise ParseError(f"expected header {','.join(CLASS_HEADER)}, got {header}", path, 1)
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4 or any(not c.strip() for c in row):
                raise ParseError("expected 4 non-empty fields", path, reader.line_num)
            ticker = row[0].strip()
            if ticker in labels:
                raise DuplicateRowError(f"ticker {ticker} classified twice", path, reader.line_num)
            labels[ticker] = tuple(c.strip() for c in row[1:])
    return ClassificationMap(labels)


def write_classification(cmap: ClassificationMap, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CLASS_HEADER)
        for t in sorted(cmap.labels):
            w.writerow([t, *cmap.labels[t]])


# ---------------------------------------------------------------- returns & liquidity


def _check_date(panel, s, need):
    if s < 0 or s + need >= panel.n_dates:
        raise DataRangeError(f"date index {s} needs {need} older date(s); panel has {panel.n_dates}")


def _cross_section(panel, tickers, values):
    idx = panel.ticker_index(tickers)
    names = [panel.tickers[i] for i in idx]
    v = values[idx]
    ok = np.isfinite(v)
    excluded = tuple(n for n, good in zip(names, ok) if not good)
    if excluded:
        logger.debug("excluded %d ticker(s) with missing inputs", len(excluded))
    return CrossSection(tuple(n for n, good in zip(names, ok) if good), v[ok], excluded)


def overnight_returns(panel: PricePanel, s: int, tickers=None) -> CrossSection:
    """Close-to-next-open log return ``ln(adj_open[s] / adj_close[s+1])``."""
    _check_date(panel, s, 1)
    with np.errstate(invalid="ignore"):
        values = np.log(panel.adj_open[:, s] / panel.adj_close[:, s + 1])
    return _cross_section(panel, tickers, values)


def intraday_returns(panel: PricePanel, s: int, tickers=None) -> CrossSection:
    """Open-to-close simple return on unadjusted prices."""
    _check_date(panel, s, 0)
    return _cross_section(panel, tickers, panel.close[:, s] / panel.open[:, s] - 1.0)


def addv(panel: PricePanel, s: int, d: int, tickers=None) -> CrossSection:
    """Average daily dollar volume over the ``d`` dates preceding ``s``."""
    if d < 1:
        raise ValidationError("ADDV lookback must be at least 1 day")
    _check_date(panel, s, d)
    window = slice(s + 1, s + d + 1)
    # any missing volume or close in the window propagates NaN and excludes the ticker
    values = (panel.volume[:, window] * panel.close[:, window]).sum(axis=1) / d
    return _cross_section(panel, tickers, values)


def select_universe(liquidity, top_n: int, formed_at=None) -> UniverseSnapshot:
    """Top ``top_n`` tickers by liquidity; ties broken by ticker string."""
    if top_n < 1:
        raise ValidationError("top_n must be at least 1")
    if isinstance(liquidity, CrossSection):
        items = list(zip(liquidity.tickers, liquidity.values.tolist()))
    else:
        items = list(dict(liquidity).items())
    if not items:
        raise ValidationError("empty liquidity vector")
    items.sort(key=lambda kv: (-kv[1], kv[0]))
    return UniverseSnapshot(tuple(t for t, _ in items[:top_n]), formed_at)


@dataclass(frozen=True)
class RebalanceInterval:
    """Trading dates of one interval (oldest first) and its universe-formation date."""

    dates: tuple[int, ...]
    formation: int
    partial: bool = False


def rebalance_schedule(num_dates: int, period: int, lookback: int = 0) -> list[RebalanceInterval]:
    """Split the tradable dates into consecutive ``period``-length intervals.

    The oldest ``lookback`` dates of the panel only feed history. Each
    interval's universe is formed at its oldest date from the data strictly
    before it. A short trailing interval keeps the previous interval's
    universe.
    """
    if period < 1:
        raise ValidationError("rebalance period must be at least 1")
    if lookback < 0:
        raise ValidationError("lookback must be nonnegative")
    if num_dates < period + lookback:
        raise InsufficientDataError(
            f"{num_dates} dates cannot cover one {period}-day interval plus {lookback} lookback days"
        )
    tradable = list(range(num_dates - 1 - lookback, -1, -1))
    intervals = []
    for start in range(0, len(tradable), period):
        chunk = tuple(tradable[start : start + period])
        if len(chunk) == period:
            intervals.append(RebalanceInterval(chunk, chunk[0]))
        else:
            intervals.append(RebalanceInterval(chunk, intervals[-1].formation, partial=True))
    return intervals


def loadings_from_classification(cmap: ClassificationMap, universe, level: str) -> LoadingsMatrix:
    """Binary cluster loadings for ``universe`` at ``level``; empty clusters are dropped."""
    if level not in LEVELS:
        raise ValidationError(f"unknown classification level {level!r}; expected one of {LEVELS}")
    members = universe.members if isinstance(universe, UniverseSnapshot) else tuple(universe)
    labels = [cmap.level(t, level) for t in members]
    clusters = sorted(set(labels))
    col = {c: k for k, c in enumerate(clusters)}
    values = np.zeros((len(members), len(clusters)))
    values[np.arange(len(members)), [col[c] for c in labels]] = 1.0
    return LoadingsMatrix(values, tuple(clusters), members)


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the factor generative process for a synthetic panel.

    Daily log returns are ``chi + Omega_raw f`` with ``chi ~ N(0, diag(xi^2))``
    and ``f ~ N(0, Phi)``, drawn independently for the overnight and the
    intraday leg with variance shares ``overnight_fraction`` and its
    complement, so close-to-close log returns have covariance
    ``diag(xi^2) + Omega_raw Phi Omega_raw'``.

    ``reversion`` adds ``-reversion * chi_overnight`` to the intraday leg
    (an intraday mean-reversion effect). ``outlier_prob`` and
    ``outlier_scale`` inject non-reverting overnight jumps of size
    ``outlier_scale * xi_i * N(0, 1)``. Both default to off.
    """

    xi: np.ndarray
    loadings: np.ndarray
    factor_cov: np.ndarray
    n_dates: int
    seed: int = 0
    base_price: float = 50.0
    tickers: tuple[str, ...] | None = None
    overnight_fraction: float = 0.25
    reversion: float = 0.0
    outlier_prob: float = 0.0
    outlier_scale: float = 0.0
    mean_volume: float = 1e6
    start: date = date(2012, 1, 2)
    classification: ClassificationMap | None = field(default=None, compare=False)

    def __post_init__(self):
        xi = np.atleast_1d(np.asarray(self.xi, dtype=float))
        n = xi.size
        omega = np.asarray(self.loadings, dtype=float)
        omega = omega.reshape(n, -1) if omega.size else np.zeros((n, 0))
        k = omega.shape[1]
        phi = np.asarray(self.factor_cov, dtype=float)
        phi = phi.reshape(k, k) if k else np.zeros((0, 0))
        if np.any(xi <= 0) or not np.all(np.isfinite(xi)):
            raise ValidationError("specific risks must be strictly positive")
        if not np.allclose(phi, phi.T, rtol=0, atol=0):
            raise ValidationError("factor covariance must be symmetric")
        if k:
            try:
                np.linalg.cholesky(phi)
            except np.linalg.LinAlgError:
                raise NotPositiveDefiniteError("factor covariance is not positive-definite") from None
        if self.n_dates < 2:
            raise ValidationError("synthetic panel needs at least 2 dates")
        if not 0 < self.overnight_fraction < 1:
            raise ValidationError("overnight_fraction must lie in (0, 1)")
        tickers = tuple(self.tickers) if self.tickers is not None else tuple(f"T{i:04d}" for i in range(n))
        if len(tickers) != n:
            raise ValidationError("ticker labels do not match xi")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "loadings", omega)
        object.__setattr__(self, "factor_cov", phi)
        object.__setattr__(self, "tickers", tickers)

    @property
    def theta(self):
        return np.diag(self.xi**2) + self.loadings @ self.factor_cov @ self.loadings.T


def _business_days(start: date, n: int):
    days = np.busday_offset(np.datetime64(start, "D"), np.arange(n), roll="forward")
    return [d.item() for d in days]


def generate_synthetic_panel(spec: SyntheticSpec) -> PricePanel:
    """Deterministic synthetic panel drawn from the factor generative process."""
    rng = np.random.default_rng(spec.seed)
    n, k = spec.loadings.shape
    t = spec.n_dates
    phi_chol = np.linalg.cholesky(spec.factor_cov) if k else np.zeros((0, 0))

    def leg(share):
        chi = rng.standard_normal((t, n)) * spec.xi * math.sqrt(share)
        f = rng.standard_normal((t, k)) @ phi_chol.T * math.sqrt(share)
        return chi, chi + f @ spec.loadings.T

    chi_on, on = leg(spec.overnight_fraction)
    _, intra = leg(1.0 - spec.overnight_fraction)
    if spec.reversion:
        intra = intra - spec.reversion * chi_on
    if spec.outlier_prob > 0:
        hit = rng.random((t, n)) < spec.outlier_prob
        jumps = rng.standard_normal((t, n)) * spec.xi * spec.outlier_scale
        on = on + np.where(hit, jumps, 0.0)
    log_level = rng.standard_normal(n) * 0.5
    volume = np.round(
        spec.mean_volume * np.exp(log_level + 0.25 * rng.standard_normal((t, n)))
    )

    # chronological: close[-1] = base, open_t = close_{t-1} e^on_t, close_t = open_t e^intra_t
    log_close = math.log(spec.base_price) + np.cumsum(on + intra, axis=0)
    log_prev_close = np.vstack([np.full((1, n), math.log(spec.base_price)), log_close[:-1]])
    open_ = np.exp(log_prev_close + on)
    close = np.exp(log_close)

    dates = _business_days(spec.start, t)[::-1]
    # reverse time so that column 0 is the most recent date
    o, c, v = open_[::-1].T, close[::-1].T, volume[::-1].T
    return PricePanel(spec.tickers, tuple(dates), o, c, o, c, v)


def cluster_synthetic_spec(
    n_tickers: int,
    n_clusters: int,
    n_dates: int,
    seed: int = 0,
    *,
    market_vol: float = 0.01,
    cluster_vol: float = 0.008,
    xi_range: tuple[float, float] = (0.01, 0.03),
    **kwargs,
) -> SyntheticSpec:
    """A market-plus-clusters synthetic spec with a matching classification map.

    Loadings are one market column (all ones) plus one binary column per
    cluster; tickers are dealt round-robin into clusters so every cluster is
    populated. Sectors, industries and sub-industries nest 1:1 here.
    """
    if n_clusters < 1 or n_tickers < n_clusters:
        raise ValidationError("need at least one ticker per cluster")
    rng = np.random.default_rng([seed, 7919])
    tickers = tuple(f"T{i:04d}" for i in range(n_tickers))
    group = np.arange(n_tickers) % n_clusters
    omega = np.zeros((n_tickers, n_clusters + 1))
    omega[:, 0] = 1.0
    omega[np.arange(n_tickers), group + 1] = 1.0
    phi = np.diag([market_vol**2] + [cluster_vol**2] * n_clusters)
    xi = rng.uniform(*xi_range, size=n_tickers)
    labels = {
        t: (f"S{g:02d}", f"I{g:02d}", f"U{g:02d}") for t, g in zip(tickers, group.tolist())
    }
    return SyntheticSpec(
        xi, omega, phi, n_dates, seed, tickers=tickers, classification=ClassificationMap(labels), **kwargs
    )
