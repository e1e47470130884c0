"""Cross-sectional regression and the holdings built from it.

A cross-sectional regression of returns ``R`` over a loadings matrix
``Omega`` with positive weights ``z`` yields residuals

    eps = R - Omega (Omega' Z Omega)^-1 Omega' Z R

and regressed returns ``R_tilde = Z eps``, which are orthogonal to every
loadings column. Unit weights over binary cluster loadings reduce to
per-cluster demeaning. Desired dollar holdings are a (possibly nonlinear)
contrarian function of the regressed returns scaled to a fixed gross
investment level.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg, stats

from .errors import NoSignalError, RankDeficiencyError, ValidationError

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10

SHAPING_KINDS = ("linear", "sign", "tanh", "rank", "power", "custom")


@dataclass(frozen=True)
class LoadingsMatrix:
    """N x K risk-factor exposures with column labels.

    Binary columns encode cluster membership; general columns are style or
    statistical factors. ``rows`` optionally carries the ticker labels.
    """

    values: np.ndarray
    columns: tuple[str, ...] = ()
    rows: tuple[str, ...] | None = None
    binary: tuple[bool, ...] = field(init=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise ValidationError("loadings must be a 2-D array")
        if not np.all(np.isfinite(values)):
            raise ValidationError("loadings contain non-finite entries")
        n, k = values.shape
        columns = tuple(self.columns) if self.columns else tuple(f"f{j}" for j in range(k))
        if len(columns) != k:
            raise ValidationError(f"{len(columns)} column labels for {k} columns")
        if self.rows is not None and len(self.rows) != n:
            raise ValidationError(f"{len(self.rows)} row labels for {n} rows")
        zero = [columns[j] for j in range(k) if not np.any(values[:, j])]
        if zero:
            raise ValidationError(f"all-zero loadings columns: {', '.join(zero)}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "columns", columns)
        object.__setattr__(self, "rows", tuple(self.rows) if self.rows is not None else None)
        object.__setattr__(
            self, "binary", tuple(bool(np.all((values[:, j] == 0) | (values[:, j] == 1))) for j in range(k))
        )

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def intercept(cls, n, rows=None):
        return cls(np.ones((n, 1)), ("intercept",), rows)


def as_loadings(obj) -> LoadingsMatrix:
    if isinstance(obj, LoadingsMatrix):
        return obj
    return LoadingsMatrix(np.asarray(obj, dtype=float))


@dataclass(frozen=True)
class RegressionResult:
    coefficients: np.ndarray
    residuals: np.ndarray
    regressed: np.ndarray
    weights: np.ndarray
    columns: tuple[str, ...]
    dropped: tuple[str, ...] = ()


def _is_spanned(target, basis, weights=None):
    """Whether ``target`` lies in the column span of ``basis`` (relative tol)."""
    if basis.shape[1] == 0:
        return False
    sw = np.ones(len(target)) if weights is None else np.sqrt(weights)
    coef, *_ = np.linalg.lstsq(basis * sw[:, None], target * sw, rcond=None)
    resid = (target - basis @ coef) * sw
    return np.linalg.norm(resid) <= RANK_TOL * max(np.linalg.norm(target * sw), 1e-300)


def dependent_columns(matrix, tol=RANK_TOL):
    """Indices of columns that are linear combinations of columns to their left.

    Scanning left to right keeps the leftmost independent set, so the
    rightmost members of any dependent group are the ones reported.
    """
    matrix = np.asarray(matrix, dtype=float)
    k = matrix.shape[1]
    if k == 0:
        return []
    _, r, _ = linalg.qr(matrix, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    scale = diag[0] if diag.size else 0.0
    rank = int(np.sum(diag > tol * scale)) if scale > 0 else 0
    if rank == k:
        return []
    kept: list[int] = []
    dependent = []
    for j in range(k):
        trial = matrix[:, kept + [j]]
        _, rr = linalg.qr(trial, mode="economic")
        d = np.abs(np.diag(rr))
        if d[-1] > tol * max(d.max(), 1e-300):
            kept.append(j)
        else:
            dependent.append(j)
    return dependent


def cross_sectional_regression(
    returns,
    loadings,
    weights=None,
    with_intercept: bool = False,
    drop_dependent: bool = False,
) -> RegressionResult:
    """Weighted cross-sectional regression of ``returns`` over ``loadings``.

    With ``with_intercept`` a unit column is appended unless the existing
    columns already span it. Rank-deficient loadings raise
    :class:`RankDeficiencyError` unless ``drop_dependent`` is set, in which
    case dependent columns are removed (rightmost first) and reported in
    ``RegressionResult.dropped``.
    """
    R = np.asarray(returns, dtype=float)
    lm = as_loadings(loadings)
    omega = np.array(lm.values)
    columns = list(lm.columns)
    n = R.shape[0]
    if R.ndim != 1 or omega.shape[0] != n:
        raise ValidationError(f"returns of length {R.shape} do not match loadings {omega.shape}")
    if not np.all(np.isfinite(R)):
        raise ValidationError("returns contain non-finite entries")
    z = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if z.shape != (n,) or not np.all(np.isfinite(z)) or np.any(z <= 0):
        raise ValidationError("regression weights must be finite and strictly positive")

    if with_intercept and not _is_spanned(np.ones(n), omega):
        omega = np.column_stack([omega, np.ones(n)])
        columns.append("intercept")

    sw = np.sqrt(z)
    a = omega * sw[:, None]
    dropped: list[str] = []
    if omega.shape[1] > n:
        raise RankDeficiencyError(f"{omega.shape[1]} loadings columns exceed {n} observations")
    dep = dependent_columns(a)
    if dep:
        names = [columns[j] for j in dep]
        if not drop_dependent:
            raise RankDeficiencyError("regression loadings are rank-deficient", names)
        logger.info("dropping dependent loadings columns: %s", names)
        keep = [j for j in range(omega.shape[1]) if j not in dep]
        omega, a = omega[:, keep], a[:, keep]
        columns = [columns[j] for j in keep]
        dropped = names

    b = R * sw
    if omega.shape[1] == 0:
        coef = np.zeros(0)
        r = b
    else:
        q, rr = linalg.qr(a, mode="economic")
        qtb = q.T @ b
        coef = linalg.solve_triangular(rr, qtb)
        # Projecting through Q keeps the residual orthogonal to machine precision.
        r = b - q @ qtb
    eps = r / sw
    regressed = r * sw
    return RegressionResult(coef, eps, regressed, z, tuple(columns), tuple(dropped))


def demean_by_cluster(returns, loadings) -> np.ndarray:
    """Subtract from each return the mean of its cluster."""
    R = np.asarray(returns, dtype=float)
    lm = as_loadings(loadings)
    lam = lm.values
    if not all(lm.binary):
        raise ValidationError("demean_by_cluster requires binary loadings")
    if not np.all(lam.sum(axis=1) == 1):
        raise ValidationError("each row of a cluster loadings matrix must sum to 1")
    if lam.shape[0] != R.shape[0]:
        raise ValidationError("returns and loadings disagree on N")
    group = np.argmax(lam, axis=1)
    sums = np.bincount(group, weights=R, minlength=lam.shape[1])
    counts = np.bincount(group, minlength=lam.shape[1])
    return R - (sums / counts)[group]


@dataclass(frozen=True)
class StrategyShaping:
    """How regressed returns map to dollar holdings.

    ``kappa`` applies to the tanh kind only; when omitted it is the
    cross-sectional standard deviation of the regressed returns, recomputed
    for every cross-section. ``func`` is the user function for the custom
    kind, giving ``D_i = -gamma * R_i * func(R_i)``.
    """

    kind: str = "linear"
    investment: float = 1.0
    kappa: float | None = None
    func: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.kind not in SHAPING_KINDS:
            raise ValidationError(f"unknown shaping kind {self.kind!r}; expected one of {SHAPING_KINDS}")
        if not (self.investment > 0 and math.isfinite(self.investment)):
            raise ValidationError("investment level must be positive")
        if self.kappa is not None and not self.kappa > 0:
            raise ValidationError("kappa must be positive")
        if self.kind == "custom" and self.func is None:
            raise ValidationError("custom shaping needs func")


@dataclass(frozen=True)
class Holdings:
    dollars: np.ndarray
    gamma: float
    mishedge: float
    kappa: float | None = None


def _rank_by_magnitude(x):
    # stable sort: ties keep input (ticker) order
    order = np.argsort(np.abs(x), kind="stable")
    ranks = np.empty(len(x))
    ranks[order] = np.arange(1, len(x) + 1)
    return ranks


def match_gross(values, target):
    """Adjust the largest entry in place so that ``fsum(|values|) == target``."""
    k = int(np.argmax(np.abs(values)))
    up = 1.0 if values[k] > 0 else -1.0
    for _ in range(8):
        excess = target - math.fsum(np.abs(values))
        if excess == 0.0:
            return values
        values[k] += up * excess
    # the residual is below the resolution of the largest entry: walk entries one ulp at a time,
    # moving to a smaller entry (finer grid) when the larger one keeps stepping over the target
    for j in np.argsort(-np.abs(values), kind="stable")[:8]:
        sign = 1.0 if values[j] > 0 else -1.0
        for _ in range(4):
            excess = target - math.fsum(np.abs(values))
            if excess == 0.0:
                return values
            values[j] = np.nextafter(values[j], sign * np.inf if excess > 0 else -sign * np.inf)
    return values


def scale_to_gross(signal, investment):
    """Return ``(-gamma * signal, gamma)`` with sum |D| equal to ``investment``."""
    gross = math.fsum(np.abs(signal))
    gamma = investment / gross
    dollars = match_gross(-gamma * np.asarray(signal, dtype=float), investment)
    return dollars, gamma


def holdings_from_residuals(regressed, shaping: StrategyShaping) -> Holdings:
    """Contrarian dollar holdings: short positive regressed returns, buy negative."""
    x = np.asarray(regressed, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValidationError("regressed returns must be a non-empty vector")
    if not np.any(x):
        raise NoSignalError("all regressed returns are zero")
    kappa = None
    kind = shaping.kind
    if kind == "linear":
        signal = x
    elif kind == "sign":
        signal = np.sign(x)
    elif kind == "tanh":
        kappa = shaping.kappa if shaping.kappa is not None else float(np.std(x))
        signal = np.tanh(x / kappa)
        logger.info("tanh shaping kappa=%r", kappa)
    elif kind == "power":
        signal = x * np.abs(x)
    elif kind == "rank":
        signal = np.sign(x) * _rank_by_magnitude(x)
    else:
        signal = x * np.asarray(shaping.func(x), dtype=float)
    if not np.any(signal):
        raise NoSignalError("shaped signal vanishes identically")
    dollars, gamma = scale_to_gross(signal, shaping.investment)
    return Holdings(dollars, gamma, math.fsum(dollars), kappa)


def normalize_residuals(values) -> np.ndarray:
    """Conform a cross-section to a normal distribution with its own mean and stdev.

    Values are replaced by standard-normal quantiles at ``(rank - 0.5) / N``,
    standardized and rescaled to the input's mean and standard deviation.
    Order is preserved; outliers are pulled in.
    """
    x = np.asarray(values, dtype=float)
    n = x.size
    if n < 3:
        raise ValidationError("normalize_residuals needs at least 3 values")
    if np.all(x == x[0]):
        raise ValidationError("cannot normalize a constant cross-section")
    ranks = stats.rankdata(x, method="average")
    q = stats.norm.ppf((ranks - 0.5) / n)
    q = (q - q.mean()) / q.std()
    mean, sd = x.mean(), x.std()
    out = mean + sd * q
    return out - (out.mean() - mean)


def regress_and_hold(returns, loadings, shaping: StrategyShaping, weights=None, with_intercept=False):
    """Convenience: regression followed by holdings on the regressed returns."""
    res = cross_sectional_regression(returns, loadings, weights, with_intercept)
    return res, holdings_from_residuals(res.regressed, shaping)
