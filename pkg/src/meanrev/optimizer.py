"""Cost-free Sharpe-ratio maximization with homogeneous linear constraints.

Because the Sharpe ratio is invariant under ``w -> c w`` for ``c > 0``, the
maximization is solved as the minimization of
``lam/2 w'Cw - R'w - mu'Y'w`` at ``lam = 1`` and the direction is then
rescaled so that ``sum |w| = 1``; the rescale factor is the ``lam`` that
would have produced normalized weights directly.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import NotPositiveDefiniteError, RankDeficiencyError, ValidationError
from .factor_model import FactorModel, build_theta
from .regression import _is_spanned, dependent_columns, match_gross

logger = logging.getLogger(__name__)

ORTHO_TOL = 1e-10


@dataclass(frozen=True)
class ConstraintMatrix:
    """N x m matrix ``Y`` of homogeneous constraints ``Y'w = 0``."""

    values: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        y = np.array(self.values, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if y.ndim != 2 or not np.all(np.isfinite(y)):
            raise ValidationError("constraint matrix must be a finite 2-D array")
        labels = tuple(self.labels) if self.labels else tuple(f"c{a}" for a in range(y.shape[1]))
        if len(labels) != y.shape[1]:
            raise ValidationError("constraint labels do not match columns")
        if y.shape[1] > y.shape[0]:
            raise RankDeficiencyError(f"{y.shape[1]} constraints on {y.shape[0]} assets")
        dep = dependent_columns(y)
        if dep:
            raise RankDeficiencyError("constraint matrix is not of full column rank", [labels[j] for j in dep])
        y.setflags(write=False)
        object.__setattr__(self, "values", y)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def intercept(cls, n):
        return cls(np.ones((n, 1)), ("intercept",))

    @classmethod
    def empty(cls, n):
        return cls(np.zeros((n, 0)))

    @property
    def m(self):
        return self.values.shape[1]

    @property
    def has_intercept(self):
        return _is_spanned(np.ones(self.values.shape[0]), self.values)


def as_constraint_array(y, n) -> np.ndarray:
    if y is None:
        return np.zeros((n, 0))
    if isinstance(y, ConstraintMatrix):
        arr = y.values
    else:
        arr = ConstraintMatrix(y).values
    if arr.shape[0] != n:
        raise ValidationError(f"constraint matrix has {arr.shape[0]} rows, expected {n}")
    return np.asarray(arr)


@dataclass(frozen=True)
class HoldingWeights:
    """Normalized weights (``sum |w| = 1``), the implied ``lam`` and multipliers."""

    weights: np.ndarray
    lam: float
    mu: np.ndarray

    def dollars(self, investment):
        return investment * self.weights


def normalize_gross(direction):
    """Scale ``direction`` to unit gross exposure; returns ``(w, lam)``."""
    d = np.asarray(direction, dtype=float)
    lam = math.fsum(np.abs(d))
    if not lam > 0:
        raise ValidationError("optimal direction vanishes; expected returns carry no signal")
    return match_gross(d / lam, 1.0), lam


def _cov_matvec(cov, w):
    if isinstance(cov, FactorModel):
        return cov.theta_matvec(w)
    return np.asarray(cov) @ w


def portfolio_sharpe(weights, cov, returns, costs=None, current=None) -> float:
    """``(R'w - sum L|w - w*|) / sqrt(w'Cw)``; ``cov`` may be a FactorModel."""
    w = np.asarray(weights, dtype=float)
    pnl = float(np.dot(returns, w))
    if costs is not None:
        ws = np.zeros_like(w) if current is None else np.asarray(current, dtype=float)
        pnl -= float(np.dot(costs, np.abs(w - ws)))
    var = float(w @ _cov_matvec(cov, w))
    if not var > 0:
        raise ValidationError("portfolio variance is zero; Sharpe ratio undefined")
    return pnl / math.sqrt(var)


def _cho(c):
    c = np.asarray(c, dtype=float)
    try:
        return linalg.cho_factor(c)
    except linalg.LinAlgError:
        raise NotPositiveDefiniteError("covariance matrix is singular or not positive-definite") from None


def max_sharpe_unconstrained(cov, returns) -> HoldingWeights:
    """``w proportional to C^-1 R``."""
    R = np.asarray(returns, dtype=float)
    direction = linalg.cho_solve(_cho(cov), R)
    w, lam = normalize_gross(direction)
    return HoldingWeights(w, lam, np.zeros(0))


def _constrained_direction(cov, R, Y):
    cf = _cho(cov)
    cir = linalg.cho_solve(cf, R)
    ciy = linalg.cho_solve(cf, Y)
    try:
        af = linalg.cho_factor(Y.T @ ciy)
    except linalg.LinAlgError:
        raise RankDeficiencyError("degenerate constraints: Y' C^-1 Y is singular") from None
    mu = -linalg.cho_solve(af, Y.T @ cir)
    return cir + ciy @ mu, mu


def bordered_direction(cov, returns, constraints):
    """Solve the enlarged system ``[[C, Y], [Y', 0]] (d, -mu) = (R, 0)``."""
    R = np.asarray(returns, dtype=float)
    C = np.asarray(cov, dtype=float)
    Y = as_constraint_array(constraints, R.size)
    n, m = Y.shape
    gamma = np.block([[C, Y], [Y.T, np.zeros((m, m))]])
    rhs = np.concatenate([R, np.zeros(m)])
    try:
        omega = linalg.solve(gamma, rhs, assume_a="sym")
    except linalg.LinAlgError:
        raise RankDeficiencyError("bordered covariance matrix is singular") from None
    return omega[:n], -omega[n:]


def max_sharpe_constrained(cov, returns, constraints, method="direct") -> HoldingWeights:
    """Sharpe maximization subject to ``Y'w = 0``.

    ``method="bordered"`` solves the enlarged (N + m) system instead of the
    explicit projection formula; both give the same weights.
    """
    R = np.asarray(returns, dtype=float)
    Y = as_constraint_array(constraints, R.size)
    if Y.shape[1] == 0:
        return max_sharpe_unconstrained(cov, R)
    if method == "direct":
        direction, mu = _constrained_direction(cov, R, Y)
    elif method == "bordered":
        _cho(cov)
        direction, mu = bordered_direction(cov, R, Y)
    else:
        raise ValidationError(f"unknown method {method!r}")
    w, lam = normalize_gross(direction)
    return HoldingWeights(w, lam, mu)


def factor_direction(fm: FactorModel, returns, constraints):
    """Unnormalized optimum (``lam = 1``) under a factor model; returns ``(d, mu)``.

    Uses the (K + m) system ``Q = phi + Omega_hat' Xi^-1 Omega_hat`` where
    ``Omega_hat = [Y, Omega]`` and ``phi`` is the identity on the factor
    block and zero on the constraint block.
    """
    R = np.asarray(returns, dtype=float)
    Y = as_constraint_array(constraints, fm.n)
    m = Y.shape[1]
    z = 1.0 / fm.specific_var
    oh = np.column_stack([Y, fm.loadings])
    phi = np.diag(np.r_[np.zeros(m), np.ones(fm.k)])
    qh = phi + oh.T @ (oh * z[:, None])
    try:
        c = linalg.solve(qh, oh.T @ (z * R), assume_a="pos")
    except linalg.LinAlgError:
        dep = dependent_columns(Y)
        raise RankDeficiencyError("factor-constrained system is singular", [f"c{j}" for j in dep]) from None
    return z * (R - oh @ c), -c[:m]


def max_sharpe_factor_constrained(fm: FactorModel, returns, constraints) -> HoldingWeights:
    direction, mu = factor_direction(fm, returns, constraints)
    w, lam = normalize_gross(direction)
    return HoldingWeights(w, lam, mu)


@dataclass(frozen=True)
class ReducedConstraints:
    """Split of the constraints relative to the factor loadings.

    ``orthogonal`` spans the constraints that are ``Xi^-1``-orthogonal to all
    loadings; ``remaining`` spans the rest (rotated to be ``Xi^-1``-orthogonal
    to ``orthogonal``). ``loadings`` are the factor loadings with directions
    lying in the span of ``remaining`` removed; ``dropped_factors`` names
    loadings columns removed outright.
    """

    orthogonal: np.ndarray
    remaining: np.ndarray
    loadings: np.ndarray
    specific_var: np.ndarray
    dropped_factors: tuple[int, ...] = ()
    rotated: bool = False

    def residualize(self, returns):
        """Residuals of the ``1/xi^2``-weighted regression over ``orthogonal``."""
        R = np.asarray(returns, dtype=float)
        y = self.orthogonal
        if y.shape[1] == 0:
            return R.copy()
        z = 1.0 / self.specific_var
        coef = linalg.solve(y.T @ (y * z[:, None]), y.T @ (z * R), assume_a="pos")
        return R - y @ coef


def _null_split(m_mat, scale):
    """Row-space and null-space bases of ``m_mat`` (columns) at relative tolerance."""
    _, s, vt = np.linalg.svd(m_mat)
    r = int(np.sum(s > ORTHO_TOL * scale)) if s.size else 0
    return vt[:r].T, vt[r:].T


def reduce_constraints(fm: FactorModel, constraints) -> ReducedConstraints:
    """Separate loadings-orthogonal constraints and prune constraint-spanned factors."""
    Y = as_constraint_array(constraints, fm.n)
    om = fm.loadings
    m, k = Y.shape[1], om.shape[1]
    var = fm.specific_var
    z = 1.0 / var
    sz = np.sqrt(z)
    if k == 0 or m == 0:
        y_orth, y_rest = Y, np.zeros((fm.n, 0))
    else:
        cross = om.T @ (Y * z[:, None])
        scale = np.linalg.norm(om * sz[:, None], 2) * np.linalg.norm(Y * sz[:, None], 2)
        row, null = _null_split(cross, scale)
        if null.shape[1] == 0:
            y_orth, y_rest = np.zeros((fm.n, 0)), Y
        elif row.shape[1] == 0:
            y_orth, y_rest = Y, np.zeros((fm.n, 0))
        else:
            y_orth = Y @ null
            raw = Y @ row
            g = y_orth.T @ (y_orth * z[:, None])
            y_rest = raw - y_orth @ linalg.solve(g, y_orth.T @ (raw * z[:, None]), assume_a="pos")
    rotated = 0 < y_orth.shape[1] < m

    # factor columns lying in span(remaining) contribute nothing on the feasible set
    dropped = tuple(a for a in range(k) if y_rest.shape[1] and _is_spanned(om[:, a], y_rest))
    keep = [a for a in range(k) if a not in dropped]
    reduced = om[:, keep]
    if y_rest.shape[1] and reduced.shape[1]:
        q, _ = np.linalg.qr(y_rest)
        outside = reduced - q @ (q.T @ reduced)
        row, null = _null_split(outside, np.linalg.norm(reduced, 2))
        if null.shape[1]:
            # rotate so that the constraint-spanned combinations can be discarded
            reduced = reduced @ row
            rotated = True
    return ReducedConstraints(y_orth, y_rest, reduced, var, dropped, rotated)


def max_sharpe_reduced(fm: FactorModel, returns, constraints) -> HoldingWeights:
    """Same optimum as :func:`max_sharpe_factor_constrained`, via the reduced problem.

    Optimizes the residuals of the regression over the loadings-orthogonal
    constraints using the pruned factor model, subject only to the
    remaining constraints.
    """
    red = reduce_constraints(fm, constraints)
    eps = red.residualize(returns)
    reduced_fm = FactorModel.from_rotated(fm.xi, red.loadings)
    rest = red.remaining
    direction, _ = factor_direction(reduced_fm, eps, rest if rest.shape[1] else None)
    w, lam = normalize_gross(direction)
    # multipliers of the full problem from the optimality condition lam C w - R = Y mu
    Y = as_constraint_array(constraints, fm.n)
    mu = np.zeros(0)
    if Y.shape[1]:
        mu, *_ = np.linalg.lstsq(Y, lam * fm.theta_matvec(w) - np.asarray(returns, dtype=float), rcond=None)
    return HoldingWeights(w, lam, mu)


def two_asset_closed_form(sigma_a, sigma_b, rho, r_a, r_b, investment=1.0):
    """Dollar holdings maximizing the two-asset Sharpe ratio with ``|D_A| + |D_B| = I``."""
    if not (sigma_a > 0 and sigma_b > 0):
        raise ValidationError("volatilities must be positive")
    if not abs(rho) < 1:
        raise ValidationError("|rho| must be < 1; perfectly correlated assets are degenerate")
    if not investment > 0:
        raise ValidationError("investment must be positive")
    da = r_a / sigma_a**2 - rho * r_b / (sigma_a * sigma_b)
    db = r_b / sigma_b**2 - rho * r_a / (sigma_a * sigma_b)
    gross = abs(da) + abs(db)
    if gross == 0:
        raise ValidationError("zero expected returns: no preferred portfolio")
    gamma = investment / gross
    return gamma * da, gamma * db


def two_asset_sharpe(da, db, sigma_a, sigma_b, rho, r_a, r_b):
    vol = math.sqrt((sigma_a * da) ** 2 + (sigma_b * db) ** 2 + 2 * rho * sigma_a * da * sigma_b * db)
    return (da * r_a + db * r_b) / vol


def dense_theta(fm: FactorModel):
    return build_theta(fm)


def write_weights(hw: HoldingWeights, tickers, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ticker", "weight"])
        w.writerows([t, repr(float(x))] for t, x in zip(tickers, hw.weights))


def weights_report(hw: HoldingWeights, constraints=None) -> str:
    """Key-value summary: lam, multipliers and scaled constraint residuals."""
    lines = [f"lambda = {hw.lam!r}", "mu = " + " ".join(repr(float(m)) for m in hw.mu)]
    if constraints is not None:
        Y = as_constraint_array(constraints, hw.weights.size)
        res = np.abs(Y.T @ hw.weights) / np.linalg.norm(Y, axis=0)
        lines.append("constraint_residuals = " + " ".join(repr(float(r)) for r in res))
    return "\n".join(lines) + "\n"
