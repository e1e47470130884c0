"""Factor-model covariance ``Theta = Xi + Omega Omega'`` and sample covariances.

``Xi = diag(xi^2)`` holds specific variances and ``Omega = Omega_raw L``
with ``L L' = Phi`` the Cholesky factor of the factor covariance. Products
with ``Theta`` and ``Theta^-1`` are carried out in O(N K^2) through the
K x K matrix ``Q = I + Omega' Xi^-1 Omega`` (Woodbury), never through a
dense N x N inverse.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .errors import InsufficientDataError, NotPositiveDefiniteError, ParseError, ValidationError
from .regression import as_loadings

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FactorModel:
    """Specific risks, raw loadings and factor covariance.

    ``loadings`` (the rotated ``Omega``) is derived in ``__post_init__``.
    Use :meth:`from_rotated` when the loadings already absorb ``Phi``.
    """

    xi: np.ndarray
    raw_loadings: np.ndarray
    factor_cov: np.ndarray
    tickers: tuple[str, ...] | None = None
    factors: tuple[str, ...] | None = None
    loadings: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        xi = np.atleast_1d(np.array(self.xi, dtype=float))
        n = xi.size
        raw = np.array(self.raw_loadings, dtype=float)
        raw = raw.reshape(n, -1) if raw.size else np.zeros((n, 0))
        k = raw.shape[1]
        phi = np.array(self.factor_cov, dtype=float)
        phi = phi.reshape(k, k) if k else np.zeros((0, 0))
        if not np.all(np.isfinite(xi)) or np.any(xi <= 0):
            raise ValidationError("specific risks must be finite and strictly positive")
        if not np.all(np.isfinite(raw)):
            raise ValidationError("factor loadings contain non-finite entries")
        if not np.array_equal(phi, phi.T):
            raise ValidationError("factor covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(phi) if k else np.zeros((0, 0))
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError("factor covariance is not positive-definite") from None
        if self.tickers is not None and len(self.tickers) != n:
            raise ValidationError("ticker labels do not match specific risks")
        factors = tuple(self.factors) if self.factors is not None else tuple(f"f{a}" for a in range(k))
        if len(factors) != k:
            raise ValidationError("factor labels do not match loadings columns")
        omega = raw @ chol
        for name, arr in (("xi", xi), ("raw_loadings", raw), ("factor_cov", phi), ("loadings", omega)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "factors", factors)
        if self.tickers is not None:
            object.__setattr__(self, "tickers", tuple(self.tickers))

    @classmethod
    def from_rotated(cls, xi, loadings, tickers=None, factors=None):
        loadings = np.atleast_2d(np.asarray(loadings, dtype=float))
        if loadings.size == 0:
            loadings = np.zeros((np.size(xi), 0))
        return cls(xi, loadings, np.eye(loadings.shape[1]), tickers, factors)

    @property
    def n(self):
        return self.xi.size

    @property
    def k(self):
        return self.loadings.shape[1]

    @property
    def specific_var(self):
        return self.xi**2

    def theta_matvec(self, v):
        """``Theta @ v`` without forming Theta."""
        v = np.asarray(v, dtype=float)
        return self.specific_var * v + self.loadings @ (self.loadings.T @ v)

    def q_tilde(self):
        """``I + Omega' Xi^-1 Omega``."""
        om = self.loadings
        return np.eye(self.k) + om.T @ (om / self.specific_var[:, None])


def build_theta(fm: FactorModel) -> np.ndarray:
    """Dense ``Xi + Omega_raw Phi Omega_raw'``."""
    theta = np.diag(fm.specific_var) + fm.loadings @ fm.loadings.T
    return 0.5 * (theta + theta.T)


def apply_theta_inverse(fm: FactorModel, v) -> np.ndarray:
    """``Theta^-1 v`` via ``Z v - Z Omega Q^-1 Omega' Z v`` with ``Z = Xi^-1``."""
    v = np.asarray(v, dtype=float)
    zv = (v.T / fm.specific_var).T
    if fm.k == 0:
        return zv
    try:
        cf = linalg.cho_factor(fm.q_tilde())
    except linalg.LinAlgError:
        raise NotPositiveDefiniteError("factor system matrix is singular; inputs are corrupted") from None
    corr = fm.loadings @ linalg.cho_solve(cf, fm.loadings.T @ zv)
    return zv - (corr.T / fm.specific_var).T


def theta_inverse_dense(fm: FactorModel) -> np.ndarray:
    """Dense ``Theta^-1`` from the structured form (for small N only)."""
    return apply_theta_inverse(fm, np.eye(fm.n))


def regression_limit_check(loadings, weights, zeta: float, returns) -> np.ndarray:
    """``Theta^-1 R`` for ``Theta = Z^-1 + zeta Omega Omega'``.

    As ``zeta`` grows this tends to the regressed returns of the weighted
    regression of ``R`` over ``Omega`` with weights ``z``; the gap is
    O(1/zeta).
    """
    if not zeta >= 0:
        raise ValidationError("zeta must be nonnegative")
    om = as_loadings(loadings).values
    z = np.asarray(weights, dtype=float)
    R = np.asarray(returns, dtype=float)
    if np.any(z <= 0):
        raise ValidationError("weights must be strictly positive")
    zr = z * R
    if zeta == 0:
        return zr
    # (I/zeta + Omega' Z Omega) is well scaled for large zeta, unlike I + zeta Omega' Z Omega
    m = np.eye(om.shape[1]) / zeta + om.T @ (om * z[:, None])
    return zr - z * (om @ linalg.solve(m, om.T @ zr, assume_a="pos"))


@dataclass(frozen=True)
class SampleCovariance:
    cov: np.ndarray
    n_obs: int
    rank: int

    @property
    def sigma(self):
        return np.sqrt(np.diag(self.cov))

    @property
    def corr(self):
        s = self.sigma
        with np.errstate(divide="ignore", invalid="ignore"):
            psi = self.cov / np.outer(s, s)
        np.fill_diagonal(psi, np.where(s > 0, 1.0, np.nan))
        return psi


def sample_covariance(series) -> SampleCovariance:
    """Unbiased covariance of ``M + 1`` observations (rows) of N returns (columns)."""
    x = np.asarray(series, dtype=float)
    if x.ndim != 2:
        raise ValidationError("series must be a 2-D (observations x assets) array")
    if x.shape[0] < 2:
        raise InsufficientDataError("sample covariance needs at least 2 observations per series")
    if not np.all(np.isfinite(x)):
        raise ValidationError("series contain non-finite values")
    dev = x - x.mean(axis=0)
    cov = dev.T @ dev / (x.shape[0] - 1)
    cov = 0.5 * (cov + cov.T)
    rank = int(np.linalg.matrix_rank(dev)) if cov.size else 0
    return SampleCovariance(cov, x.shape[0], rank)


# ---------------------------------------------------------------- CSV triplet


def write_factor_model(fm: FactorModel, directory, prefix=""):
    """Write ``specific_risk.csv``, ``loadings.csv``, ``factor_cov.csv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tickers = fm.tickers or tuple(f"T{i}" for i in range(fm.n))
    with open(d / f"{prefix}specific_risk.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ticker", "xi"])
        w.writerows([t, repr(float(x))] for t, x in zip(tickers, fm.xi))
    with open(d / f"{prefix}loadings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ticker", "factor", "value"])
        for i, t in enumerate(tickers):
            for a, f in enumerate(fm.factors):
                if fm.raw_loadings[i, a] != 0:
                    w.writerow([t, f, repr(float(fm.raw_loadings[i, a]))])
    with open(d / f"{prefix}factor_cov.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["factor", "factor", "value"])
        for a, fa in enumerate(fm.factors):
            for b, fb in enumerate(fm.factors):
                w.writerow([fa, fb, repr(float(fm.factor_cov[a, b]))])


def _rows(path, header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        got = next(reader, None)
        if got is None or [h.strip() for h in got] != list(header):
            raise ParseError(f"expected header {','.join(header)}, got {got}", path, 1)
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields", path, reader.line_num)
            yield reader.line_num, [c.strip() for c in row]


def _num(text, path, line):
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"cannot parse {text!r} as a number", path, line) from None


def read_factor_model(directory, tickers=None, prefix="") -> FactorModel:
    """Read the CSV triplet; missing loadings entries are zero."""
    d = Path(directory)
    xi = {}
    for line, (t, v) in _rows(d / f"{prefix}specific_risk.csv", ("ticker", "xi")):
        xi[t] = _num(v, d / "specific_risk.csv", line)
    order = list(tickers) if tickers is not None else list(xi)
    missing = [t for t in order if t not in xi]
    if missing:
        raise ValidationError(f"no specific risk for: {', '.join(missing)}")
    cov_entries = {}
    factors: list[str] = []
    cpath = d / f"{prefix}factor_cov.csv"
    if cpath.exists():
        for line, (a, b, v) in _rows(cpath, ("factor", "factor", "value")):
            cov_entries[(a, b)] = _num(v, cpath, line)
            for f in (a, b):
                if f not in factors:
                    factors.append(f)
    lpath = d / f"{prefix}loadings.csv"
    entries = []
    if lpath.exists():
        for line, (t, f, v) in _rows(lpath, ("ticker", "factor", "value")):
            entries.append((t, f, _num(v, lpath, line)))
            if f not in factors:
                factors.append(f)
    k = len(factors)
    fi = {f: a for a, f in enumerate(factors)}
    ti = {t: i for i, t in enumerate(order)}
    raw = np.zeros((len(order), k))
    for t, f, v in entries:
        if t in ti:
            raw[ti[t], fi[f]] = v
    phi = np.zeros((k, k))
    for (a, b), v in cov_entries.items():
        phi[fi[a], fi[b]] = v
        if (b, a) not in cov_entries:
            phi[fi[b], fi[a]] = v
    return FactorModel([xi[t] for t in order], raw, phi, tuple(order), tuple(factors))
