"""Bounded mean-variance optimization with linear trading costs.

Minimizes over trades ``x = w - w*``

    g(x) = lam/2 x'Theta x - rho'x + sum_i L_i |x_i|

subject to ``Y'x = 0`` and ``x_lo <= x <= x_hi`` where ``rho = R - lam Theta w*``
and ``Theta = Xi + Omega Omega'``. Every index falls in one of four sets:
``free`` (strictly between bounds, nonzero), ``zero`` (the no-trade band),
``upper`` and ``lower`` (at a bound). Given the reduced unknowns
``u = (u_Y, v)`` the solution on each index is explicit, so the search runs
over the (m + K)-vector ``u`` only, solving one (m + K) linear system per
iteration.

Two set-update modes are available:

* ``"incremental"`` (default) keeps a feasible path ``x_hat`` and moves it
  toward each candidate solution only as far as the bounds allow, fixing
  indices that hit a bound and releasing them once their bound inequality
  fails.
* ``"inequality"`` reclassifies every index from its bound inequalities at
  each step. It is a Newton iteration on the concave dual function and is
  safeguarded by a backtracking line search, which makes it globally
  convergent. The incremental mode falls back to it if it cycles.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import linalg

from .errors import NonConvergenceError, ParseError, RankDeficiencyError, ValidationError
from .factor_model import FactorModel, read_factor_model
from .optimizer import as_constraint_array, factor_direction
from .regression import _is_spanned, dependent_columns

logger = logging.getLogger(__name__)

FREE, ZERO, UPPER, LOWER = 0, 1, 2, 3
SET_NAMES = ("free", "zero", "upper", "lower")
BOUND_NUDGE = 1e-12
U_TOL = 1e-12
MODES = ("incremental", "inequality")


@dataclass(frozen=True)
class CostProblem:
    """Inputs of one fixed-``lam`` optimization.

    ``lower``/``upper`` are bounds on the final weights ``w``; infinite
    values are allowed. Trade bounds that are exactly zero are nudged to
    ``+-1e-12`` so that every index has room to move both ways.
    """

    returns: np.ndarray
    costs: np.ndarray
    current: np.ndarray
    model: FactorModel
    constraints: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    lam: float = 1.0
    tickers: tuple[str, ...] | None = None
    x_lower: np.ndarray = field(init=False, repr=False)
    x_upper: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.model.n
        R = self._vec(self.returns, "returns", n)
        L = self._vec(self.costs, "costs", n)
        ws = self._vec(self.current, "current weights", n)
        lo = np.full(n, -np.inf) if self.lower is None else self._vec(self.lower, "lower bounds", n, finite=False)
        hi = np.full(n, np.inf) if self.upper is None else self._vec(self.upper, "upper bounds", n, finite=False)
        if np.any(L < 0):
            raise ValidationError("cost rates must be nonnegative")
        if not (math.isfinite(self.lam) and self.lam > 0):
            raise ValidationError("lam must be positive and finite")
        bad = np.flatnonzero((lo > ws) | (ws > hi))
        if bad.size:
            raise ValidationError(f"current weights outside bounds at indices {bad.tolist()}")
        Y = as_constraint_array(self.constraints, n)
        if Y.shape[1]:
            resid = np.abs(Y.T @ ws)
            scale = np.linalg.norm(Y, axis=0) * max(np.linalg.norm(ws), 1.0)
            if np.any(resid > 1e-9 * scale):
                raise ValidationError("current weights violate the linear constraints")
        xlo = lo - ws
        xhi = hi - ws
        xlo[xlo == 0] = -BOUND_NUDGE
        xhi[xhi == 0] = BOUND_NUDGE
        if self.tickers is not None and len(self.tickers) != n:
            raise ValidationError("ticker labels do not match problem size")
        for name, arr in (("returns", R), ("costs", L), ("current", ws), ("lower", lo), ("upper", hi),
                          ("constraints", Y), ("x_lower", xlo), ("x_upper", xhi)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "lam", float(self.lam))
        if self.tickers is not None:
            object.__setattr__(self, "tickers", tuple(self.tickers))

    @staticmethod
    def _vec(v, name, n, finite=True):
        arr = np.array(v, dtype=float).reshape(-1)
        if arr.size != n:
            raise ValidationError(f"{name}: expected {n} entries, got {arr.size}")
        if np.any(np.isnan(arr)) or (finite and not np.all(np.isfinite(arr))):
            raise ValidationError(f"{name} contain invalid entries")
        return arr

    @property
    def n(self):
        return self.model.n

    def with_lambda(self, lam):
        return replace(self, lam=lam)


@dataclass(frozen=True)
class Solution:
    """Optimal trade and its set partition.

    ``u`` stacks ``u_Y`` (the constraint multipliers divided by ``-lam``)
    and ``v = Omega' x`` over the factors used by the solver.
    """

    x: np.ndarray
    w: np.ndarray
    eta: np.ndarray
    sets: np.ndarray
    u: np.ndarray | None
    n_constraints: int
    lam: float
    iterations: int
    converged: bool
    mode: str
    objective: float

    @property
    def set_names(self):
        return [SET_NAMES[s] for s in self.sets]

    def indices(self, name):
        return np.flatnonzero(self.sets == SET_NAMES.index(name))

    @property
    def multipliers(self):
        if self.u is None:
            return None
        return -self.lam * self.u[: self.n_constraints]


def effective_returns(problem: CostProblem) -> np.ndarray:
    """``rho = R - lam Theta w*`` using the factor-structured product."""
    return problem.returns - problem.lam * problem.model.theta_matvec(problem.current)


def objective(problem: CostProblem, x, rho=None) -> float:
    x = np.asarray(x, dtype=float)
    rho = effective_returns(problem) if rho is None else rho
    quad = 0.5 * problem.lam * float(x @ problem.model.theta_matvec(x))
    return quad - float(rho @ x) + float(problem.costs @ np.abs(x))


def line_search_t_star(x_prev, x_candidate, lower, upper):
    """Largest ``t`` in [0, 1] keeping ``x_prev + t (x_candidate - x_prev)`` within bounds.

    Returns ``(t, x_next)``. Indices that limit ``t`` are placed exactly on
    their bound in ``x_next``.
    """
    xp = np.asarray(x_prev, dtype=float)
    q = np.asarray(x_candidate, dtype=float) - xp
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    if not np.any(q):
        return 1.0, xp.copy()
    p = np.full(xp.size, np.inf)
    up = q > 0
    dn = q < 0
    with np.errstate(invalid="ignore"):
        p[up] = (hi[up] - xp[up]) / q[up]
        p[dn] = (lo[dn] - xp[dn]) / q[dn]
    t = float(min(1.0, p.min()))
    t = max(t, 0.0)
    x_next = np.clip(xp + t * q, lo, hi)
    if t < 1.0:
        hit = p <= t
        x_next[hit & up] = hi[hit & up]
        x_next[hit & dn] = lo[hit & dn]
    return t, x_next


# ------------------------------------------------------------------ solver core


class _Core:
    """Per-solve arrays: ``Omega_hat = [Y, Omega]`` and helpers in terms of ``u``."""

    def __init__(self, problem: CostProblem):
        self.p = problem
        self.lam = problem.lam
        self.rho = effective_returns(problem)
        self.L = problem.costs
        self.var = problem.model.specific_var
        self.lo = problem.x_lower
        self.hi = problem.x_upper
        Y = problem.constraints
        om = problem.model.loadings
        # factor columns inside span(Y) vanish on the feasible set
        keep = [a for a in range(om.shape[1]) if not (Y.shape[1] and _is_spanned(om[:, a], Y))]
        self.stripped = om.shape[1] - len(keep)
        self.m = Y.shape[1]
        self.oh = np.column_stack([Y, om[:, keep]])
        self.dim = self.oh.shape[1]
        self.phi = np.r_[np.zeros(self.m), np.ones(len(keep))]

    def g(self, u):
        return self.rho - self.lam * (self.oh @ u) if self.dim else self.rho.copy()

    def classify(self, g):
        lam_var = self.lam * self.var
        sets = np.full(g.size, FREE, dtype=np.int8)
        sets[np.abs(g) <= self.L] = ZERO
        with np.errstate(invalid="ignore"):
            sets[g - self.L >= lam_var * self.hi] = UPPER
            sets[g + self.L <= lam_var * self.lo] = LOWER
        return sets

    def primal(self, u):
        g = self.g(u)
        soft = np.sign(g) * np.maximum(np.abs(g) - self.L, 0.0)
        x = np.clip(soft / (self.lam * self.var), self.lo, self.hi)
        sets = self.classify(g)
        x[sets == UPPER] = self.hi[sets == UPPER]
        x[sets == LOWER] = self.lo[sets == LOWER]
        x[sets == ZERO] = 0.0
        return x, sets, g

    def dual(self, u):
        x, _, g = self.primal(u)
        val = 0.5 * self.lam * self.var * x * x - g * x + self.L * np.abs(x)
        uf = u[self.m:]
        return math.fsum(val) - 0.5 * self.lam * float(uf @ uf)

    def q_hat(self, free):
        a = self.oh[free]
        return np.diag(self.phi) + a.T @ (a / self.var[free, None])

    def y_hat(self, sets, eta):
        free = sets == FREE
        oh = self.oh
        y = oh[free].T @ ((self.rho[free] - self.L[free] * eta[free]) / self.var[free]) / self.lam
        for s, b in ((UPPER, self.hi), (LOWER, self.lo)):
            idx = sets == s
            if np.any(idx):
                y = y + oh[idx].T @ b[idx]
        return y

    def y_deficient(self, free):
        if self.m == 0:
            return False
        yf = self.oh[free, : self.m]
        return yf.shape[0] < self.m or bool(dependent_columns(yf / np.sqrt(self.var[free, None])))

    def candidate(self, u, sets, eta):
        x = np.zeros(self.p.n)
        free = sets == FREE
        x[free] = ((self.rho[free] - self.L[free] * eta[free]) / self.lam - self.oh[free] @ u) / self.var[free]
        x[sets == UPPER] = self.hi[sets == UPPER]
        x[sets == LOWER] = self.lo[sets == LOWER]
        return x


def _solve_sym(q, y):
    if q.shape[0] == 0:
        return np.zeros(0)
    return linalg.solve(q, y, assume_a="pos")


def _u_close(a, b):
    return np.linalg.norm(a - b) <= U_TOL * max(1.0, np.linalg.norm(b))


def _run_incremental(core: _Core, budget):
    n = core.p.n
    xh = np.zeros(n)
    fixed = np.zeros(n, dtype=np.int8)  # FREE, or UPPER/LOWER when pinned at a bound
    u = None
    prev_sets = None
    seen = set()
    for it in range(1, budget + 1):
        if u is None:
            g = core.rho
            sets = np.full(n, FREE, dtype=np.int8)
            eta = np.sign(g)
        else:
            g = core.g(u)
            lam_var = core.lam * core.var
            release_up = (fixed == UPPER) & (g - core.L < lam_var * core.hi)
            release_dn = (fixed == LOWER) & (g + core.L > lam_var * core.lo)
            fixed[release_up | release_dn] = FREE
            sets = np.where(np.abs(g) <= core.L, ZERO, FREE).astype(np.int8)
            eta = np.sign(g)
        sets[fixed == UPPER] = UPPER
        sets[fixed == LOWER] = LOWER
        eta = np.where(sets == FREE, eta, 0.0)
        key = sets.tobytes() + eta.tobytes()
        if prev_sets is not None and key != prev_sets and key in seen:
            return None, it, "cycle"
        seen.add(key)
        free = sets == FREE
        if core.y_deficient(free):
            return None, it, "singular"
        u_new = _solve_sym(core.q_hat(free), core.y_hat(sets, eta))
        cand = core.candidate(u_new, sets, eta)
        t, xh = line_search_t_star(xh, cand, core.lo, core.hi)
        if t < 1.0:
            fixed[(xh == core.hi) & (cand > xh)] = UPPER
            fixed[(xh == core.lo) & (cand < xh)] = LOWER
        if t == 1.0 and key == prev_sets and u is not None and _u_close(u_new, u):
            return u_new, it, "ok"
        prev_sets = key
        u = u_new
    return None, budget, "budget"


def _run_inequality(core: _Core, budget, u0=None):
    n = core.p.n
    if u0 is None:
        sets = np.full(n, FREE, dtype=np.int8)
        u = _solve_sym(core.q_hat(sets == FREE), core.y_hat(sets, np.sign(core.rho)))
    else:
        u = u0
    prev = None
    stagnant = 0
    for it in range(1, budget + 1):
        x, sets, g = core.primal(u)
        free = sets == FREE
        grad = (core.oh.T @ x - core.phi * u) if core.dim else np.zeros(0)
        if core.dim == 0:
            return u, it
        q = core.q_hat(free)
        if core.y_deficient(free):
            reg = 1e-8 * max(1.0, float(np.mean(np.diag(q))))
            q[: core.m, : core.m] += reg * np.eye(core.m)
        try:
            step = linalg.solve(q, grad, assume_a="pos")
        except linalg.LinAlgError:
            step = linalg.lstsq(q, grad)[0]
        key = sets.tobytes()
        small = np.linalg.norm(step) <= U_TOL * max(1.0, np.linalg.norm(u))
        if key == prev:
            stagnant = stagnant + 1 if np.linalg.norm(step) <= 1e-9 * max(1.0, np.linalg.norm(u)) else 0
        else:
            stagnant = 0
        if key == prev and (small or stagnant >= 3):
            return u + step, it
        prev = key
        slope = core.lam * float(grad @ step)
        d0 = core.dual(u)
        t = 1.0
        floor = 1e-15 * (abs(d0) + 1.0)
        while core.dual(u + t * step) < d0 + 1e-4 * t * slope - floor and t > 1e-30:
            t *= 0.5
        u = u + t * step
    return None, budget


def solve_fixed_lambda(problem: CostProblem, mode="incremental", max_iter=None) -> Solution:
    """Global minimizer of the cost-aware objective at the problem's ``lam``."""
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}; expected one of {MODES}")
    core = _Core(problem)
    n = problem.n
    cap = max_iter if max_iter is not None else 100 * (n + problem.model.k + core.m)
    used = 0
    mode_used = mode
    u = None
    if core.stripped:
        logger.info("ignoring %d factor columns spanned by the constraints", core.stripped)
    if mode == "incremental":
        u, used, status = _run_incremental(core, cap)
        if u is None:
            logger.info("incremental set growth stopped (%s); switching to inequality mode", status)
            mode_used = "incremental+inequality"
    if u is None:
        u, more = _run_inequality(core, cap - used)
        used += more
        if u is None:
            x, sets, _ = core.primal(np.zeros(core.dim))
            raise NonConvergenceError(f"no convergence within {cap} iterations", state={"iterations": used})
    x, sets, g = core.primal(u)
    eta = np.where(sets == ZERO, 0.0, np.sign(x))
    eta[sets == FREE] = np.sign(g[sets == FREE])
    w = problem.current + x
    w[sets == UPPER] = np.where(np.isfinite(problem.upper), problem.upper, w)[sets == UPPER]
    w[sets == LOWER] = np.where(np.isfinite(problem.lower), problem.lower, w)[sets == LOWER]
    w = np.clip(w, problem.lower, problem.upper)
    return Solution(x, w, eta, sets, u, core.m, problem.lam, used, True, mode_used,
                    objective(problem, x, core.rho))


# ------------------------------------------------------------------ certification


@dataclass(frozen=True)
class KKTReport:
    passed: bool
    worst: dict
    violations: dict

    def summary(self):
        lines = ["PASS" if self.passed else "FAIL"]
        for name, val in self.worst.items():
            idx = self.violations.get(name, [])
            tail = f"  indices {idx[:10]}" if idx else ""
            lines.append(f"  {name}: worst {val:.3e}{tail}")
        return "\n".join(lines)


def kkt_check(problem: CostProblem, solution: Solution, tol=1e-8) -> KKTReport:
    """Verify optimality conditions of ``solution``; never raises on failure.

    The constraint multipliers come from the solution when available and
    are otherwise fitted by least squares to stationarity on the free set.
    """
    n = problem.n
    x = np.asarray(solution.x, dtype=float)
    sets = np.asarray(solution.sets)
    eta = np.asarray(solution.eta, dtype=float)
    if x.size != n or sets.size != n:
        raise ValidationError("solution size does not match problem")
    lam = problem.lam
    rho = effective_returns(problem)
    L = problem.costs
    var = problem.model.specific_var
    Y = problem.constraints
    m = Y.shape[1]
    free = sets == FREE
    om = problem.model.loadings
    base = rho - lam * (om @ (om.T @ x))
    if m:
        if solution.u is not None and len(solution.u) >= m:
            uy = np.asarray(solution.u[:m])
        elif np.any(free):
            rhs = base[free] - lam * var[free] * x[free] - L[free] * eta[free]
            uy = np.linalg.lstsq(lam * Y[free], rhs, rcond=None)[0]
        else:
            uy = np.zeros(m)
        g = base - lam * (Y @ uy)
    else:
        g = base
    scale = max(1.0, float(np.max(np.abs(rho), initial=0)), float(np.max(L, initial=0)))
    t = tol * scale
    lv = lam * var
    checks = {}

    def record(name, mask, amount):
        amount = np.where(mask, amount, 0.0)
        checks[name] = (float(np.max(amount, initial=0.0)), np.flatnonzero(amount > t).tolist())

    record("stationarity", free, np.abs(lv * x - g + L * eta))
    record("sign", free, np.maximum(0.0, -eta * x * lv) + np.where(np.abs(eta) == 1, 0.0, np.inf))
    record("no_trade_band", sets == ZERO, np.maximum(0.0, np.abs(g) - L) + np.abs(x) * lv)
    with np.errstate(invalid="ignore"):
        record("upper_bound_set", sets == UPPER,
               np.nan_to_num(np.maximum(0.0, L + lv * problem.x_upper - g)) + np.abs(x - problem.x_upper) * lv)
        record("lower_bound_set", sets == LOWER,
               np.nan_to_num(np.maximum(0.0, g + L - lv * problem.x_lower)) + np.abs(x - problem.x_lower) * lv)
    record("bounds", np.ones(n, bool), np.maximum(0.0, np.maximum(x - problem.x_upper, problem.x_lower - x)))
    valid = np.isin(sets, (FREE, ZERO, UPPER, LOWER))
    record("partition", ~valid, np.ones(n))
    if m:
        res = np.abs(Y.T @ x) / (np.linalg.norm(Y, axis=0) * max(1.0, np.linalg.norm(x)))
        checks["constraints"] = (float(res.max()), [a for a in range(m) if res[a] > tol])
    worst = {k: v[0] for k, v in checks.items()}
    violations = {k: v[1] for k, v in checks.items() if v[1]}
    return KKTReport(not violations, worst, violations)


# ------------------------------------------------------------------ lambda search


def realized_sharpe(problem: CostProblem, solution: Solution) -> float:
    """``(R'w - sum L|x|) / sqrt(w'Theta w)``; ``-inf`` when ``w`` has no risk."""
    w = solution.w
    var = float(w @ problem.model.theta_matvec(w))
    if not var > 0:
        return -math.inf
    pnl = float(problem.returns @ w) - float(problem.costs @ np.abs(solution.x))
    return pnl / math.sqrt(var)


@dataclass(frozen=True)
class SharpeSearchResult:
    lam: float
    solution: Solution
    sharpe: float
    grid: tuple[tuple[float, float], ...]


def default_lambda_grid(problem: CostProblem, points=25, decades=4.0):
    """Log-spaced grid centered on the cost-free optimal ``lam``."""
    d, _ = factor_direction(problem.model, problem.returns, problem.constraints if problem.constraints.shape[1] else None)
    lam0 = math.fsum(np.abs(d))
    if not lam0 > 0:
        raise ValidationError("expected returns carry no signal")
    return lam0 * 10.0 ** np.linspace(-decades / 2, decades / 2, points)


def _evaluate(problem, lam, mode):
    p = problem.with_lambda(float(lam))
    try:
        sol = solve_fixed_lambda(p, mode=mode)
    except NonConvergenceError:
        logger.warning("no convergence at lam=%r", lam)
        return None, -math.inf
    return sol, realized_sharpe(p, sol)


def sharpe_search(problem: CostProblem, lambdas=None, refine=True, workers=None, mode="incremental",
                  refine_iter=60) -> SharpeSearchResult:
    """Pick the ``lam`` whose fixed-``lam`` optimum has the best realized Sharpe ratio.

    This is a search over the convex fixed-``lam`` family, which only
    approximates direct Sharpe maximization when costs are present.
    """
    lams = np.asarray(default_lambda_grid(problem) if lambdas is None else lambdas, dtype=float)
    if lams.size == 0 or np.any(lams <= 0):
        raise ValidationError("lambda grid must contain positive values")
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda lm: _evaluate(problem, lm, mode), lams))
    else:
        results = [_evaluate(problem, lm, mode) for lm in lams]
    scores = [s for _, s in results]
    k = int(np.argmax(scores))
    if not math.isfinite(scores[k]):
        raise NonConvergenceError("no candidate lambda produced a usable solution")
    best = (float(lams[k]), results[k][0], scores[k])
    grid = [(float(a), float(s)) for a, s in zip(lams, scores)]
    if refine and lams.size >= 3:
        order = np.argsort(lams)
        pos = int(np.flatnonzero(order == k)[0])
        a = math.log(lams[order[max(pos - 1, 0)]])
        b = math.log(lams[order[min(pos + 1, lams.size - 1)]])
        inv = (math.sqrt(5) - 1) / 2
        cache = {}

        def f(loglam):
            if loglam not in cache:
                cache[loglam] = _evaluate(problem, math.exp(loglam), mode)
            return cache[loglam][1]

        c, d = b - inv * (b - a), a + inv * (b - a)
        for _ in range(refine_iter):
            if f(c) >= f(d):
                b, d = d, c
                c = b - inv * (b - a)
            else:
                a, c = c, d
                d = a + inv * (b - a)
            if b - a < 1e-10:
                break
        for loglam, (sol, s) in sorted(cache.items()):
            grid.append((math.exp(loglam), s))
            if s > best[2]:
                best = (math.exp(loglam), sol, s)
    return SharpeSearchResult(best[0], best[1], best[2], tuple(grid))


# ------------------------------------------------------------------ file I/O

ASSET_HEADER = ("ticker", "R", "L", "w_star", "w_lower", "w_upper")


def _float(text, path, line, default=None):
    if text == "" and default is not None:
        return default
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"cannot parse {text!r} as a number", path, line) from None


def read_bundle(directory, lam=1.0) -> CostProblem:
    """Load ``assets.csv``, optional ``constraints.csv`` and the factor-model files."""
    d = Path(directory)
    path = d / "assets.csv"
    if not path.exists():
        raise ValidationError(f"missing problem file: {path}")
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ASSET_HEADER:
            raise ParseError(f"expected header {','.join(ASSET_HEADER)}", path, 1)
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(ASSET_HEADER):
                raise ParseError(f"expected {len(ASSET_HEADER)} fields", path, reader.line_num)
            t, *vals = (c.strip() for c in row)
            if t in rows:
                raise ParseError(f"duplicate ticker {t}", path, reader.line_num)
            ln = reader.line_num
            rows[t] = (_float(vals[0], path, ln), _float(vals[1], path, ln), _float(vals[2], path, ln, 0.0),
                       _float(vals[3], path, ln, -math.inf), _float(vals[4], path, ln, math.inf))
    tickers = list(rows)
    if not tickers:
        raise ValidationError(f"{path}: no assets")
    fm = read_factor_model(d, tickers)
    arr = np.array([rows[t] for t in tickers])
    Y = None
    cpath = d / "constraints.csv"
    if cpath.exists():
        names: list[str] = []
        entries = []
        with open(cpath, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["ticker", "constraint", "value"]:
                raise ParseError("expected header ticker,constraint,value", cpath, 1)
            for row in reader:
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != 3:
                    raise ParseError("expected 3 fields", cpath, reader.line_num)
                t, c, v = (x.strip() for x in row)
                if t not in rows:
                    raise ParseError(f"unknown ticker {t}", cpath, reader.line_num)
                if c not in names:
                    names.append(c)
                entries.append((t, c, _float(v, cpath, reader.line_num)))
        Y = np.zeros((len(tickers), len(names)))
        ti = {t: i for i, t in enumerate(tickers)}
        for t, c, v in entries:
            Y[ti[t], names.index(c)] = v
        dep = dependent_columns(Y)
        if dep:
            raise RankDeficiencyError("constraint matrix is rank-deficient", [names[j] for j in dep])
    return CostProblem(arr[:, 0], arr[:, 1], arr[:, 2], fm, Y, arr[:, 3], arr[:, 4], lam, tuple(tickers))


def write_bundle(problem: CostProblem, directory):
    from .factor_model import write_factor_model

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tickers = problem.tickers or tuple(f"T{i}" for i in range(problem.n))
    with open(d / "assets.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ASSET_HEADER)
        for i, t in enumerate(tickers):
            w.writerow([t] + [repr(float(a[i])) for a in (problem.returns, problem.costs, problem.current,
                                                          problem.lower, problem.upper)])
    Y = problem.constraints
    if Y.shape[1]:
        with open(d / "constraints.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["ticker", "constraint", "value"])
            for i, t in enumerate(tickers):
                for a in range(Y.shape[1]):
                    if Y[i, a] != 0:
                        w.writerow([t, f"c{a}", repr(float(Y[i, a]))])
    fm = problem.model
    write_factor_model(FactorModel(fm.xi, fm.raw_loadings, fm.factor_cov, tuple(tickers), fm.factors), d)


def write_solution(solution: Solution, tickers, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ticker", "x", "w", "set", "eta"])
        for i, t in enumerate(tickers):
            w.writerow([t, repr(float(solution.x[i])), repr(float(solution.w[i])), SET_NAMES[solution.sets[i]],
                        int(solution.eta[i])])


def read_solution(path, problem: CostProblem) -> Solution:
    """Load a solution CSV for certification; multipliers are not stored."""
    tickers = problem.tickers or tuple(f"T{i}" for i in range(problem.n))
    index = {t: i for i, t in enumerate(tickers)}
    n = problem.n
    x = np.full(n, np.nan)
    w = np.full(n, np.nan)
    eta = np.zeros(n)
    sets = np.full(n, -1, dtype=np.int8)
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["ticker", "x", "w", "set", "eta"]:
            raise ParseError("expected header ticker,x,w,set,eta", path, 1)
        for row in reader:
            if not row:
                continue
            if len(row) != 5:
                raise ParseError("expected 5 fields", path, reader.line_num)
            t, xs, ws, s, e = (c.strip() for c in row)
            if t not in index:
                raise ParseError(f"unknown ticker {t}", path, reader.line_num)
            if s not in SET_NAMES:
                raise ParseError(f"unknown set {s!r}", path, reader.line_num)
            i = index[t]
            x[i] = _float(xs, path, reader.line_num)
            w[i] = _float(ws, path, reader.line_num)
            sets[i] = SET_NAMES.index(s)
            eta[i] = _float(e, path, reader.line_num)
    if np.any(sets < 0):
        missing = [tickers[i] for i in np.flatnonzero(sets < 0)]
        raise ValidationError(f"solution missing tickers: {', '.join(missing)}")
    return Solution(x, w, eta, sets, None, problem.constraints.shape[1], problem.lam, 0, True, "file",
                    objective(problem, x))


def solution_report(problem: CostProblem, solution: Solution, kkt: KKTReport | None = None, sharpe=None) -> str:
    counts = {name: int(np.sum(solution.sets == k)) for k, name in enumerate(SET_NAMES)}
    lines = [
        f"lambda = {solution.lam!r}",
        f"objective = {solution.objective!r}",
        f"realized_sharpe = {realized_sharpe(problem, solution) if sharpe is None else sharpe!r}",
        f"iterations = {solution.iterations}",
        f"mode = {solution.mode}",
        "sets = " + ", ".join(f"{k}:{v}" for k, v in counts.items()),
    ]
    if solution.multipliers is not None and solution.n_constraints:
        lines.append("multipliers = " + " ".join(repr(float(v)) for v in solution.multipliers))
    if kkt is not None:
        lines.append("kkt = " + kkt.summary().replace("\n", "\n      "))
    return "\n".join(lines) + "\n"
