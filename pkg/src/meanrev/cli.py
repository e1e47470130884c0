"""Command-line front end: ``meanrev {backtest,optimize,regress,synth}``.

Options can also come from a flat ``key = value`` file given with
``--config``; keys are option names with dashes or underscores. Flags on
the command line override the file. Every run writes the fully resolved
options to ``resolved_config.txt`` in the output directory.

Exit codes: 0 success, 1 input or validation error, 2 numerical
non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from datetime import date, datetime
from pathlib import Path

import numpy as np

from . import backtest as bt
from . import cost_optimizer as co
from .datapanel import (
    LEVELS,
    ClassificationMap,
    SyntheticSpec,
    cluster_synthetic_spec,
    generate_synthetic_panel,
    load_classification,
    load_price_panel,
    write_classification,
    write_price_panel,
)
from .errors import MeanRevError, NonConvergenceError, ParseError, ValidationError
from .factor_model import FactorModel, write_factor_model
from .optimizer import max_sharpe_factor_constrained, portfolio_sharpe
from .regression import SHAPING_KINDS, LoadingsMatrix, StrategyShaping, cross_sectional_regression, holdings_from_residuals

logger = logging.getLogger("meanrev")

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGENCE = 0, 1, 2
GLOBAL_KEYS = ("config", "out_dir", "seed", "no_timestamp", "verbose")


# ---------------------------------------------------------------- config files


def read_key_values(path):
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    path = Path(path)
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError("expected 'key = value'", path, lineno)
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ParseError("empty key", path, lineno)
            out[key.replace("-", "_")] = value
    return out


def _to_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"cannot interpret {text!r} as a boolean")


def _parse_date(text):
    try:
        return date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid date {text!r}; expected YYYY-MM-DD") from None


def _float_list(text):
    parts = [p for p in str(text).replace(",", " ").split() if p]
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise ValidationError(f"cannot parse number list {text!r}") from None


def _resolve(sub: argparse.ArgumentParser, ns: argparse.Namespace, file_values: dict):
    """Merge parser defaults, config-file values and explicit flags (in that order)."""
    explicit = vars(ns)
    resolved = {}
    for action in sub._actions:
        dest = action.dest
        if dest not in sub.option_defaults:
            continue
        if dest in explicit:
            resolved[dest] = explicit[dest]
        elif dest in file_values:
            text = file_values[dest]
            if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                resolved[dest] = _to_bool(text)
            else:
                conv = action.type or str
                try:
                    resolved[dest] = conv(text)
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise ValidationError(f"config key {dest}: {exc}") from None
                if action.choices is not None and resolved[dest] not in action.choices:
                    raise ValidationError(f"config key {dest}: {text!r} not in {list(action.choices)}")
        else:
            resolved[dest] = sub.option_defaults.get(dest)
    unknown = sorted(set(file_values) - set(resolved) - set(GLOBAL_KEYS))
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
    return resolved


def _format_value(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, date):
        return v.isoformat()
    return "" if v is None else str(v)


def write_resolved_config(path, command, opts, timestamp=True):
    lines = []
    if timestamp:
        lines.append(f"# generated {datetime.now().isoformat(timespec='seconds')}")
    lines.append(f"command = {command}")
    lines += [f"{k} = {_format_value(opts[k])}" for k in sorted(opts)]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- synthetic specs


def synthetic_spec_from_file(path, seed=None) -> SyntheticSpec:
    """Build a :class:`SyntheticSpec` from a ``key = value`` file.

    Keys: ``N``, ``dates``, ``seed``, ``xi`` (one value or N), ``K``,
    ``omega`` (N*K row-major), ``phi`` (K*K row-major) or ``clusters`` for a
    market-plus-clusters model, and optional ``base_price``,
    ``overnight_fraction``, ``reversion``, ``outlier_prob``,
    ``outlier_scale``, ``mean_volume``.
    """
    kv = read_key_values(path)
    known = {"n", "k", "dates", "seed", "xi", "omega", "phi", "clusters", "base_price", "overnight_fraction",
             "reversion", "outlier_prob", "outlier_scale", "mean_volume"}
    lower = {k.lower(): v for k, v in kv.items()}
    unknown = sorted(set(lower) - known)
    if unknown:
        raise ValidationError(f"{path}: unknown synthetic keys: {', '.join(unknown)}")
    try:
        n = int(lower["n"])
        n_dates = int(lower["dates"])
    except KeyError as exc:
        raise ValidationError(f"{path}: missing key {exc.args[0]}") from None
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    s = int(lower.get("seed", 0)) if seed is None else int(seed)
    extra = {k: float(lower[k]) for k in ("base_price", "overnight_fraction", "reversion", "outlier_prob",
                                          "outlier_scale", "mean_volume") if k in lower}
    if "omega" not in lower and "clusters" in lower:
        kw = {}
        if "xi" in lower:
            xi = _float_list(lower["xi"])
            if len(xi) == 2:
                kw["xi_range"] = tuple(xi)
        return cluster_synthetic_spec(n, int(lower["clusters"]), n_dates, s, **kw, **extra)
    xi = _float_list(lower.get("xi", "0.02"))
    if len(xi) == 1:
        xi = xi * n
    if len(xi) != n:
        raise ValidationError(f"{path}: xi has {len(xi)} values, expected 1 or {n}")
    k = int(lower.get("k", 0))
    omega = np.array(_float_list(lower.get("omega", ""))) if k else np.zeros((n, 0))
    phi = np.array(_float_list(lower.get("phi", ""))) if k else np.zeros((0, 0))
    if k and (omega.size != n * k or phi.size != k * k):
        raise ValidationError(f"{path}: omega needs {n * k} values and phi {k * k}")
    omega = omega.reshape(n, k) if k else omega
    phi = phi.reshape(k, k) if k else phi
    tickers = tuple(f"T{i:04d}" for i in range(n))
    groups = int(lower.get("clusters", 1))
    labels = {t: (f"S{i % groups:02d}", f"I{i % groups:02d}", f"U{i % groups:02d}") for i, t in enumerate(tickers)}
    return SyntheticSpec(xi, omega, phi, n_dates, s, tickers=tickers, classification=ClassificationMap(labels),
                         **extra)


# ---------------------------------------------------------------- small CSV helpers


def _read_ticker_values(path, header=("ticker", "value")):
    path = Path(path)
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        got = next(reader, None)
        if got is None or [h.strip() for h in got] != list(header):
            raise ParseError(f"expected header {','.join(header)}", path, 1)
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields", path, reader.line_num)
            cells = [c.strip() for c in row]
            key = tuple(cells[:-1]) if len(header) > 2 else cells[0]
            if key in out:
                raise ParseError(f"duplicate entry {key}", path, reader.line_num)
            try:
                out[key] = float(cells[-1])
            except ValueError:
                raise ParseError(f"cannot parse {cells[-1]!r} as a number", path, reader.line_num) from None
    return out


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- commands


def cmd_backtest(opts, out_dir, seed):
    if opts["seed_synthetic"]:
        spec = synthetic_spec_from_file(opts["seed_synthetic"], seed)
        panel = generate_synthetic_panel(spec)
        cmap = spec.classification
    else:
        if not opts["prices"] or not opts["classification"]:
            raise ValidationError("backtest needs --prices and --class (or --seed-synthetic)")
        panel = load_price_panel(opts["prices"])
        cmap = load_classification(opts["classification"])
    config = bt.BacktestConfig(
        level=opts["level"],
        normalize=opts["normalize"],
        investment=opts["investment"],
        top_n=opts["top_n"],
        addv_days=opts["addv_days"],
        period=opts["period"],
        start=opts["start"],
        end=opts["end"],
    )
    if opts["compare"]:
        cmp = bt.compare_normalization(panel, cmap, config)
        bt.write_report(cmp.raw, out_dir / "raw")
        bt.write_report(cmp.normalized, out_dir / "normalized")
        table = cmp.table()
        (out_dir / "comparison.csv").write_text(table)
        print(table, end="")
        return EXIT_OK
    report = bt.run_backtest(panel, cmap, config)
    print(bt.write_report(report, out_dir), end="")
    return EXIT_OK


def _closed_form_sharpe(problem: co.CostProblem):
    Y = problem.constraints
    hw = max_sharpe_factor_constrained(problem.model, problem.returns, Y if Y.shape[1] else None)
    return portfolio_sharpe(hw.weights, problem.model, problem.returns)


def cmd_optimize(opts, out_dir, seed):
    if not opts["bundle"]:
        raise ValidationError("optimize needs --bundle")
    problem = co.read_bundle(opts["bundle"], lam=opts["lam"])
    tickers = problem.tickers
    if opts["check_kkt"]:
        sol = co.read_solution(opts["check_kkt"], problem)
        verdict = co.kkt_check(problem, sol, opts["kkt_tol"])
        text = verdict.summary() + "\n"
        (out_dir / "kkt.txt").write_text(text)
        print(text, end="")
        return EXIT_OK if verdict.passed else EXIT_INPUT
    sharpe = None
    try:
        if opts["sharpe_search"]:
            grid = _float_list(opts["grid"]) if opts["grid"] else None
            res = co.sharpe_search(problem, grid, workers=opts["workers"], mode=opts["mode"])
            problem = problem.with_lambda(res.lam)
            sol, sharpe = res.solution, res.sharpe
            _write_rows(out_dir / "lambda_grid.csv", ["lambda", "sharpe"],
                        [[repr(a), repr(s)] for a, s in sorted(res.grid)])
        else:
            sol = co.solve_fixed_lambda(problem, mode=opts["mode"])
    except NonConvergenceError as exc:
        dump = out_dir / "nonconvergence_state.txt"
        dump.write_text(f"{exc}\nstate = {exc.state!r}\n")
        raise
    verdict = co.kkt_check(problem, sol, opts["kkt_tol"])
    co.write_solution(sol, tickers, out_dir / "solution.csv")
    report = co.solution_report(problem, sol, verdict, sharpe)
    if not np.any(problem.costs) and not np.any(problem.current):
        closed = _closed_form_sharpe(problem)
        realized = co.realized_sharpe(problem, sol)
        report += f"closed_form_sharpe = {closed!r}\nsharpe_difference = {realized - closed!r}\n"
    (out_dir / "report.txt").write_text(report)
    print(report, end="")
    return EXIT_OK


def cmd_regress(opts, out_dir, seed):
    if not opts["returns"]:
        raise ValidationError("regress needs --returns")
    returns = _read_ticker_values(opts["returns"])
    tickers = list(returns)
    R = np.array([returns[t] for t in tickers])
    if opts["loadings"]:
        entries = _read_ticker_values(opts["loadings"], ("ticker", "factor", "value"))
        factors = []
        for _, f in entries:
            if f not in factors:
                factors.append(f)
        unknown = sorted({t for t, _ in entries} - set(tickers))
        if unknown:
            raise ValidationError(f"loadings for tickers without returns: {', '.join(unknown)}")
        omega = np.zeros((len(tickers), len(factors)))
        ti = {t: i for i, t in enumerate(tickers)}
        for (t, f), v in entries.items():
            omega[ti[t], factors.index(f)] = v
        loadings = LoadingsMatrix(omega, tuple(factors), tuple(tickers))
    else:
        if not opts["intercept"]:
            raise ValidationError("regress needs --loadings or --intercept")
        loadings = LoadingsMatrix(np.zeros((len(tickers), 0)), (), tuple(tickers))
    weights = None
    if opts["weights"] == "inverse-variance":
        if not opts["variances"]:
            raise ValidationError("--weights inverse-variance needs --variances")
        var = _read_ticker_values(opts["variances"])
        missing = [t for t in tickers if t not in var]
        if missing:
            raise ValidationError(f"no variance for: {', '.join(missing)}")
        v = np.array([var[t] for t in tickers])
        if np.any(v <= 0):
            raise ValidationError("variances must be strictly positive")
        weights = 1.0 / v
    res = cross_sectional_regression(R, loadings, weights, opts["intercept"], opts["drop_dependent"])
    _write_rows(out_dir / "residuals.csv", ["ticker", "residual", "regressed"],
                [[t, repr(float(e)), repr(float(r))] for t, e, r in zip(tickers, res.residuals, res.regressed)])
    _write_rows(out_dir / "coefficients.csv", ["factor", "coefficient"],
                [[c, repr(float(b))] for c, b in zip(res.columns, res.coefficients)])
    print(f"regressed {len(tickers)} returns over {len(res.columns)} columns")
    if res.dropped:
        print(f"dropped dependent columns: {', '.join(res.dropped)}")
    if opts["shape"]:
        shaping = StrategyShaping(opts["shape"], opts["investment"], opts["kappa"])
        h = holdings_from_residuals(res.regressed, shaping)
        if h.kappa is not None:
            logger.info("kappa = %r", h.kappa)
        _write_rows(out_dir / "holdings.csv", ["ticker", "holding"],
                    [[t, repr(float(d))] for t, d in zip(tickers, h.dollars)])
        print(f"gross = {math.fsum(np.abs(h.dollars))!r}  net = {h.mishedge!r}")
    return EXIT_OK


def cmd_synth(opts, out_dir, seed):
    if not opts["spec"]:
        raise ValidationError("synth needs --spec")
    spec = synthetic_spec_from_file(opts["spec"], seed)
    panel = generate_synthetic_panel(spec)
    write_price_panel(panel, out_dir / "prices.csv")
    write_classification(spec.classification, out_dir / "classification.csv")
    k = spec.loadings.shape[1]
    write_factor_model(
        FactorModel(spec.xi, spec.loadings, spec.factor_cov, spec.tickers, tuple(f"f{a}" for a in range(k))),
        out_dir / "factor_model",
    )
    print(f"wrote {panel.n_tickers} tickers x {panel.n_dates} dates to {out_dir}")
    return EXIT_OK


COMMANDS = {"backtest": cmd_backtest, "optimize": cmd_optimize, "regress": cmd_regress, "synth": cmd_synth}


def build_parser():
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="flat key = value file; command-line flags take precedence")
    common.add_argument("--out-dir", help="output directory (default: current directory)")
    common.add_argument("--seed", type=int, help="override the random seed of synthetic inputs")
    common.add_argument("--no-timestamp", action="store_true", help="omit timestamps from logs and outputs")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="meanrev", description=__doc__.split("\n\n")[0], parents=[common])
    subs = parser.add_subparsers(dest="command", required=True)

    def sub(name, help_text):
        sp = subs.add_parser(name, help=help_text, parents=[common], argument_default=argparse.SUPPRESS)
        sp.option_defaults = {}
        plain = sp.add_argument

        def add(*flags, default=None, **kw):
            # defaults live outside argparse so explicit flags can be told apart
            action = plain(*flags, **kw)
            sp.option_defaults[action.dest] = default
            return action

        sp.add_argument = add
        return sp

    p = sub("backtest", "run the intraday mean-reversion backtest")
    p.add_argument("--prices", default=None)
    p.add_argument("--class", dest="classification", default=None)
    p.add_argument("--seed-synthetic", default=None, metavar="SPEC", help="generate the panel from a synthetic spec")
    p.add_argument("--level", choices=LEVELS, default="industry")
    p.add_argument("--normalize", action="store_true", default=False)
    p.add_argument("--compare", action="store_true", default=False, help="run raw and normalized, write a diff")
    p.add_argument("--investment", type=float, default=1.0e7)
    p.add_argument("--top-n", type=int, default=2000)
    p.add_argument("--addv-days", type=int, default=21)
    p.add_argument("--period", type=int, default=21)
    p.add_argument("--start", type=_parse_date, default=None)
    p.add_argument("--end", type=_parse_date, default=None)

    p = sub("optimize", "solve a bounded cost-aware optimization bundle")
    p.add_argument("--bundle", default=None, help="directory with assets.csv and factor-model files")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--sharpe-search", action="store_true", default=False)
    p.add_argument("--grid", default=None, help="comma-separated lambda values for --sharpe-search")
    p.add_argument("--mode", choices=co.MODES, default="incremental")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--kkt-tol", type=float, default=1e-8)
    p.add_argument("--check-kkt", default=None, metavar="SOLUTION", help="certify an existing solution CSV")

    p = sub("regress", "cross-sectional regression and holdings")
    p.add_argument("--returns", default=None)
    p.add_argument("--loadings", default=None)
    p.add_argument("--weights", choices=("unit", "inverse-variance"), default="unit")
    p.add_argument("--variances", default=None)
    p.add_argument("--intercept", action="store_true", default=False)
    p.add_argument("--drop-dependent", action="store_true", default=False)
    p.add_argument("--shape", choices=SHAPING_KINDS[:-1], default=None)
    p.add_argument("--kappa", type=float, default=None)
    p.add_argument("--investment", type=float, default=1.0)

    p = sub("synth", "generate a synthetic price panel")
    p.add_argument("--spec", default=None)
    return parser


def _setup_logging(out_dir, timestamp, verbose):
    fmt = "%(asctime)s %(levelname)s %(name)s: %(message)s" if timestamp else "%(levelname)s %(name)s: %(message)s"
    root = logging.getLogger("meanrev")
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False
    for h in (logging.StreamHandler(sys.stderr), logging.FileHandler(out_dir / "run.log", mode="w")):
        h.setFormatter(logging.Formatter(fmt))
        root.addHandler(h)
    return root


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    args = vars(ns)
    command = args.pop("command")
    handlers = []
    try:
        file_values = read_key_values(args["config"]) if "config" in args else {}
        out_dir = Path(args.get("out_dir", file_values.get("out_dir", ".")))
        seed = args.get("seed", int(file_values["seed"]) if "seed" in file_values else None)
        no_ts = args.get("no_timestamp", _to_bool(file_values.get("no_timestamp", "false")))
        verbose = args.get("verbose", False)
        sub = parser._subparsers._group_actions[0].choices[command]
        opts = _resolve(sub, argparse.Namespace(**{k: v for k, v in args.items() if k not in GLOBAL_KEYS}),
                        file_values)
        out_dir.mkdir(parents=True, exist_ok=True)
        root = _setup_logging(out_dir, not no_ts, verbose)
        handlers = list(root.handlers)
        write_resolved_config(out_dir / "resolved_config.txt", command,
                              {**opts, "out_dir": str(out_dir), "seed": seed}, timestamp=not no_ts)
        return COMMANDS[command](opts, out_dir, seed)
    except NonConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except MeanRevError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        name = exc.filename if exc.filename is not None else ""
        print(f"error: cannot access {name}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        for h in handlers:
            logging.getLogger("meanrev").removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
