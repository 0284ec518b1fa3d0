"""Command-line interface.

    tally [--seed S] [--format json|csv] [--timings] COMMAND [margins.json] [options]

Every command reads a margins file ``{"rows": [...], "cols": [...]}`` except
``benchmark``, which reads a directory of them.  Reports go to standard output.
Exit status: 0 on success, 1 on invalid input, 2 when a budget or an iteration
cap is hit.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import estimator, exact, margins as margins_mod, sampling, scaling, typical
from .errors import BudgetExceededError, ConvergenceError, TallyError
from .margins import Margins

EXIT_OK, EXIT_INVALID, EXIT_BUDGET = 0, 1, 2
BENCHMARK_VERSION = 1
BENCHMARK_COLUMNS = [
    "instance",
    "status",
    "error",
    "N",
    "m",
    "n",
    "golden_ratio",
    "linear",
    "alpha_min_upper",
    "beta_max_lower",
    "ln_count",
    "log_rho",
    "upper_bound_ok",
    "plain_log_estimate",
    "plain_log_std_error",
    "full_log_estimate",
    "full_log_std_error",
    "truncated_fraction",
]
TIMING_COLUMNS = ["plain_wall_time", "full_wall_time"]
SUITES = ("thm52", "thm81", "lemma82", "lemma91", "lemma93", "lemma113", "factorization")


class InputError(ValueError):
    """Unreadable or malformed input file."""


# --------------------------------------------------------------------------- input


def read_json(path: str | Path) -> Any:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def read_margins(path: str | Path) -> Margins:
    return Margins.from_dict(read_json(path))


def log10_of_int(value: int) -> float | None:
    return math.log10(value) if value > 0 else None


def count_fields(value: int) -> dict[str, Any]:
    return {"count": str(value), "log10_count": log10_of_int(value)}


def _log10(x: float | None) -> float | None:
    return None if x is None or not math.isfinite(x) else x / math.log(10)


# --------------------------------------------------------------------------- commands


def cmd_exact(args, m: Margins) -> dict[str, Any]:
    value = exact.count_tables(m)
    return {**count_fields(value), "ln_count": math.log(value), "dp_states_bound": exact.dp_state_estimate(m)}


def _chain_config(args) -> sampling.ChainConfig:
    return sampling.ChainConfig(burn_in=args.burnin, thinning=args.thin, seed=args.seed, chains=args.chains)


def cmd_estimate(args, m: Margins) -> dict[str, Any]:
    rng = sampling.substream(args.seed, 1)
    if args.method == "plain":
        report = estimator.estimate_plain(m, args.samples, rng)
    elif args.method == "phi":
        report = estimator.estimate_phi_only(m, args.samples, rng)
    else:
        delta = None if args.delta_exponent is None or math.isinf(args.delta_exponent) else args.delta_exponent
        report = estimator.estimate_full(m, args.samples, args.nu_samples, delta, _chain_config(args), rng)
    out = report.to_dict(timing=args.timings)
    try:
        out["comparison"] = estimator.compare_to_exact(m, report).to_dict()
    except BudgetExceededError:
        out["comparison"] = None
    return out


def cmd_typical(args, m: Margins) -> dict[str, Any]:
    t = typical.solve_typical(m, tol=args.tol)
    return {**t.to_dict(), "log10_rho": _log10(t.log_rho)}


def cmd_scale(args, m: Margins) -> dict[str, Any]:
    X = np.asarray(read_json(args.matrix), dtype=float)
    res = scaling.sinkhorn(X, m, tol=args.tol)
    rep = scaling.factor_report(X / X.sum(), m, tol=args.tol)
    return {"scaling": res.to_dict(), "factorization": rep.to_dict()}


def cmd_bounds(args, m: Margins) -> dict[str, Any]:
    t = typical.solve_typical(m)
    lower, upper = margins_mod.typical_entry_bounds(m)
    out: dict[str, Any] = {
        "log_rho": t.log_rho,
        "log10_rho": _log10(t.log_rho),
        "log_p_upper_bound": scaling.p_upper_bound(m),
        "typical_entry_bounds": {"lower": lower, "upper": upper},
        "typical_entry_range": {"min": float(t.entries.min()), "max": float(t.entries.max())},
    }
    try:
        value = exact.count_tables(m)
        out["ln_count"] = math.log(value)
        out["upper_bound_holds"] = math.log(value) <= t.log_rho + 1e-9
    except BudgetExceededError as exc:
        out["ln_count"] = None
        out["upper_bound_holds"] = None
        out["exact_skipped"] = exc.budget
    return out


def cmd_smoothness(args, m: Margins) -> dict[str, Any]:
    t = typical.solve_typical(m)
    rep = margins_mod.classify_smoothness(
        m, t, golden_rho=args.golden_rho, golden_eps=args.golden_eps, linear_beta=args.linear_beta, linear_eps=args.linear_eps
    )
    return {"stats": margins_mod.margin_stats(m).to_dict(), "smoothness": rep.to_dict()}


def cmd_sample_tables(args, m: Margins) -> dict[str, Any]:
    tables = exact.sample_tables_uniform(m, sampling.substream(args.seed, 2), args.count)
    return {**count_fields(exact.count_tables(m)), "tables": tables.tolist()}


# --------------------------------------------------------------------------- check suites


def _random_positive(m: Margins, rng: np.random.Generator) -> np.ndarray:
    return np.exp(rng.normal(0.0, 1.0, m.shape))


def check_scaled_entry_bound(m: Margins, trials: int, rng) -> dict[str, Any]:
    violations, worst = 0, -math.inf
    for _ in range(trials):
        lhs, rhs = scaling.scaled_entry_bound_sides(_random_positive(m, rng), m)
        violations += int((lhs > rhs + 1e-8).sum())
        worst = max(worst, float((lhs - rhs).max()))
    return {"violations": violations, "max_excess": worst, "passed": violations == 0}


def check_kl_minimality(m: Margins, trials: int, rng) -> dict[str, Any]:
    reports = [scaling.variational_reports(_random_positive(m, rng), m, 100, rng) for _ in range(trials)]
    v = sum(r.kl_violations for r in reports)
    return {"violations": v, "min_gap": min(r.kl_min_gap for r in reports), "passed": v == 0}


def check_weighted_log_growth(m: Margins, trials: int, rng) -> dict[str, Any]:
    reports = [scaling.variational_reports(_random_positive(m, rng), m, 0, rng) for _ in range(trials)]
    v = sum(not r.growth_ok for r in reports)
    return {"violations": v, "min_gap": min(r.growth_lhs - r.growth_rhs for r in reports), "passed": v == 0}


def check_laplace_identity(m: Margins, trials: int, rng) -> dict[str, Any]:
    # lambda < 1/2 keeps the second moment of exp(sum lambda x) finite
    lam = rng.uniform(-0.5, 0.3, m.shape)
    rep = sampling.empirical_tail_checks(m, trials, rng, lambdas=lam)
    return {
        "lambdas": lam.tolist(),
        "mc_mean": rep.laplace_mc_mean,
        "mc_std_error": rep.laplace_mc_stderr,
        "exact": rep.laplace_exact,
        "z": rep.laplace_z,
        "passed": rep.laplace_ok,
    }


def check_sum_tail(m: Margins, trials: int, rng) -> dict[str, Any]:
    rep = sampling.empirical_tail_checks(m, trials, rng)
    return {
        "threshold": rep.sum_threshold,
        "frequency": rep.sum_exceed_frequency,
        "ceiling": rep.sum_exceed_ceiling,
        "sigma": rep.sum_exceed_sigma,
        "log_p_quantiles": rep.log_p_quantiles,
        "passed": rep.sum_ok,
    }


def check_simplex_gamma_identity(m: Margins, trials: int, rng) -> dict[str, Any]:
    worst = 0.0
    for _ in range(trials):
        k = int(rng.integers(1, 6))
        c = int(rng.integers(0, 9))
        res = exact.simplex_sum(k, c, rng.uniform(-2.0, 1.0, k).tolist())
        worst = max(worst, abs(res.brute - res.closed) / abs(res.closed))
    return {"max_relative_gap": worst, "passed": worst <= 1e-10}


def check_factorization(m: Margins, trials: int, rng) -> dict[str, Any]:
    Xs = sampling.sample_simplex_uniform(m.m, m.n, rng, trials)
    gap = float(np.abs(scaling.log_f_batch(Xs, m) - scaling.log_phi_batch(Xs, m) - scaling.log_p_batch(Xs, m)).max())
    return {"max_gap": gap, "passed": gap <= 1e-6}


CHECKS: dict[str, Callable[..., dict[str, Any]]] = {
    "thm52": check_scaled_entry_bound,
    "thm81": check_kl_minimality,
    "lemma82": check_weighted_log_growth,
    "lemma91": check_laplace_identity,
    "lemma93": check_sum_tail,
    "lemma113": check_simplex_gamma_identity,
    "factorization": check_factorization,
}


def cmd_check(args, m: Margins) -> dict[str, Any]:
    if args.trials < 1:
        raise ValueError("--trials must be >= 1")
    rng = sampling.substream(args.seed, 3, SUITES.index(args.suite))
    return {"suite": args.suite, "trials": args.trials, **CHECKS[args.suite](m, args.trials, rng)}


# --------------------------------------------------------------------------- benchmark


def benchmark_row(path: Path, index: int, args) -> dict[str, Any]:
    row: dict[str, Any] = {"instance": path.name, "status": "ok", "error": ""}
    try:
        m = read_margins(path)
        row.update(N=m.N, m=m.m, n=m.n)
        t = typical.solve_typical(m)
        sm = margins_mod.classify_smoothness(m, t)
        row.update(
            golden_ratio=sm.golden_ratio,
            linear=sm.linear,
            alpha_min_upper=sm.alpha_min_upper,
            beta_max_lower=sm.beta_max_lower,
            log_rho=t.log_rho,
        )
        ln_count = math.log(exact.count_tables(m))
        row.update(ln_count=ln_count, upper_bound_ok=ln_count <= t.log_rho + 1e-9)
        plain = estimator.estimate_plain(m, args.samples, sampling.substream(args.seed, 4, index, 0))
        row.update(plain_log_estimate=plain.log_estimate, plain_log_std_error=plain.log_std_error)
        full = estimator.estimate_full(
            m,
            args.samples,
            args.nu_samples,
            args.delta_exponent,
            _chain_config(args),
            sampling.substream(args.seed, 4, index, 1),
        )
        row.update(
            full_log_estimate=full.log_estimate,
            full_log_std_error=full.log_std_error,
            truncated_fraction=full.truncated_fraction,
            plain_wall_time=plain.wall_time,
            full_wall_time=full.wall_time,
        )
    except (TallyError, ValueError) as exc:
        row["status"] = error_code(exc)
        row["error"] = str(exc)
    return row


def write_benchmark(rows: list[dict[str, Any]], out, timings: bool) -> None:
    columns = BENCHMARK_COLUMNS + (TIMING_COLUMNS if timings else [])
    out.write(f"# tally-benchmark v{BENCHMARK_VERSION} columns={len(columns)}\n")
    writer = csv.DictWriter(out, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _csv_value(row.get(k)) for k in columns})


def _csv_value(v: Any) -> Any:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def cmd_benchmark(args) -> dict[str, Any]:
    corpus = Path(args.corpus)
    if not corpus.is_dir():
        raise InputError(f"corpus directory {corpus} does not exist")
    files = sorted(corpus.glob("*.json"))
    rows = [benchmark_row(p, i, args) for i, p in enumerate(files)]
    with open(args.out, "w", newline="") as fh:
        write_benchmark(rows, fh, args.timings)
    return {"instances": len(rows), "failed": sum(r["status"] != "ok" for r in rows), "out": str(args.out)}


# --------------------------------------------------------------------------- output


def flatten(obj: Any, prefix: str = "") -> list[tuple[str, Any]]:
    if isinstance(obj, dict):
        items = []
        for k, v in obj.items():
            items.extend(flatten(v, f"{prefix}.{k}" if prefix else str(k)))
        return items
    if isinstance(obj, (list, tuple)):
        items = []
        for i, v in enumerate(obj):
            items.extend(flatten(v, f"{prefix}.{i}" if prefix else str(i)))
        return items
    return [(prefix, obj)]


def render(report: dict[str, Any], fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report, indent=2, allow_nan=False, default=_json_default) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["field", "value"])
    for key, value in flatten(json.loads(json.dumps(report, default=_json_default))):
        writer.writerow([key, _csv_value(value)])
    return buf.getvalue()


def _json_default(o: Any) -> Any:
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _sanitize(obj: Any) -> Any:
    # JSON has no inf/nan; encode them as strings
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, np.generic):
        return _sanitize(obj.item())
    return obj


def error_code(exc: BaseException) -> str:
    if isinstance(exc, BudgetExceededError):
        return f"budget_exceeded:{exc.budget}"
    if isinstance(exc, ConvergenceError):
        return "convergence"
    return "invalid_input"


# --------------------------------------------------------------------------- parser


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _float_or_inf(text: str) -> float:
    return math.inf if text.lower() in ("inf", "none", "off") else float(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tally", description="Count and estimate contingency tables.")
    p.add_argument("--seed", type=int, default=0, help="master seed for every random stream (default 0)")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--timings", action="store_true", help="include wall-clock times (breaks byte-identical reruns)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_margins(name: str, help_: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("margins", help='JSON file {"rows": [...], "cols": [...]}')
        return sp

    with_margins("exact", "exact count by dynamic programming")

    sp = with_margins("estimate", "Monte Carlo estimate of the count")
    sp.add_argument("--method", choices=("plain", "phi", "full"), default="plain")
    sp.add_argument("--samples", type=_positive_int, default=100_000)
    sp.add_argument("--nu-samples", type=_positive_int, default=2_000)
    sp.add_argument("--delta-exponent", type=_float_or_inf, default=1.0, help="'inf' disables truncation")
    sp.add_argument("--burnin", type=int, default=1000)
    sp.add_argument("--thin", type=_positive_int, default=10)
    sp.add_argument("--chains", type=_positive_int, default=1)

    sp = with_margins("typical", "typical table and log rho")
    sp.add_argument("--tol", type=float, default=typical.DEFAULT_TOL)

    sp = with_margins("scale", "scale a positive matrix to the margins")
    sp.add_argument("--matrix", required=True, help="JSON file holding a positive m x n matrix")
    sp.add_argument("--tol", type=float, default=scaling.DEFAULT_TOL)

    with_margins("bounds", "upper estimate rho, entry bounds on the typical table, bound on p")

    sp = with_margins("smoothness", "smoothness parameters and class flags")
    sp.add_argument("--golden-rho", type=float, default=2.0)
    sp.add_argument("--golden-eps", type=float, default=0.1)
    sp.add_argument("--linear-beta", type=float, default=1.5)
    sp.add_argument("--linear-eps", type=float, default=0.5)

    sp = with_margins("sample-tables", "uniformly random tables")
    sp.add_argument("--count", type=_positive_int, default=10)

    sp = with_margins("check", "run a property suite")
    sp.add_argument("--suite", choices=SUITES, required=True)
    sp.add_argument("--trials", type=int, default=100)

    sp = sub.add_parser("benchmark", help="run exact and estimated counts over a corpus")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--samples", type=_positive_int, default=20_000)
    sp.add_argument("--nu-samples", type=_positive_int, default=1_000)
    sp.add_argument("--delta-exponent", type=_float_or_inf, default=1.0)
    sp.add_argument("--burnin", type=int, default=1000)
    sp.add_argument("--thin", type=_positive_int, default=5)
    sp.add_argument("--chains", type=_positive_int, default=8)
    return p


COMMANDS: dict[str, Callable[..., dict[str, Any]]] = {
    "exact": cmd_exact,
    "estimate": cmd_estimate,
    "typical": cmd_typical,
    "scale": cmd_scale,
    "bounds": cmd_bounds,
    "smoothness": cmd_smoothness,
    "sample-tables": cmd_sample_tables,
    "check": cmd_check,
}


def knobs_of(args) -> dict[str, Any]:
    skip = {"command", "format", "verbose", "timings", "seed", "margins"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def run(args) -> tuple[int, str]:
    """Execute parsed arguments; returns (exit status, text for standard output)."""
    t0 = time.perf_counter()
    header: dict[str, Any] = {"command": args.command, "seed": args.seed, "knobs": knobs_of(args)}
    try:
        if args.command == "benchmark":
            body = cmd_benchmark(args)
        else:
            m = read_margins(args.margins)
            header["margins"] = m.to_dict()
            body = COMMANDS[args.command](args, m)
    except (BudgetExceededError, ConvergenceError) as exc:
        return EXIT_BUDGET, _error_text(header, exc, args.format)
    except (TallyError, ValueError) as exc:
        return EXIT_INVALID, _error_text(header, exc, args.format)
    report = {**header, **body}
    if args.timings:
        report["wall_time"] = time.perf_counter() - t0
    return EXIT_OK, render(_sanitize(report), args.format)


def _error_text(header: dict[str, Any], exc: BaseException, fmt: str) -> str:
    err: dict[str, Any] = {"code": error_code(exc), "message": str(exc)}
    if isinstance(exc, BudgetExceededError):
        err["budget"] = exc.budget
        err["limit"] = exc.limit
    return render(_sanitize({**header, "error": err}), fmt)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    status, text = run(args)
    sys.stdout.write(text)
    if status != EXIT_OK:
        err = json.loads(text)["error"] if args.format == "json" else None
        sys.stderr.write(f"tally: {err['code']}: {err['message']}\n" if err else "tally: failed, see report\n")
    return status


if __name__ == "__main__":
    sys.exit(main())
