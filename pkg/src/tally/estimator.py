"""Monte Carlo estimators of the number of contingency tables.

* ``plain``: average of f over uniform simplex points (unbiased).
* ``phi``: average of phi alone, the log-concave lower-order approximation.
* ``full``: (integral of phi) * (mean of truncated p over the phi-chain).

All aggregation happens in log space; standard errors are formed in linear
scale from the first two moments and mapped to log scale by the delta method
(log_std_error = linear SE / estimate).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import logsumexp

from .exact import count_tables, log_per_block_batch
from .margins import Margins
from .sampling import ChainConfig, sample_nu, sample_simplex_uniform
from .scaling import log_f_constant, log_p_batch, log_phi_batch

CHUNK = 1 << 15


@dataclass(frozen=True)
class EstimateReport:
    log_estimate: float
    log_std_error: float
    samples_used: int
    method: str
    tau_log: float | None = None
    truncated_fraction: float | None = None
    wall_time: float = 0.0
    knobs: dict[str, Any] = field(default_factory=dict)
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def estimate(self) -> float:
        return math.exp(self.log_estimate)

    @property
    def std_error(self) -> float:
        """Linear-scale standard error."""
        return self.estimate * self.log_std_error

    def to_dict(self, timing: bool = False) -> dict[str, Any]:
        out: dict[str, Any] = {
            "method": self.method,
            "log_estimate": self.log_estimate,
            "log10_estimate": self.log_estimate / math.log(10),
            "estimate": self.estimate,
            "log_std_error": self.log_std_error,
            "std_error": self.std_error,
            "samples_used": self.samples_used,
            "tau_log": None if self.tau_log is None or math.isinf(self.tau_log) else self.tau_log,
            "truncated_fraction": self.truncated_fraction,
            "knobs": self.knobs,
            "diagnostics": self.diagnostics,
        }
        if timing:
            out["wall_time"] = self.wall_time
        return out


def log_mean_and_rel_se(log_values: np.ndarray) -> tuple[float, float]:
    """ln of the sample mean of exp(log_values) and the relative standard error."""
    k = log_values.size
    log_mean = float(logsumexp(log_values)) - math.log(k)
    if k < 2:
        return log_mean, math.inf
    log_m2 = float(logsumexp(2 * log_values)) - math.log(k)
    rel_var = max(math.exp(log_m2 - 2 * log_mean) - 1.0, 0.0) * k / (k - 1)
    return log_mean, math.sqrt(rel_var / k)


def _chunks(k: int):
    done = 0
    while done < k:
        size = min(CHUNK, k - done)
        yield size
        done += size


def estimate_plain(margins: Margins, k: int, rng: np.random.Generator) -> EstimateReport:
    """Average of f(X) = const * per A(X) over k uniform simplex points."""
    if k < 1:
        raise ValueError("k must be >= 1")
    t0 = time.perf_counter()
    m, n = margins.shape
    logs = []
    for size in _chunks(k):
        Xs = sample_simplex_uniform(m, n, rng, size)
        logs.append(log_per_block_batch(margins, Xs))
    log_f = np.concatenate(logs) + log_f_constant(margins)
    log_est, rel_se = log_mean_and_rel_se(log_f)
    return EstimateReport(
        log_estimate=log_est,
        log_std_error=rel_se,
        samples_used=k,
        method="plain",
        wall_time=time.perf_counter() - t0,
        knobs={"samples": k},
    )


def estimate_phi_integral(margins: Margins, k: int, rng: np.random.Generator, tol: float = 1e-10) -> tuple[float, float]:
    """ln of the simplex average of phi over k uniform points, and its log-domain SE."""
    if k < 1:
        raise ValueError("k must be >= 1")
    m, n = margins.shape
    logs = [log_phi_batch(sample_simplex_uniform(m, n, rng, size), margins, tol) for size in _chunks(k)]
    return log_mean_and_rel_se(np.concatenate(logs))


def integrated_autocorr_time(chains: list[np.ndarray]) -> float:
    """Integrated autocorrelation time of chains sharing one target.

    Per-chain autocovariances are combined with the between-chain variance so
    that chains which have not yet mixed with each other lengthen the estimate;
    the sum is cut where consecutive pairs of autocorrelations stop being positive.
    """
    n = min(c.size for c in chains)
    if n < 4:
        return 1.0
    xs = np.stack([c[:n] for c in chains])
    means = xs.mean(axis=1)
    centred = xs - means[:, None]
    spectrum = np.fft.rfft(centred, 2 * n, axis=1)
    acov = (np.fft.irfft(spectrum * np.conj(spectrum), 2 * n, axis=1)[:, :n] / n).mean(axis=0)
    within = acov[0] * n / (n - 1)
    between = float(means.var(ddof=1)) if len(chains) > 1 else 0.0
    var_plus = within * (n - 1) / n + between
    if var_plus <= 0:
        return 1.0
    rho = 1.0 - (within - acov) / var_plus
    total = 0.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        total += pair
    return max(2.0 * total - 1.0, 1.0)


def chain_rel_se(values: np.ndarray, chains: int = 1) -> float:
    """Relative SE of the mean of ``chains`` concatenated Markov chains, from sigma^2 tau / k."""
    k = values.size
    mean = float(values.mean())
    if k < 2 or mean == 0:
        return math.inf
    per = -(-k // chains)
    parts = [values[i : i + per] for i in range(0, k, per)]
    tau = integrated_autocorr_time(parts)
    return math.sqrt(float(values.var(ddof=1)) * tau / k) / abs(mean)


def truncation_log_tau(margins: Margins, delta_exponent: float | None) -> float:
    """ln tau = delta_exponent * (ln N)^2; ``None`` or ``inf`` disables truncation."""
    if delta_exponent is None or math.isinf(delta_exponent):
        return math.inf
    return float(delta_exponent) * math.log(margins.N) ** 2


def truncated_mean(log_p: np.ndarray, log_tau: float) -> tuple[float, float]:
    """Mean of min(p, tau) and the fraction of samples that were truncated."""
    clipped = np.minimum(log_p, log_tau)
    return float(np.exp(clipped).mean()), float((log_p > log_tau).mean())


def estimate_full(
    margins: Margins,
    k_phi: int,
    k_nu: int,
    delta_exponent: float | None,
    config: ChainConfig,
    rng: np.random.Generator,
    tol: float = 1e-10,
) -> EstimateReport:
    """Integral of phi times the chain average of p truncated at tau.

    The phi integral and the chain use independent child streams of ``rng``.
    ``delta_exponent=None`` (or ``inf``) disables truncation.
    """
    if k_phi < 1 or k_nu < 1:
        raise ValueError("k_phi and k_nu must be >= 1")
    t0 = time.perf_counter()
    phi_rng, nu_rng = rng.spawn(2)
    log_int, rel_phi = estimate_phi_integral(margins, k_phi, phi_rng, tol)
    chain = sample_nu(margins, config, k_nu, nu_rng, tol)
    lp = log_p_batch(chain.samples, margins, tol)
    log_tau = truncation_log_tau(margins, delta_exponent)
    p_bar = np.exp(np.minimum(lp, log_tau))
    mean_p = float(p_bar.mean())
    truncated = float((lp > log_tau).mean())
    cfg = config.resolved(margins)
    rel_p = chain_rel_se(p_bar, cfg.chains)
    if not math.isfinite(rel_p):
        rel_p = 0.0
    mn = margins.m * margins.n
    mass_floor = (1 - mn * cfg.delta_interior) ** (margins.N + mn - 1)
    return EstimateReport(
        log_estimate=log_int + math.log(mean_p),
        log_std_error=math.sqrt(rel_phi**2 + rel_p**2),
        samples_used=k_phi + k_nu,
        method="full",
        tau_log=log_tau,
        truncated_fraction=truncated,
        wall_time=time.perf_counter() - t0,
        knobs={
            "k_phi": k_phi,
            "k_nu": k_nu,
            "delta_exponent": delta_exponent,
            "chain": cfg.to_dict(),
        },
        diagnostics={
            "log_phi_integral": log_int,
            "log_phi_integral_rel_se": rel_phi,
            "mean_p_bar": mean_p,
            "mean_p_bar_rel_se": rel_p,
            "max_log_p": float(lp.max()),
            "acceptance_rate": chain.acceptance_rate,
            "restarts": chain.restarts,
            "delta_interior_mass_floor": mass_floor,
        },
    )


def estimate_phi_only(margins: Margins, k: int, rng: np.random.Generator, tol: float = 1e-10) -> EstimateReport:
    t0 = time.perf_counter()
    log_int, rel = estimate_phi_integral(margins, k, rng, tol)
    return EstimateReport(
        log_estimate=log_int,
        log_std_error=rel,
        samples_used=k,
        method="phi_only",
        wall_time=time.perf_counter() - t0,
        knobs={"samples": k},
    )


@dataclass(frozen=True)
class Comparison:
    log_error: float
    z_score: float
    passed: bool
    log_exact: float

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def compare_to_exact(margins: Margins, report: EstimateReport, sigmas: float = 3.0) -> Comparison:
    """Log error of an estimate against the exact count, in units of its log SE."""
    log_exact = math.log(count_tables(margins))
    err = report.log_estimate - log_exact
    if report.log_std_error > 0:
        z = err / report.log_std_error
    else:
        z = 0.0 if err == 0 else math.copysign(math.inf, err)
    return Comparison(err, z, abs(z) <= sigmas, log_exact)
