"""Matrix scaling and the factorization f = p * phi of the integrand.

Conventions: a positive matrix X is written x_ij = y_ij * lambda_i * mu_j with Y
having row sums R and column sums C; the free rescaling of the multipliers is
fixed by lambda_1 = 1.  Dividing block (i, j) of A(X) by r_i c_j lambda_i mu_j
gives the doubly stochastic matrix B(X), so

    per A(X) = prod (lambda_i r_i)^r_i * prod (mu_j c_j)^c_j * per B(X).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import xlogy

from .errors import BudgetExceededError, ConvergenceError
from .exact import (
    block_matrix,
    check_budget,
    log_factorial_sum,
    log_per_block_batch,
    per_block,
    sample_tables_uniform,
)
from .margins import Margins

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 100_000


@dataclass(frozen=True)
class ScalingResult:
    Y: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    iterations: int
    residual: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "Y": self.Y.tolist(),
            "lambda": self.lam.tolist(),
            "mu": self.mu.tolist(),
            "log_lambda": np.log(self.lam).tolist(),
            "log_mu": np.log(self.mu).tolist(),
            "iterations": self.iterations,
            "residual": self.residual,
        }


def _check_positive(X, margins: Margins) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.shape[-2:] != margins.shape:
        raise ValueError(f"matrix shape {X.shape[-2:]} does not match margins {margins.shape}")
    if not np.isfinite(X).all() or not (X > 0).all():
        raise ValueError("scaling requires strictly positive finite matrices")
    return X


def _sinkhorn_core(Xs: np.ndarray, rows: np.ndarray, cols: np.ndarray, tol: float, max_iter: int):
    """Alternating row/column normalization on a stack (k, m, n).

    Returns the inverse multipliers (alpha, beta) with Y = alpha_i X beta_j, the
    sweep count and the per-matrix relative residual.
    """
    k, m, n = Xs.shape
    # pre-normalise each matrix so its total is N; multipliers absorb it
    totals = Xs.sum(axis=(1, 2))
    Z = Xs * (rows.sum() / totals)[:, None, None]
    alpha = np.ones((k, m))
    beta = np.ones((k, n))
    res = np.full(k, np.inf)
    active = np.arange(k)
    Za, ba = Z, beta
    it = 0
    while active.size:
        it += 1
        aa = rows[None, :] / (Za @ ba[:, :, None])[:, :, 0]
        ba = cols[None, :] / (aa[:, None, :] @ Za)[:, 0, :]
        row_sums = aa * (Za @ ba[:, :, None])[:, :, 0]
        r_act = np.max(np.abs(row_sums - rows[None, :]) / rows[None, :], axis=1)
        done = r_act <= tol
        if done.any():
            idx = active[done]
            alpha[idx], beta[idx], res[idx] = aa[done], ba[done], r_act[done]
            keep = ~done
            active, Za, ba = active[keep], Za[keep], ba[keep]
        if active.size and it >= max_iter:
            raise ConvergenceError(
                f"Sinkhorn did not reach tolerance {tol:g} in {max_iter} sweeps (residual {r_act.max():.3e})"
            )
    alpha = alpha * (rows.sum() / totals)[:, None]
    return alpha, beta, it, res


def sinkhorn(X, margins: Margins, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> ScalingResult:
    """Scale a positive matrix to margins (R, C).

    The residual is the largest relative violation of a row or column sum; the
    loop stops once it is at most ``tol``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    X = _check_positive(X, margins)
    rows = np.asarray(margins.rows, dtype=float)
    cols = np.asarray(margins.cols, dtype=float)
    alpha, beta, it, res = _sinkhorn_core(X[None], rows, cols, tol, max_iter)
    alpha, beta = alpha[0], beta[0]
    Y = alpha[:, None] * X * beta[None, :]
    lam = 1.0 / alpha
    mu = 1.0 / beta
    lam, mu = lam / lam[0], mu * lam[0]
    col_res = np.max(np.abs(Y.sum(axis=0) - cols) / cols)
    return ScalingResult(Y=Y, lam=lam, mu=mu, iterations=it, residual=float(max(res[0], col_res)))


def sinkhorn_log_multipliers(
    Xs, margins: Margins, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
) -> tuple[np.ndarray, np.ndarray]:
    """ln lambda and ln mu for a stack of matrices (k, m, n), normalized to lambda_1 = 1."""
    Xs = _check_positive(Xs, margins)
    rows = np.asarray(margins.rows, dtype=float)
    cols = np.asarray(margins.cols, dtype=float)
    alpha, beta, _, _ = _sinkhorn_core(Xs, rows, cols, tol, max_iter)
    log_lam = -np.log(alpha)
    log_mu = -np.log(beta)
    shift = log_lam[:, :1]
    return log_lam - shift, log_mu + shift


def _project(Xs: np.ndarray) -> np.ndarray:
    return Xs / Xs.sum(axis=(-2, -1), keepdims=True)


# --------------------------------------------------------------------------- phi, p, f


def log_phi_constant(margins: Margins) -> float:
    N = margins.N
    mn = margins.m * margins.n
    rows, cols = margins.rows, margins.cols
    return (
        math.lgamma(N + mn)
        + math.lgamma(N + 1)
        - math.lgamma(mn)
        - N * math.log(N)
        + math.fsum(r * math.log(r) - math.lgamma(r + 1) for r in rows)
        + math.fsum(c * math.log(c) - math.lgamma(c + 1) for c in cols)
    )


def log_f_constant(margins: Margins) -> float:
    mn = margins.m * margins.n
    return (
        math.lgamma(margins.N + mn)
        - math.lgamma(mn)
        - log_factorial_sum(margins.rows)
        - log_factorial_sum(margins.cols)
    )


def log_phi_batch(Xs, margins: Margins, tol: float = DEFAULT_TOL) -> np.ndarray:
    """ln phi for each matrix of a stack; each is first projected onto the simplex."""
    Xs = _project(_check_positive(Xs, margins))
    log_lam, log_mu = sinkhorn_log_multipliers(Xs, margins, tol)
    rows = np.asarray(margins.rows, dtype=float)
    cols = np.asarray(margins.cols, dtype=float)
    return log_phi_constant(margins) + log_lam @ rows + log_mu @ cols


def log_phi(X, margins: Margins, tol: float = DEFAULT_TOL) -> float:
    """ln phi(X), the log-concave capacity factor of the integrand.

    X is projected onto the simplex (divided by its total) before scaling.
    """
    return float(log_phi_batch(np.asarray(X, dtype=float)[None], margins, tol)[0])


def _log_p_from(log_per, log_lam, log_mu, margins: Margins):
    N = margins.N
    rows = np.asarray(margins.rows, dtype=float)
    cols = np.asarray(margins.cols, dtype=float)
    return (
        N * math.log(N)
        - math.lgamma(N + 1)
        + log_per
        - (log_lam + np.log(rows)) @ rows
        - (log_mu + np.log(cols)) @ cols
    )


def log_p_batch(Xs, margins: Margins, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Exact ln p for a stack of matrices, with the block permanent from the table expansion."""
    Xs = _project(_check_positive(Xs, margins))
    log_lam, log_mu = sinkhorn_log_multipliers(Xs, margins, tol)
    log_per = log_per_block_batch(margins, Xs)
    return _log_p_from(log_per, log_lam, log_mu, margins)


def log_p(X, margins: Margins, tol: float = DEFAULT_TOL) -> float:
    """ln p(X) = ln(N^N / N!) + ln per B(X), evaluated exactly through per A(X).

    Raises :class:`BudgetExceededError` when the DP is infeasible; use
    :func:`log_p_bracket` or :func:`factor_report` for the bracketed fallback.
    """
    X = _project(_check_positive(X, margins))
    res = sinkhorn(X, margins, tol)
    log_per = per_block(margins, X).log_magnitude
    return float(_log_p_from(log_per, np.log(res.lam), np.log(res.mu), margins))


def log_f(X, margins: Margins) -> float:
    """ln f(X) straight from its definition through per A(X), X projected onto the simplex."""
    X = _project(_check_positive(X, margins))
    return log_f_constant(margins) + per_block(margins, X).log_magnitude


def log_f_batch(Xs, margins: Margins) -> np.ndarray:
    Xs = _project(_check_positive(Xs, margins))
    return log_f_constant(margins) + log_per_block_batch(margins, Xs)


def p_upper_bound(margins: Margins) -> float:
    """ln of (N^N/N!) * min(prod r_i!/r_i^r_i, prod c_j!/c_j^c_j)."""
    N = margins.N
    rows_term = math.fsum(math.lgamma(r + 1) - r * math.log(r) for r in margins.rows)
    cols_term = math.fsum(math.lgamma(c + 1) - c * math.log(c) for c in margins.cols)
    return N * math.log(N) - math.lgamma(N + 1) + min(rows_term, cols_term)


def permanent_bracket(row_maxima, N: int | None = None) -> tuple[float, float]:
    """Log lower and upper bounds on the permanent of an N x N doubly stochastic matrix.

    Lower: van der Waerden, N!/N^N.  Upper: (tau/N)^N Gamma(1 + N/tau)^tau with
    tau the sum of the row maxima.
    """
    z = np.asarray(row_maxima, dtype=float)
    if N is None:
        N = z.size
    if z.size != N:
        raise ValueError(f"expected {N} row maxima, got {z.size}")
    tau = math.fsum(z.tolist())
    if tau < 1 - 1e-12:
        raise ValueError(f"sum of row maxima {tau} is below 1")
    tau = max(tau, 1.0)
    lower = math.lgamma(N + 1) - N * math.log(N)
    upper = N * math.log(tau / N) + tau * math.lgamma(1 + N / tau)
    return lower, upper


def doubly_stochastic_block(X, margins: Margins, tol: float = DEFAULT_TOL) -> np.ndarray:
    """The N x N matrix B(X): block (i, j) filled with y_ij / (r_i c_j)."""
    res = sinkhorn(X, margins, tol)
    rows = np.asarray(margins.rows, dtype=float)
    cols = np.asarray(margins.cols, dtype=float)
    return block_matrix(margins, res.Y / np.outer(rows, cols))


def block_row_maxima(Y: np.ndarray, margins: Margins) -> np.ndarray:
    rows = np.asarray(margins.rows, dtype=float)
    cols = np.asarray(margins.cols, dtype=float)
    z = (Y / np.outer(rows, cols)).max(axis=1)
    return np.repeat(z, margins.rows)


def log_p_bracket(X, margins: Margins, tol: float = DEFAULT_TOL) -> tuple[float, float]:
    """Interval for ln p(X) from the permanent bracket of B(X), capped by the global upper bound."""
    X = _project(_check_positive(X, margins))
    res = sinkhorn(X, margins, tol)
    lo, hi = permanent_bracket(block_row_maxima(res.Y, margins), margins.N)
    shift = margins.N * math.log(margins.N) - math.lgamma(margins.N + 1)
    return max(0.0, lo + shift), min(hi + shift, p_upper_bound(margins))


@dataclass(frozen=True)
class FactorReport:
    log_phi: float
    log_p: float | None
    log_f: float | None
    consistency_gap: float | None
    bracket: tuple[float, float] | None = field(default=None)

    @property
    def interval_valued(self) -> bool:
        return self.log_p is None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "log_phi": self.log_phi,
            "log_p": self.log_p,
            "log_f": self.log_f,
            "consistency_gap": self.consistency_gap,
        }
        if self.bracket is not None:
            out["bracket"] = {"log_p_lower": self.bracket[0], "log_p_upper": self.bracket[1]}
        return out


def factor_report(X, margins: Margins, tol: float = DEFAULT_TOL) -> FactorReport:
    """ln phi, ln p and the independently computed ln f at one point.

    Above the DP budget ln p and ln f are unavailable and the report carries the
    permanent-bracket interval for ln p instead.
    """
    lphi = log_phi(X, margins, tol)
    try:
        check_budget(margins)
    except BudgetExceededError:
        return FactorReport(lphi, None, None, None, log_p_bracket(X, margins, tol))
    lp = log_p(X, margins, tol)
    lf = log_f(X, margins)
    return FactorReport(lphi, lp, lf, abs(lf - (lphi + lp)))


# --------------------------------------------------------------------------- inequality reports


def scaled_entry_bound_sides(X, margins: Margins, tol: float = DEFAULT_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Left side ln y_pq and right side of the scaled-entry bound for every cell."""
    X = _check_positive(X, margins)
    Y = sinkhorn(X, margins, tol).Y
    N = margins.N
    r = np.asarray(margins.rows, dtype=float)
    c = np.asarray(margins.cols, dtype=float)
    lx = np.log(X)
    rhs = (
        np.log(np.outer(r, c) / N)
        + lx
        + math.log(float(r @ X @ c) / N**2)
        - (lx @ c)[:, None] / N
        - (r @ lx)[None, :] / N
    )
    return np.log(Y), rhs


def scaled_entry_bound_report(X, margins: Margins, slack: float = 1e-8, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Per-cell pass flags for ln y_pq <= bound_pq + slack."""
    lhs, rhs = scaled_entry_bound_sides(X, margins, tol)
    return lhs <= rhs + slack


def kl_objective(Z, X) -> float:
    """sum z_ij (ln z_ij - ln x_ij) with 0 ln 0 = 0."""
    Z = np.asarray(Z, dtype=float)
    return float(np.sum(xlogy(Z, Z) - Z * np.log(X)))


def random_polytope_point(margins: Margins, rng: np.random.Generator, max_tables: int = 6) -> np.ndarray:
    """A random convex combination of uniformly drawn tables with the given margins."""
    k = int(rng.integers(1, max_tables + 1))
    tables = sample_tables_uniform(margins, rng, k).astype(float)
    w = rng.dirichlet(np.ones(k))
    return np.tensordot(w, tables, axes=1)


@dataclass(frozen=True)
class VariationalReport:
    trials: int
    kl_violations: int
    kl_min_gap: float
    growth_lhs: float
    growth_rhs: float
    growth_ok: bool

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def variational_reports(
    X, margins: Margins, trials: int, rng: np.random.Generator, slack: float = 1e-8, tol: float = DEFAULT_TOL
) -> VariationalReport:
    """Check the scaled matrix against its two variational characterizations.

    (a) Y minimizes sum z (ln z - ln x) over the transportation polytope: compared
    against ``trials`` random polytope points.  (b) After normalizing X to total N,
    sum r_i c_j ln y_ij >= sum r_i c_j ln x_ij.
    """
    X = _check_positive(X, margins)
    X = X * (margins.N / X.sum())
    Y = sinkhorn(X, margins, tol).Y
    fY = kl_objective(Y, X)
    violations = 0
    min_gap = math.inf
    for _ in range(trials):
        Z = random_polytope_point(margins, rng)
        gap = kl_objective(Z, X) - fY
        min_gap = min(min_gap, gap)
        if gap < -slack:
            violations += 1
    rc = np.outer(margins.rows, margins.cols).astype(float)
    lhs = float(np.sum(rc * np.log(Y)))
    rhs = float(np.sum(rc * np.log(X)))
    return VariationalReport(trials, violations, min_gap, lhs, rhs, lhs >= rhs - slack)

