"""The typical table: maximizer of g over the transportation polytope.

We work with the dual.  Writing x_i = exp(a_i), y_j = exp(b_j), the typical
table is x*_ij = x_i y_j / (1 - x_i y_j) where (a, b) minimizes

    F(a, b) = -sum r_i a_i - sum c_j b_j - sum_ij log(1 - exp(a_i + b_j)),

a smooth convex function whose gradient is (row sums of X* - R, column sums of
X* - C).  Block coordinate descent solves all row equations at once for fixed b,
then all column equations for fixed a.  Once the residual is small a damped
Newton step on the full dual finishes the job quadratically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.special import xlogy

from .errors import ConvergenceError
from .margins import Margins

DEFAULT_TOL = 1e-10
DEFAULT_MAX_SWEEPS = 100_000
_POLISH_START = 1e-4


def g_value(X) -> float:
    """sum_ij (x_ij + 1) ln(x_ij + 1) - x_ij ln x_ij, with 0 ln 0 = 0."""
    X = np.asarray(X, dtype=float)
    if (X < 0).any():
        raise ValueError("g is defined on non-negative matrices only")
    return float(np.sum(xlogy(X + 1, X + 1) - xlogy(X, X)))


def _cell_values(s: np.ndarray) -> np.ndarray:
    # e^s / (1 - e^s) for s < 0; -inf cells (zero weight) give 0
    with np.errstate(divide="ignore", over="ignore"):
        return 1.0 / np.expm1(-s)


@dataclass(frozen=True)
class DualPoint:
    x: tuple[float, ...]
    y: tuple[float, ...]

    def to_dict(self) -> dict[str, list[float]]:
        return {"x": list(self.x), "y": list(self.y)}


@dataclass(frozen=True)
class TypicalTable:
    entries: np.ndarray
    dual: DualPoint
    log_rho: float
    residual: float
    sweeps: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "entries": self.entries.tolist(),
            "dual": self.dual.to_dict(),
            "log_rho": self.log_rho,
            "residual": self.residual,
            "sweeps": self.sweeps,
        }


def _solve_lines(offsets: np.ndarray, targets: np.ndarray, start: np.ndarray) -> np.ndarray:
    """Solve sum_k 1/expm1(-(u_l + offsets[l, k])) = targets[l] for each line l.

    Each left side is strictly increasing in u_l on (-inf, -max_k offsets[l, k]),
    so a bracketed Newton iteration on log F converges from any start.
    """
    active = np.isfinite(offsets)
    count = active.sum(axis=1)
    hi = -np.max(np.where(active, offsets, -np.inf), axis=1)
    lo = hi - np.log1p(count / targets) - 1.0
    u = np.where((start < hi) & (start > lo), start, 0.5 * (lo + hi))
    log_t = np.log(targets)
    for _ in range(200):
        s = u[:, None] + offsets
        x = _cell_values(s)
        F = x.sum(axis=1)
        dF = (x * (1.0 + x)).sum(axis=1)
        G = np.log(F) - log_t
        done = np.abs(F - targets) <= 1e-15 * targets
        if done.all():
            break
        lo = np.where(G < 0, np.maximum(lo, u), lo)
        hi = np.where(G > 0, np.minimum(hi, u), hi)
        step = u - G * F / dF
        bad = ~((step > lo) & (step < hi))
        u_new = np.where(bad, 0.5 * (lo + hi), step)
        u = np.where(done, u, u_new)
        if np.all(np.abs(hi - lo) <= 1e-15 * np.maximum(1.0, np.abs(u))):
            break
    return u


def _residual(a, b, log_w, rows, cols) -> tuple[float, np.ndarray]:
    X = _cell_values(a[:, None] + b[None, :] + log_w)
    res = max(np.max(np.abs(X.sum(axis=1) - rows)), np.max(np.abs(X.sum(axis=0) - cols)))
    return float(res), X


def _dual_objective(a, b, log_w, rows, cols) -> float:
    s = a[:, None] + b[None, :] + log_w
    if np.any(s[np.isfinite(s)] >= 0):
        return math.inf
    with np.errstate(divide="ignore"):
        tail = np.where(np.isfinite(s), np.log1p(-np.exp(s)), 0.0)
    return float(-rows @ a - cols @ b - tail.sum())


def _newton_step(a, b, log_w, rows, cols):
    m, n = len(a), len(b)
    X = _cell_values(a[:, None] + b[None, :] + log_w)
    h = X * (1.0 + X)
    grad = np.concatenate([X.sum(axis=1) - rows, X.sum(axis=0) - cols])
    H = np.zeros((m + n, m + n))
    H[:m, :m] = np.diag(h.sum(axis=1))
    H[m:, m:] = np.diag(h.sum(axis=0))
    H[:m, m:] = h
    H[m:, :m] = h.T
    # H is singular along (1,...,1,-1,...,-1); lstsq returns the minimum-norm step
    step = np.linalg.lstsq(H, -grad, rcond=None)[0]
    f0 = _dual_objective(a, b, log_w, rows, cols)
    t = 1.0
    for _ in range(60):
        na, nb = a + t * step[:m], b + t * step[m:]
        f1 = _dual_objective(na, nb, log_w, rows, cols)
        if f1 <= f0 + 1e-4 * t * float(grad @ step) or (f1 <= f0 and t < 1e-6):
            return na, nb
        t *= 0.5
    return a, b


def _normalize(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    shift = 0.5 * (a.max() - b.max())
    return a - shift, b + shift


def _solve_dual(
    margins: Margins, log_w: np.ndarray, tol: float, max_sweeps: int
) -> tuple[np.ndarray, np.ndarray, float, int, np.ndarray]:
    rows = np.asarray(margins.rows, dtype=float)
    cols = np.asarray(margins.cols, dtype=float)
    m, n = margins.shape
    s_avg = margins.N / (m * n)
    zeta = 0.5 * math.log(s_avg / (1.0 + s_avg))
    a = np.full(m, zeta)
    b = np.full(n, zeta)
    scale = max(rows.max(), cols.max())
    # absolute target, floored at what double rounding allows for sums of size N
    target = max(tol, 1e3 * np.finfo(float).eps * margins.N)
    res, X = _residual(a, b, log_w, rows, cols)
    sweeps = 0
    while res > target:
        if sweeps >= max_sweeps:
            raise ConvergenceError(
                f"typical-table solver stopped after {sweeps} sweeps with residual {res:.3e}"
            )
        a = _solve_lines(b[None, :] + log_w, rows, a)
        b = _solve_lines(a[None, :] + log_w.T, cols, b)
        a, b = _normalize(a, b)
        sweeps += 1
        res, X = _residual(a, b, log_w, rows, cols)
        if target < res <= _POLISH_START * scale:
            for _ in range(50):
                na, nb = _newton_step(a, b, log_w, rows, cols)
                na, nb = _normalize(na, nb)
                nres, nX = _residual(na, nb, log_w, rows, cols)
                if not nres < res:
                    break
                a, b, res, X = na, nb, nres, nX
                if res <= target:
                    break
    return a, b, res, sweeps, X


def solve_typical(margins: Margins, tol: float = DEFAULT_TOL, max_sweeps: int = DEFAULT_MAX_SWEEPS) -> TypicalTable:
    """Typical table X*, its dual point and log rho(R, C)."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    m, n = margins.shape
    log_w = np.zeros((m, n))
    a, b, res, sweeps, X = _solve_dual(margins, log_w, tol, max_sweeps)
    log_rho = _log_rho_from_dual(a, b, log_w, margins)
    return TypicalTable(
        entries=X,
        dual=DualPoint(tuple(np.exp(a).tolist()), tuple(np.exp(b).tolist())),
        log_rho=log_rho,
        residual=res,
        sweeps=sweeps,
    )


def _log_rho_from_dual(a, b, log_w, margins: Margins) -> float:
    rows = np.asarray(margins.rows, dtype=float)
    cols = np.asarray(margins.cols, dtype=float)
    return _dual_objective(a, b, log_w, rows, cols)


def log_rho_weighted(
    margins: Margins, weights, tol: float = DEFAULT_TOL, max_sweeps: int = DEFAULT_MAX_SWEEPS
) -> float:
    """log of inf prod x_i^-r_i prod y_j^-c_j prod (1 - w_ij x_i y_j)^-1.

    Zero-weight cells drop out of the product and impose no constraint.
    """
    W = np.asarray(weights, dtype=float)
    if W.shape != margins.shape:
        raise ValueError(f"weight matrix shape {W.shape} does not match margins {margins.shape}")
    if (W < 0).any() or not np.isfinite(W).all():
        raise ValueError("weights must be finite and non-negative")
    if not (W > 0).any(axis=1).all() or not (W > 0).any(axis=0).all():
        raise ConvergenceError("a row or column has no positive weight; the infimum is not attained")
    with np.errstate(divide="ignore"):
        log_w = np.log(W)
    a, b, _, _, _ = _solve_dual(margins, log_w, tol, max_sweeps)
    return _log_rho_from_dual(a, b, log_w, margins)


def typical_entry(dual: DualPoint) -> np.ndarray:
    """Rebuild x_i y_j / (1 - x_i y_j) from a dual point."""
    x = np.asarray(dual.x)
    y = np.asarray(dual.y)
    return _cell_values(np.log(x)[:, None] + np.log(y)[None, :])
