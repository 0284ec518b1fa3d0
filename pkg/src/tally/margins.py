"""Margins, their summary statistics, smoothness classes and typical-table entry bounds.

All ratios that feed a boolean flag are computed with :class:`fractions.Fraction`
so that boundary cases classify exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from numbers import Integral
from typing import Any, Sequence

import numpy as np

from .errors import InconsistentMarginsError


def _as_fraction(value: float | int | Fraction) -> Fraction:
    # repr() keeps the decimal the user typed (0.1 stays 1/10, not its binary neighbour)
    if isinstance(value, (Fraction, Integral)):
        return Fraction(value)
    return Fraction(repr(float(value)))


@dataclass(frozen=True)
class Margins:
    """Row sums ``rows`` and column sums ``cols`` of a contingency table."""

    rows: tuple[int, ...]
    cols: tuple[int, ...]

    def __init__(self, rows: Sequence[int], cols: Sequence[int]):
        rows_t = _validate_vector(rows, "rows")
        cols_t = _validate_vector(cols, "cols")
        if sum(rows_t) != sum(cols_t):
            raise InconsistentMarginsError(
                f"inconsistent margins: sum(rows)={sum(rows_t)} != sum(cols)={sum(cols_t)}"
            )
        object.__setattr__(self, "rows", rows_t)
        object.__setattr__(self, "cols", cols_t)

    @property
    def m(self) -> int:
        return len(self.rows)

    @property
    def n(self) -> int:
        return len(self.cols)

    @property
    def N(self) -> int:
        return sum(self.rows)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.m, self.n)

    def transpose(self) -> "Margins":
        return Margins(self.cols, self.rows)

    def permuted(self, row_perm: Sequence[int], col_perm: Sequence[int]) -> "Margins":
        return Margins([self.rows[i] for i in row_perm], [self.cols[j] for j in col_perm])

    def to_dict(self) -> dict[str, list[int]]:
        return {"rows": list(self.rows), "cols": list(self.cols)}

    @classmethod
    def from_dict(cls, data: Any) -> "Margins":
        if not isinstance(data, dict) or "rows" not in data or "cols" not in data:
            raise InconsistentMarginsError('margins must be an object {"rows": [...], "cols": [...]}')
        return cls(data["rows"], data["cols"])

    @classmethod
    def from_json(cls, text: str) -> "Margins":
        return cls.from_dict(json.loads(text))

    def __repr__(self) -> str:
        return f"Margins(rows={list(self.rows)}, cols={list(self.cols)})"


def _validate_vector(values: Sequence[int], name: str) -> tuple[int, ...]:
    if isinstance(values, (str, bytes)) or not hasattr(values, "__iter__"):
        raise InconsistentMarginsError(f"{name} must be a sequence of positive integers")
    out = []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (Integral, np.integer)):
            raise InconsistentMarginsError(f"{name} entries must be integers, got {v!r}")
        if v < 1:
            raise InconsistentMarginsError(f"{name} entries must be >= 1, got {v}")
        out.append(int(v))
    if not out:
        raise InconsistentMarginsError(f"{name} must be non-empty")
    return tuple(out)


@dataclass(frozen=True)
class MarginStats:
    N: int
    m: int
    n: int
    s_exact: Fraction
    r_plus: int
    r_minus: int
    c_plus: int
    c_minus: int

    @property
    def s(self) -> float:
        """Average table entry N/(mn)."""
        return float(self.s_exact)

    def to_dict(self) -> dict[str, Any]:
        return {
            "N": self.N,
            "m": self.m,
            "n": self.n,
            "s": self.s,
            "r_plus": self.r_plus,
            "r_minus": self.r_minus,
            "c_plus": self.c_plus,
            "c_minus": self.c_minus,
        }


def margin_stats(margins: Margins) -> MarginStats:
    return MarginStats(
        N=margins.N,
        m=margins.m,
        n=margins.n,
        s_exact=Fraction(margins.N, margins.m * margins.n),
        r_plus=max(margins.rows),
        r_minus=min(margins.rows),
        c_plus=max(margins.cols),
        c_minus=min(margins.cols),
    )


@dataclass(frozen=True)
class SmoothnessReport:
    """Smoothness parameters of a margin pair.

    ``alpha_min_upper`` is the least alpha for which the margins are upper
    alpha-smooth, ``beta_max_lower`` the largest beta for lower beta-smoothness.
    ``strong_alpha`` is max_ij x*_ij / s and is only filled in when a typical
    table was supplied.
    """

    alpha_min_upper: float
    beta_max_lower: float
    strong_alpha: float | None
    moderate_s0: float
    golden_ratio: bool
    linear: bool
    beta_rows: float
    beta_cols: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "alpha_min_upper": self.alpha_min_upper,
            "beta_max_lower": self.beta_max_lower,
            "strong_alpha": self.strong_alpha,
            "moderate_s0": self.moderate_s0,
            "flags": {"golden_ratio": self.golden_ratio, "linear": self.linear},
            "beta_rows": self.beta_rows,
            "beta_cols": self.beta_cols,
        }


def golden_ratio_flag(margins: Margins, rho: float, eps: float) -> bool:
    """Membership in the generalized golden-ratio class.

    Requires m <= rho*n, n <= rho*m and beta1*beta2 <= max(beta1, beta2) + 1 - eps
    with beta1 = r+/r-, beta2 = c+/c-.
    """
    st = margin_stats(margins)
    rho_f, eps_f = _as_fraction(rho), _as_fraction(eps)
    if st.m > rho_f * st.n or st.n > rho_f * st.m:
        return False
    b1 = Fraction(st.r_plus, st.r_minus)
    b2 = Fraction(st.c_plus, st.c_minus)
    return b1 * b2 <= max(b1, b2) + 1 - eps_f


def linear_flag(margins: Margins, beta: float, eps: float) -> bool:
    """r+/r- <= beta and c+ <= eps*m, with the class only defined when eps*beta < 1."""
    st = margin_stats(margins)
    beta_f, eps_f = _as_fraction(beta), _as_fraction(eps)
    if beta_f < 1 or eps_f <= 0 or eps_f * beta_f >= 1:
        return False
    return Fraction(st.r_plus, st.r_minus) <= beta_f and st.c_plus <= eps_f * st.m


def classify_smoothness(
    margins: Margins,
    typical: Any = None,
    golden_rho: float = 2.0,
    golden_eps: float = 0.1,
    linear_beta: float = 1.5,
    linear_eps: float = 0.5,
) -> SmoothnessReport:
    """Evaluate the smoothness parameters and class flags for ``margins``.

    ``typical`` may be any object with an ``entries`` array (normally a
    :class:`tally.typical.TypicalTable`).
    """
    if golden_rho <= 0 or linear_beta <= 0 or linear_eps <= 0:
        raise ValueError("smoothness parameters must be positive")
    if not 0 < golden_eps < 1:
        raise ValueError("golden_eps must lie in (0, 1)")
    st = margin_stats(margins)
    N, m, n = st.N, st.m, st.n
    alpha = max(Fraction(st.r_plus * m, N), Fraction(st.c_plus * n, N))
    beta = min(Fraction(st.r_minus * m, N), Fraction(st.c_minus * n, N))
    strong = None
    if typical is not None:
        entries = np.asarray(typical.entries, dtype=float)
        strong = float(entries.max() / st.s)
    return SmoothnessReport(
        alpha_min_upper=float(alpha),
        beta_max_lower=float(beta),
        strong_alpha=strong,
        moderate_s0=st.s,
        golden_ratio=golden_ratio_flag(margins, golden_rho, golden_eps),
        linear=linear_flag(margins, linear_beta, linear_eps),
        beta_rows=st.r_plus / st.r_minus,
        beta_cols=st.c_plus / st.c_minus,
    )


def typical_entry_bounds_exact(margins: Margins) -> tuple[Fraction, Fraction | None]:
    st = margin_stats(margins)
    rp, rm, cp, cm, m, n = st.r_plus, st.r_minus, st.c_plus, st.c_minus, st.m, st.n
    lower = max(Fraction(rm * cm, rp * m), Fraction(cm * rm, cp * n))
    uppers = []
    den1 = rm * cp + rm * cm + m * rm - rp * cp
    if den1 > 0:
        uppers.append(Fraction(cp * (rm * cm + m * rp), m * den1))
    den2 = cm * rp + cm * rm + n * cm - cp * rp
    if den2 > 0:
        uppers.append(Fraction(rp * (cm * rm + n * cp), n * den2))
    return lower, (min(uppers) if uppers else None)


def typical_entry_bounds(margins: Margins) -> tuple[float, float | None]:
    """Entrywise lower bound and, when available, upper bound on the typical table."""
    lower, upper = typical_entry_bounds_exact(margins)
    return float(lower), (None if upper is None else float(upper))
