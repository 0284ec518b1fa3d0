"""Exact counting by column dynamic programming, and the exact oracles built on it.

The DP processes columns left to right.  A state is the vector of row sums still
to be filled; a transition splits the current column sum across the rows.  For
plain counting the number of completions depends only on the multiset of
remaining row sums, so states are sorted before memoization.  Weighted sums and
block permanents depend on which row carries which remainder and use the raw
state.
"""

from __future__ import annotations

import bisect
import itertools
import math
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import BudgetExceededError
from .margins import Margins

DEFAULT_DP_BUDGET = 10**7
DEFAULT_RYSER_CAP = 20
DEFAULT_SIMPLEX_CAP = 10**6
# tables are materialised for vectorised block-permanent evaluation below this count
DEFAULT_TABLE_CAP = 200_000
# element budget for one vectorised block of work (about 32 MB of float64)
BATCH_ELEMENTS = 4_000_000


def dp_budget() -> int:
    """State budget for the DP, overridable through ``TALLY_DP_BUDGET``."""
    raw = os.environ.get("TALLY_DP_BUDGET")
    if raw is None or raw.strip() == "":
        return DEFAULT_DP_BUDGET
    try:
        value = int(float(raw))
    except ValueError as exc:
        raise ValueError(f"TALLY_DP_BUDGET must be a number, got {raw!r}") from exc
    if value < 1:
        raise ValueError("TALLY_DP_BUDGET must be positive")
    return value


def dp_state_estimate(margins: Margins) -> int:
    """Upper bound on DP states: prod_i (r_i + 1) times the number of columns."""
    return math.prod(r + 1 for r in margins.rows) * margins.n


def check_budget(margins: Margins, budget: int | None = None) -> None:
    limit = dp_budget() if budget is None else budget
    states = dp_state_estimate(margins)
    if states > limit:
        raise BudgetExceededError(
            f"DP state space {states} exceeds budget {limit}; use an estimator instead",
            budget="dp_state_budget",
            limit=limit,
        )


# --------------------------------------------------------------------------- LogReal


@dataclass(frozen=True)
class LogReal:
    """A non-negative real stored as its natural log (or an explicit zero)."""

    log_magnitude: float
    is_zero: bool = False

    @classmethod
    def zero(cls) -> "LogReal":
        return cls(-math.inf, True)

    @classmethod
    def from_log(cls, log_value: float) -> "LogReal":
        if log_value == -math.inf:
            return cls.zero()
        if math.isnan(log_value):
            raise ValueError("log value is NaN")
        return cls(float(log_value), False)

    @classmethod
    def from_value(cls, value: float) -> "LogReal":
        if value < 0:
            raise ValueError("LogReal represents non-negative numbers only")
        if value == 0:
            return cls.zero()
        return cls(math.log(value), False)

    def __add__(self, other: "LogReal") -> "LogReal":
        if self.is_zero:
            return other
        if other.is_zero:
            return self
        a, b = self.log_magnitude, other.log_magnitude
        if a < b:
            a, b = b, a
        return LogReal(a + math.log1p(math.exp(b - a)))

    def __mul__(self, other: "LogReal") -> "LogReal":
        if self.is_zero or other.is_zero:
            return LogReal.zero()
        return LogReal(self.log_magnitude + other.log_magnitude)

    @property
    def value(self) -> float:
        """Linear-scale value; may overflow to ``inf``."""
        if self.is_zero:
            return 0.0
        try:
            return math.exp(self.log_magnitude)
        except OverflowError:
            return math.inf

    @property
    def log10(self) -> float:
        return -math.inf if self.is_zero else self.log_magnitude / math.log(10)

    def to_dict(self) -> dict:
        return {
            "log": None if self.is_zero else self.log_magnitude,
            "log10": None if self.is_zero else self.log10,
            "is_zero": self.is_zero,
        }


# --------------------------------------------------------------------------- tables


@dataclass(frozen=True)
class ContingencyTable:
    entries: tuple[tuple[int, ...], ...]

    def __init__(self, entries, margins: Margins | None = None):
        arr = np.asarray(entries)
        if arr.ndim != 2 or not np.issubdtype(arr.dtype, np.integer) or (arr < 0).any():
            raise ValueError("a contingency table is a 2-D array of non-negative integers")
        if margins is not None:
            if arr.shape != margins.shape:
                raise ValueError(f"table shape {arr.shape} does not match margins {margins.shape}")
            if tuple(arr.sum(axis=1)) != margins.rows or tuple(arr.sum(axis=0)) != margins.cols:
                raise ValueError("table does not have the prescribed margins")
        object.__setattr__(self, "entries", tuple(tuple(int(v) for v in row) for row in arr))

    def to_array(self) -> np.ndarray:
        return np.array(self.entries, dtype=np.int64)

    def to_list(self) -> list[list[int]]:
        return [list(row) for row in self.entries]


def compositions(total: int, caps: Sequence[int]) -> Iterator[tuple[int, ...]]:
    """All vectors d with 0 <= d_i <= caps[i] and sum(d) == total."""
    k = len(caps)
    suffix = [0] * (k + 1)
    for i in range(k - 1, -1, -1):
        suffix[i] = suffix[i + 1] + caps[i]
    if total > suffix[0] or total < 0:
        return
    d = [0] * k

    def rec(i: int, remaining: int) -> Iterator[tuple[int, ...]]:
        if i == k - 1:
            d[i] = remaining
            yield tuple(d)
            return
        lo = max(0, remaining - suffix[i + 1])
        hi = min(caps[i], remaining)
        for v in range(lo, hi + 1):
            d[i] = v
            yield from rec(i + 1, remaining - v)

    if k == 0:
        if total == 0:
            yield ()
        return
    yield from rec(0, total)


class TableCounter:
    """Memoized completion counts for one margin pair.

    ``completions(j, state)`` is the number of ways to fill columns ``j..n-1``
    when ``state`` holds the row sums still missing.  Instances are cached per
    margins through :func:`table_counter`; after construction the memo only
    grows, and each entry is written once, so sharing between readers is safe.
    """

    def __init__(self, margins: Margins, symmetric: bool = True):
        self.margins = margins
        self.symmetric = symmetric
        self._memo: dict[tuple[int, tuple[int, ...]], int] = {}
        self._moves: dict[tuple[int, tuple[int, ...]], tuple[list, list[int]]] = {}

    def _key(self, state: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(sorted(state)) if self.symmetric else state

    def completions(self, j: int, state: tuple[int, ...]) -> int:
        cols = self.margins.cols
        n = len(cols)
        if j == n - 1:
            return 1 if sum(state) == cols[j] else 0
        key = (j, self._key(state))
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        canon = key[1]
        total = 0
        for d in compositions(cols[j], canon):
            nxt = tuple(a - b for a, b in zip(canon, d))
            total += self.completions(j + 1, nxt)
        self._memo[key] = total
        return total

    def count(self) -> int:
        return self.completions(0, self.margins.rows)

    def moves(self, j: int, state: tuple[int, ...]) -> tuple[list, list[int]]:
        """Splits of column ``j`` from ``state`` with cumulative completion counts."""
        key = (j, state)
        hit = self._moves.get(key)
        if hit is not None:
            return hit
        cols = self.margins.cols
        splits, cum, acc = [], [], 0
        for d in compositions(cols[j], state):
            nxt = tuple(a - b for a, b in zip(state, d))
            w = self.completions(j + 1, nxt) if j + 1 < len(cols) else (1 if not any(nxt) else 0)
            if w:
                acc += w
                splits.append(d)
                cum.append(acc)
        self._moves[key] = (splits, cum)
        return splits, cum


@lru_cache(maxsize=64)
def table_counter(margins: Margins, symmetric: bool = True) -> TableCounter:
    return TableCounter(margins, symmetric)


def count_tables(margins: Margins, budget: int | None = None, symmetric: bool = True) -> int:
    """Exact number of contingency tables with the given margins."""
    check_budget(margins, budget)
    return table_counter(margins, symmetric).count()


def enumerate_tables(margins: Margins, cap: int = DEFAULT_TABLE_CAP) -> np.ndarray:
    """Every table with the given margins, as an array of shape (T, m, n)."""
    check_budget(margins)
    counter = table_counter(margins)
    total = counter.count()
    if total > cap:
        raise BudgetExceededError(f"{total} tables exceed enumeration cap {cap}", "table_cap", cap)
    m, n = margins.shape
    out = np.zeros((total, m, n), dtype=np.int64)
    row = 0
    cols_stack: list[tuple[int, ...]] = []

    def rec(j: int, state: tuple[int, ...]) -> None:
        nonlocal row
        if j == n:
            for jj, col in enumerate(cols_stack):
                out[row, :, jj] = col
            row += 1
            return
        splits, _ = counter.moves(j, state)
        for d in splits:
            cols_stack.append(d)
            rec(j + 1, tuple(a - b for a, b in zip(state, d)))
            cols_stack.pop()

    rec(0, margins.rows)
    return out


# --------------------------------------------------------------------------- weighted DP


def _log_cell_table(margins: Margins, log_w: np.ndarray, with_factorial: bool) -> list[list[list[float]]]:
    """table[j][i][d] = d*log w_ij (minus log d! when requested), with 0*log 0 = 0."""
    m, n = margins.shape
    table = []
    for j in range(n):
        col = []
        for i in range(m):
            cap = min(margins.rows[i], margins.cols[j])
            vals = []
            for d in range(cap + 1):
                if d == 0:
                    v = 0.0
                elif log_w[i, j] == -math.inf:
                    v = -math.inf
                else:
                    v = d * float(log_w[i, j])
                if with_factorial:
                    v -= math.lgamma(d + 1)
                vals.append(v)
            col.append(vals)
        table.append(col)
    return table


def _log_dp(margins: Margins, cell: list[list[list[float]]]) -> float:
    cols = margins.cols
    n = len(cols)
    memo: dict[tuple[int, tuple[int, ...]], float] = {}

    def rec(j: int, state: tuple[int, ...]) -> float:
        if j == n - 1:
            col = cell[j]
            return math.fsum(col[i][state[i]] for i in range(len(state)))
        key = (j, state)
        hit = memo.get(key)
        if hit is not None:
            return hit
        col = cell[j]
        terms = []
        for d in compositions(cols[j], tuple(min(s, cols[j]) for s in state)):
            head = sum(col[i][d[i]] for i in range(len(d)))
            if head == -math.inf:
                continue
            tail = rec(j + 1, tuple(a - b for a, b in zip(state, d)))
            if tail == -math.inf:
                continue
            terms.append(head + tail)
        if not terms:
            out = -math.inf
        else:
            top = max(terms)
            out = top + math.log(math.fsum(math.exp(t - top) for t in terms))
        memo[key] = out
        return out

    return rec(0, margins.rows)


def _exact_dp(margins: Margins, weights) -> object:
    cols = margins.cols
    n = len(cols)
    memo: dict = {}

    def cell(i, j, d):
        return 1 if d == 0 else weights[i][j] ** d

    def rec(j: int, state: tuple[int, ...]):
        if j == n - 1:
            return math.prod(cell(i, j, state[i]) for i in range(len(state)))
        key = (j, state)
        if key in memo:
            return memo[key]
        total = 0
        for d in compositions(cols[j], tuple(min(s, cols[j]) for s in state)):
            head = math.prod(cell(i, j, d[i]) for i in range(len(d)))
            if head:
                total += head * rec(j + 1, tuple(a - b for a, b in zip(state, d)))
        memo[key] = total
        return total

    return rec(0, margins.rows)


def _check_weights(margins: Margins, weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.shape != margins.shape:
        raise ValueError(f"weight matrix shape {w.shape} does not match margins {margins.shape}")
    if not np.all(np.isfinite(w)) or (w < 0).any():
        raise ValueError("weights must be finite and non-negative")
    return w


def count_weighted(margins: Margins, weights, budget: int | None = None) -> LogReal:
    """T(R,C;W) = sum over tables D of prod w_ij^d_ij, returned in log domain."""
    check_budget(margins, budget)
    w = _check_weights(margins, weights)
    with np.errstate(divide="ignore"):
        log_w = np.log(w)
    return LogReal.from_log(_log_dp(margins, _log_cell_table(margins, log_w, False)))


def count_weighted_exact(margins: Margins, weights, budget: int | None = None):
    """Exact T(R,C;W) for integer or :class:`fractions.Fraction` weights."""
    check_budget(margins, budget)
    m, n = margins.shape
    rows = [list(r) for r in weights]
    if len(rows) != m or any(len(r) != n for r in rows):
        raise ValueError("weight matrix shape does not match margins")
    if any(v < 0 for r in rows for v in r):
        raise ValueError("weights must be non-negative")
    return _exact_dp(margins, rows)


# --------------------------------------------------------------------------- permanents


def block_matrix(margins: Margins, X) -> np.ndarray:
    """The N x N matrix whose (i,j) block is r_i x c_j filled with x_ij."""
    X = np.asarray(X, dtype=float)
    if X.shape != margins.shape:
        raise ValueError(f"matrix shape {X.shape} does not match margins {margins.shape}")
    return np.repeat(np.repeat(X, margins.rows, axis=0), margins.cols, axis=1)


def log_factorial_sum(values: Sequence[int]) -> float:
    return math.fsum(math.lgamma(v + 1) for v in values)


def per_block(margins: Margins, X, budget: int | None = None) -> LogReal:
    """Permanent of the block matrix A(X) by the table expansion.

    per A(X) = prod r_i! prod c_j! * sum_D prod x_ij^d_ij / d_ij!
    """
    X = np.asarray(X, dtype=float)
    if X.shape != margins.shape:
        raise ValueError(f"matrix shape {X.shape} does not match margins {margins.shape}")
    if not (X > 0).all() or not np.isfinite(X).all():
        raise ValueError("per_block requires a strictly positive finite matrix")
    check_budget(margins, budget)
    inner = _log_dp(margins, _log_cell_table(margins, np.log(X), True))
    return LogReal.from_log(inner + log_factorial_sum(margins.rows) + log_factorial_sum(margins.cols))


def _table_log_weights(tables: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = tables.reshape(tables.shape[0], -1).astype(float)
    return flat, gammaln(flat + 1).sum(axis=1)


def log_per_block_batch(margins: Margins, Xs, table_cap: int = DEFAULT_TABLE_CAP) -> np.ndarray:
    """ln per A(X) for a stack of matrices of shape (k, m, n).

    Either all tables are materialised once and the expansion becomes one matrix
    product, or the column DP runs vectorised over the batch, whichever touches
    fewer terms.
    """
    Xs = np.asarray(Xs, dtype=float)
    if Xs.ndim != 3 or Xs.shape[1:] != margins.shape:
        raise ValueError("expected an array of shape (k, m, n)")
    if not (Xs > 0).all():
        raise ValueError("per_block requires strictly positive matrices")
    const = log_factorial_sum(margins.rows) + log_factorial_sum(margins.cols)
    check_budget(margins)
    logs = np.log(Xs)
    out = np.empty(Xs.shape[0])
    tables = count_tables(margins)
    plan = _transition_plan(margins) if tables > 64 else None
    if tables <= table_cap and (plan is None or tables <= sum(len(layer[0]) for layer in plan)):
        flat, logfact = _table_log_weights(_cached_tables(margins))
        step = max(1, BATCH_ELEMENTS // flat.shape[0])
        for lo in range(0, len(out), step):
            chunk = logs[lo : lo + step].reshape(-1, flat.shape[1])
            out[lo : lo + step] = logsumexp(chunk @ flat.T - logfact[None, :], axis=1)
    else:
        plan = plan or _transition_plan(margins)
        widest = max(len(layer[0]) for layer in plan)
        step = max(1, BATCH_ELEMENTS // widest)
        for lo in range(0, len(out), step):
            out[lo : lo + step] = _log_dp_batch(margins, plan, logs[lo : lo + step])
    return out + const


@lru_cache(maxsize=8)
def _transition_plan(margins: Margins) -> list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
    """Per column: (source index, split matrix, target index, reduceat starts, target count).

    Transitions are sorted by target so a segmented reduction yields each
    target's log-sum-exp.
    """
    plan = []
    states = [margins.rows]
    for j, c in enumerate(margins.cols):
        last = j == margins.n - 1
        src, splits, dst, targets = [], [], [], {}
        for si, state in enumerate(states):
            options = [state] if last else compositions(c, tuple(min(v, c) for v in state))
            for d in options:
                if last and sum(d) != c:
                    continue
                t = tuple(a - b for a, b in zip(state, d))
                src.append(si)
                splits.append(d)
                dst.append(targets.setdefault(t, len(targets)))
        order = np.argsort(np.asarray(dst), kind="stable")
        dst_sorted = np.asarray(dst)[order]
        starts = np.flatnonzero(np.r_[True, dst_sorted[1:] != dst_sorted[:-1]])
        plan.append((np.asarray(src)[order], np.asarray(splits, dtype=float)[order], dst_sorted, starts, len(targets)))
        states = list(targets)
    return plan


def _log_dp_batch(margins: Margins, plan, logs: np.ndarray) -> np.ndarray:
    """Column DP of sum_D prod x^d/d! evaluated for a batch of log matrices at once."""
    k = logs.shape[0]
    prev = np.zeros((1, k))
    for j, (src, splits, dst, starts, _) in enumerate(plan):
        head = splits @ logs[:, :, j].T - gammaln(splits + 1).sum(axis=1)[:, None]
        vals = prev[src] + head
        top = np.maximum.reduceat(vals, starts, axis=0)
        total = np.add.reduceat(np.exp(vals - top[dst]), starts, axis=0)
        prev = top + np.log(total)
    return prev[0]


@lru_cache(maxsize=32)
def _cached_tables(margins: Margins) -> np.ndarray:
    tables = enumerate_tables(margins)
    tables.setflags(write=False)
    return tables


def per_ryser(A, cap: int = DEFAULT_RYSER_CAP) -> LogReal:
    """Permanent of a square non-negative matrix by Ryser's inclusion-exclusion.

    per A = (-1)^N sum_{S subset of columns} (-1)^|S| prod_i sum_{j in S} a_ij
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("per_ryser needs a square matrix")
    N = A.shape[0]
    if N > cap:
        raise BudgetExceededError(f"matrix order {N} exceeds Ryser cap {cap}", "ryser_cap", cap)
    if (A < 0).any():
        raise ValueError("per_ryser expects a non-negative matrix")
    if N == 0:
        return LogReal(0.0)
    # rescale rows to unit maximum; the permanent picks up the product of the scales
    scale = A.max(axis=1)
    if (scale == 0).any():
        return LogReal.zero()
    B = A / scale[:, None]
    log_scale = float(np.log(scale).sum())
    total = 2**N
    chunk = min(total, 1 << 16)
    bits = 1 << np.arange(N, dtype=np.int64)
    partial = []
    for start in range(0, total, chunk):
        masks = np.arange(start, min(start + chunk, total), dtype=np.int64)
        member = ((masks[:, None] & bits[None, :]) != 0).astype(float)
        prods = np.prod(member @ B.T, axis=1)
        sizes = member.sum(axis=1).astype(np.int64)
        signs = np.where((N - sizes) % 2 == 0, 1.0, -1.0)
        partial.extend((signs * prods).tolist())
    value = math.fsum(partial)
    if value <= 0:
        return LogReal.zero()
    return LogReal(math.log(value) + log_scale)


# --------------------------------------------------------------------------- sampling


def _randbelow(rng: np.random.Generator, bound: int) -> int:
    if bound <= 0:
        raise ValueError("bound must be positive")
    if bound < 2**62:
        return int(rng.integers(0, bound))
    bits = bound.bit_length()
    words = (bits + 31) // 32
    while True:
        draws = rng.integers(0, 2**32, size=words, dtype=np.uint64)
        value = 0
        for w in draws:
            value = (value << 32) | int(w)
        value >>= words * 32 - bits
        if value < bound:
            return value


def sample_table_uniform(margins: Margins, rng: np.random.Generator) -> ContingencyTable:
    """One table drawn exactly uniformly by walking the DP backwards."""
    check_budget(margins)
    counter = table_counter(margins)
    m, n = margins.shape
    out = np.zeros((m, n), dtype=np.int64)
    state = margins.rows
    for j in range(n):
        splits, cum = counter.moves(j, state)
        u = _randbelow(rng, cum[-1])
        d = splits[bisect.bisect_right(cum, u)]
        out[:, j] = d
        state = tuple(a - b for a, b in zip(state, d))
    return ContingencyTable(out)


def sample_tables_uniform(margins: Margins, rng: np.random.Generator, size: int) -> np.ndarray:
    """``size`` independent uniform tables, shape (size, m, n).

    Draws that share a DP state are advanced together, which keeps the walk
    vectorised while remaining exact (integer thresholds, no float weights).
    """
    check_budget(margins)
    counter = table_counter(margins)
    m, n = margins.shape
    out = np.zeros((size, m, n), dtype=np.int64)
    groups: dict[tuple[int, ...], np.ndarray] = {margins.rows: np.arange(size)}
    for j in range(n):
        nxt: dict[tuple[int, ...], list[np.ndarray]] = {}
        for state in sorted(groups):
            idx = groups[state]
            splits, cum = counter.moves(j, state)
            total = cum[-1]
            if total < 2**62:
                u = rng.integers(0, total, size=idx.size)
                choice = np.searchsorted(np.asarray(cum, dtype=np.int64), u, side="right")
            else:
                choice = np.array([bisect.bisect_right(cum, _randbelow(rng, total)) for _ in idx])
            split_arr = np.asarray(splits, dtype=np.int64)
            out[idx, :, j] = split_arr[choice]
            for c in np.unique(choice):
                d = splits[c]
                key = tuple(a - b for a, b in zip(state, d))
                nxt.setdefault(key, []).append(idx[choice == c])
        groups = {k: np.concatenate(v) for k, v in nxt.items()}
    return out


# --------------------------------------------------------------------------- integer simplex


def integer_simplex_size(m: int, c: int) -> int:
    return math.comb(m + c - 1, m - 1)


@dataclass(frozen=True)
class SimplexSum:
    brute: float | None
    closed: float


def simplex_sum_closed_log(m: int, c: int, lambdas: Sequence[float]) -> float:
    l = math.fsum(lambdas)
    return (
        math.lgamma(c + m - l)
        + math.lgamma(m)
        - math.lgamma(c + m)
        - math.lgamma(m - l)
        + math.fsum(math.lgamma(1 - lam) for lam in lambdas)
    )


def simplex_sum(m: int, c: int, lambdas: Sequence[float], cap: int = DEFAULT_SIMPLEX_CAP) -> SimplexSum:
    """Average of prod Gamma(d_i - lambda_i + 1)/Gamma(d_i + 1) over the integer simplex.

    ``brute`` sums over every composition of ``c`` into ``m`` parts (``None`` when
    there are more than ``cap`` of them); ``closed`` is the Gamma-function closed
    form.  Both are returned in linear scale.
    """
    lambdas = [float(v) for v in lambdas]
    if m < 1 or c < 0:
        raise ValueError("need m >= 1 and c >= 0")
    if len(lambdas) != m:
        raise ValueError(f"expected {m} lambdas, got {len(lambdas)}")
    if any(not lam < 1 for lam in lambdas):
        raise ValueError("every lambda must be < 1")
    closed = math.exp(simplex_sum_closed_log(m, c, lambdas))
    size = integer_simplex_size(m, c)
    if size > cap:
        return SimplexSum(None, closed)
    lam = np.asarray(lambdas)
    # stars and bars: bar positions among c + m - 1 slots
    logs = []
    for bars in itertools.combinations(range(c + m - 1), m - 1):
        edges = (-1,) + bars + (c + m - 1,)
        d = np.diff(edges) - 1
        logs.append(float(np.sum(gammaln(d - lam + 1) - gammaln(d + 1))))
    brute = math.exp(float(logsumexp(logs)) - math.log(size))
    return SimplexSum(brute, closed)

