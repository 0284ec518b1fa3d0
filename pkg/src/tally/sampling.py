"""Random sources: uniform simplex points, the psi mixture density, and a
hit-and-run Metropolis chain for the measure with density proportional to phi.

Every randomized routine takes a ``numpy.random.Generator``.  Independent
streams are derived from one master seed with :func:`substream`, which keys a
``SeedSequence`` by a tuple of integers (counter-based, no overlap).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from typing import Any, Sequence

import numpy as np

from .exact import ContingencyTable, count_tables, count_weighted, sample_tables_uniform
from .margins import Margins
from .scaling import log_p_batch, log_phi_batch

log = logging.getLogger(__name__)


def substream(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream identified by ``key`` under master ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(key))))


# --------------------------------------------------------------------------- simplex


def sample_simplex_uniform(m: int, n: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Uniform point(s) of the open simplex of positive m x n matrices with total 1."""
    shape = (m, n) if size is None else (size, m, n)
    E = rng.standard_exponential(shape)
    return E / E.sum(axis=(-2, -1), keepdims=True)


# --------------------------------------------------------------------------- psi


@dataclass(frozen=True)
class PsiSample:
    X: np.ndarray
    table: ContingencyTable


def sample_psi_batch(margins: Margins, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """``size`` draws from psi, returned with the latent tables.

    psi is the uniform mixture over tables D of independent Gamma(d_ij + 1)
    coordinates, so a draw picks a uniform table and then the Gammas.
    """
    tables = sample_tables_uniform(margins, rng, size)
    X = rng.standard_gamma(tables + 1.0)
    return X, tables


def sample_psi(margins: Margins, rng: np.random.Generator) -> PsiSample:
    X, tables = sample_psi_batch(margins, rng, 1)
    return PsiSample(X[0], ContingencyTable(tables[0]))


# --------------------------------------------------------------------------- nu chain


def default_delta(margins: Margins) -> float:
    mn = margins.m * margins.n
    return 1.0 / (mn * (margins.N + mn) * 10)


@dataclass(frozen=True)
class ChainConfig:
    """Knobs of the hit-and-run chain.

    ``step_count`` caps the number of steps each chain takes (``None`` means
    burn_in + per-chain count * thinning, i.e. no cap).  ``chains`` independent
    chains advance in lockstep.  ``delta_interior`` of ``None``
    is replaced by :func:`default_delta` for the margins at hand.
    """

    burn_in: int = 1000
    thinning: int = 10
    delta_interior: float | None = None
    step_count: int | None = None
    seed: int = 0
    chains: int = 1

    def resolved(self, margins: Margins) -> "ChainConfig":
        cfg = self if self.delta_interior is not None else replace(self, delta_interior=default_delta(margins))
        cfg.validate(margins)
        return cfg

    def validate(self, margins: Margins) -> None:
        mn = margins.m * margins.n
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        d = self.delta_interior
        if d is None or not 0 < d < 1 / mn:
            raise ValueError(f"delta_interior must lie in (0, 1/(mn)) = (0, {1 / mn:g})")
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if self.step_count is not None and self.step_count < 1:
            raise ValueError("step_count must be positive")

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass(frozen=True)
class NuSamples:
    samples: np.ndarray
    acceptance_rate: float
    accepted: np.ndarray
    restarts: int
    steps: int
    config: ChainConfig

    def diagnostics(self) -> dict[str, Any]:
        return {
            "acceptance_rate": self.acceptance_rate,
            "restarts": self.restarts,
            "steps": self.steps,
            "config": self.config.to_dict(),
        }


def chord(x: np.ndarray, d: np.ndarray, delta: float) -> tuple[float, float]:
    """Parameter interval [lo, hi] of the line x + t d inside {x_k >= delta}."""
    slack = delta - x
    pos, neg = d > 0, d < 0
    lo = np.max(slack[pos] / d[pos]) if pos.any() else -math.inf
    hi = np.min(slack[neg] / d[neg]) if neg.any() else math.inf
    return float(min(lo, 0.0)), float(max(hi, 0.0))


def metropolis_log_ratio(log_phi_current: float, log_phi_proposal: float) -> float:
    """Log acceptance ratio for a symmetric proposal targeting phi."""
    return log_phi_proposal - log_phi_current


def sample_nu(
    margins: Margins,
    config: ChainConfig,
    count: int,
    rng: np.random.Generator | None = None,
    tol: float = 1e-10,
) -> NuSamples:
    """Approximate draws from the density proportional to phi on the delta-interior.

    From the current point a uniform direction in the zero-sum hyperplane is
    drawn, the chord through the delta-interior is computed and a uniform point
    on it is proposed; it is accepted with probability min(1, phi'/phi).  The
    proposal is symmetric, so the chain is reversible with respect to phi
    restricted to the delta-interior.  No mixing certificate is claimed.

    ``config.chains`` chains run in lockstep (one batched scaling per step), each
    on its own child stream of ``rng``; the ``count`` samples are split between
    them and returned ordered by chain.
    """
    cfg = config.resolved(margins)
    if rng is None:
        rng = substream(cfg.seed)
    m, n = margins.shape
    K = m * n
    C = cfg.chains
    per_chain = -(-count // C)
    delta = float(cfg.delta_interior)
    total = cfg.burn_in + per_chain * cfg.thinning
    if cfg.step_count is not None:
        total = min(total, cfg.step_count)
    if K == 1:
        return NuSamples(np.ones((count, 1, 1)), 1.0, np.ones((total, C), dtype=bool), 0, total, cfg)

    bary = np.full(K, 1.0 / K)
    x = np.tile(bary, (C, 1))
    cur = log_phi_batch(x.reshape(C, m, n), margins, tol)
    out: list[list[np.ndarray]] = [[] for _ in range(C)]
    accepted = np.zeros((total, C), dtype=bool)
    restarts = 0
    streams = rng.spawn(C)
    for step in range(total):
        d = np.stack([g.standard_normal(K) for g in streams])
        d -= d.mean(axis=1, keepdims=True)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        bounds = np.array([chord(x[c], d[c], delta) for c in range(C)])
        lo, hi = bounds[:, 0], bounds[:, 1]
        u = np.stack([g.random(2) for g in streams], axis=1)
        degenerate = ~(hi - lo > 1e-14)
        if degenerate.any():
            log.warning("degenerate chord at step %d; restarting %d chain(s) from the barycenter",
                        step, int(degenerate.sum()))
            restarts += int(degenerate.sum())
            x[degenerate] = bary
            cur[degenerate] = log_phi_batch(x[degenerate].reshape(-1, m, n), margins, tol)
            lo, hi = np.where(degenerate, 0.0, lo), np.where(degenerate, 0.0, hi)
        t = lo + u[0] * (hi - lo)
        prop = np.maximum(x + t[:, None] * d, delta)
        prop /= prop.sum(axis=1, keepdims=True)
        new = log_phi_batch(prop.reshape(C, m, n), margins, tol)
        with np.errstate(divide="ignore"):
            take = (np.log(u[1]) < metropolis_log_ratio(cur, new)) & ~degenerate
        x[take], cur[take] = prop[take], new[take]
        accepted[step] = take
        if step >= cfg.burn_in and (step - cfg.burn_in + 1) % cfg.thinning == 0:
            for c in range(C):
                out[c].append(x[c].reshape(m, n).copy())
    flat = [s for chain in out for s in chain]
    samples = np.array(flat[:count]).reshape(-1, m, n)
    return NuSamples(samples, float(accepted.mean()) if total else 0.0, accepted, restarts, total, cfg)


# --------------------------------------------------------------------------- tail checks


@dataclass(frozen=True)
class TailReport:
    samples: int
    sum_threshold: float
    sum_exceed_frequency: float
    sum_exceed_ceiling: float
    sum_exceed_sigma: float
    sum_ok: bool
    log_p_threshold: float
    log_p_exceed_fraction: float
    log_p_quantiles: dict[str, float]
    laplace_mc_mean: float
    laplace_mc_stderr: float
    laplace_exact: float
    laplace_z: float
    laplace_ok: bool

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def laplace_exact(margins: Margins, lambdas: np.ndarray) -> float:
    """E exp(sum lambda_ij x_ij) under psi: T(R,C;W)/#(R,C) * prod w_ij, w = 1/(1 - lambda)."""
    lam = np.asarray(lambdas, dtype=float)
    if (lam >= 1).any():
        raise ValueError("every lambda must be < 1")
    W = 1.0 / (1.0 - lam)
    T = count_weighted(margins, W)
    return math.exp(T.log_magnitude - math.log(count_tables(margins)) + float(np.log(W).sum()))


def empirical_tail_checks(
    margins: Margins,
    samples: int,
    rng: np.random.Generator,
    lambdas=None,
    log_p_threshold: float | None = None,
    tol: float = 1e-10,
) -> TailReport:
    """Empirical checks of the psi tail bounds and the Laplace-transform identity.

    (a) frequency of sum_ij x_ij >= 2(N + mn) against the ceiling (3/4)^(N + mn);
    (b) distribution of ln p(X) under psi and the fraction above ``log_p_threshold``
    (default (ln N)^2, the threshold with exponent 1); (c) Monte Carlo mean of
    exp(sum lambda_ij x_ij) against its exact value.
    """
    m, n = margins.shape
    N = margins.N
    lam = np.zeros((m, n)) if lambdas is None else np.asarray(lambdas, dtype=float)
    if lam.shape != (m, n):
        raise ValueError("lambdas must have the shape of the table")
    X, _ = sample_psi_batch(margins, rng, samples)
    thresh = 2.0 * (N + m * n)
    hits = X.sum(axis=(1, 2)) >= thresh
    freq = float(hits.mean())
    ceiling = 0.75 ** (N + m * n)
    sigma = math.sqrt(max(ceiling * (1 - ceiling), 1e-300) / samples)
    lp = log_p_batch(X, margins, tol)
    lp_thresh = math.log(N) ** 2 if log_p_threshold is None else log_p_threshold
    vals = np.exp(np.tensordot(X, lam, axes=([1, 2], [0, 1])))
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(samples)) if samples > 1 else math.inf
    exact = laplace_exact(margins, lam)
    z = 0.0 if se == 0 and mean == exact else (mean - exact) / se if se > 0 else math.inf
    return TailReport(
        samples=samples,
        sum_threshold=thresh,
        sum_exceed_frequency=freq,
        sum_exceed_ceiling=ceiling,
        sum_exceed_sigma=sigma,
        sum_ok=freq <= ceiling + 3 * sigma,
        log_p_threshold=lp_thresh,
        log_p_exceed_fraction=float((lp > lp_thresh).mean()),
        log_p_quantiles={q: float(np.quantile(lp, float(q))) for q in ("0.5", "0.9", "0.99", "1.0")},
        laplace_mc_mean=mean,
        laplace_mc_stderr=se,
        laplace_exact=exact,
        laplace_z=z,
        laplace_ok=abs(z) <= 3,
    )


def sample_dump_lines(samples: Sequence[np.ndarray], chain_id: int = 0) -> list[str]:
    """JSON-lines rendering of chain output: one matrix per line."""
    return [
        json.dumps({"chain": chain_id, "step": i, "X": np.asarray(s).tolist()}) for i, s in enumerate(samples)
    ]
