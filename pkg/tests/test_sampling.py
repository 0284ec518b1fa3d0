import json
import math

import numpy as np
import pytest
from oracles import simplex_by_sorting
from scipy.stats import ks_2samp, kstest

from tally.margins import Margins
from tally.sampling import (
    ChainConfig,
    chord,
    default_delta,
    empirical_tail_checks,
    laplace_exact,
    metropolis_log_ratio,
    sample_dump_lines,
    sample_nu,
    sample_psi,
    sample_psi_batch,
    sample_simplex_uniform,
    substream,
)


def test_simplex_points_sum_to_one():
    X = sample_simplex_uniform(3, 4, substream(0), 500)
    assert X.shape == (500, 3, 4)
    assert (X > 0).all() and np.allclose(X.sum(axis=(1, 2)), 1.0)
    assert np.allclose(X.mean(axis=0), 1 / 12, atol=0.01)
    assert sample_simplex_uniform(2, 2, substream(0)).shape == (2, 2)


def test_simplex_minimum_matches_sorting_oracle():
    k, size = 6, 20000
    ours = sample_simplex_uniform(2, 3, substream(1), size).reshape(size, k).min(axis=1)
    ref = simplex_by_sorting(k, substream(2), size).min(axis=1)
    assert ks_2samp(ours, ref).pvalue > 1e-3
    # P(min <= t) = 1 - (1 - k t)^(k - 1)
    assert kstest(ours, lambda t: 1 - np.clip(1 - k * t, 0, 1) ** (k - 1)).pvalue > 1e-3


def test_psi_moments():
    m = Margins([1, 1], [1, 1])
    X, tables = sample_psi_batch(m, substream(3), 40000)
    assert X.mean() == pytest.approx(1.5, rel=0.02)
    assert (tables.sum(axis=2) == 1).all()
    big = Margins([3, 2, 4], [2, 4, 3])
    X, _ = sample_psi_batch(big, substream(4), 20000)
    assert X.sum(axis=(1, 2)).mean() == pytest.approx(big.N + 9, rel=0.01)
    one = sample_psi(big, substream(5))
    assert one.X.shape == big.shape and one.table.to_list()


def test_chord_endpoints_touch_the_boundary():
    x = np.array([0.5, 0.3, 0.2])
    d = np.array([1.0, -0.5, -0.5])
    lo, hi = chord(x, d, 0.01)
    assert lo < 0 < hi
    assert (x + lo * d).min() == pytest.approx(0.01)
    assert (x + hi * d).min() == pytest.approx(0.01)


def test_nu_chain_stays_in_the_delta_interior():
    m = Margins([3, 2], [2, 3])
    cfg = ChainConfig(burn_in=100, thinning=2, chains=3)
    res = sample_nu(m, cfg, 300, substream(6))
    assert res.samples.shape == (300, 2, 2)
    assert (res.samples >= default_delta(m) - 1e-15).all()
    assert np.allclose(res.samples.sum(axis=(1, 2)), 1.0)
    assert 0 < res.acceptance_rate < 1
    assert res.diagnostics()["config"]["delta_interior"] == default_delta(m)


def test_nu_chain_is_reproducible_and_chain_zero_independent_of_chain_count():
    m = Margins([2, 2], [2, 2])
    a = sample_nu(m, ChainConfig(burn_in=20, thinning=1, chains=1), 50, substream(7))
    b = sample_nu(m, ChainConfig(burn_in=20, thinning=1, chains=1), 50, substream(7))
    c = sample_nu(m, ChainConfig(burn_in=20, thinning=1, chains=2), 100, substream(7))
    assert np.array_equal(a.samples, b.samples)
    assert np.array_equal(a.samples, c.samples[:50])


def test_step_count_caps_the_run():
    m = Margins([2, 2], [2, 2])
    res = sample_nu(m, ChainConfig(burn_in=5, thinning=1, step_count=10), 100, substream(8))
    assert res.steps == 10 and len(res.samples) == 5


@pytest.mark.parametrize(
    "kwargs",
    [{"burn_in": -1}, {"thinning": 0}, {"chains": 0}, {"step_count": 0}, {"delta_interior": 0.3}, {"delta_interior": 0.0}],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        ChainConfig(**kwargs).resolved(Margins([1, 1], [1, 1]))


def test_substreams_are_deterministic_and_distinct():
    assert substream(1, 2).random() == substream(1, 2).random()
    assert substream(1, 2).random() != substream(1, 3).random()
    assert substream(1).random() != substream(2).random()


def test_metropolis_ratio_is_antisymmetric():
    assert metropolis_log_ratio(1.5, -0.25) == -metropolis_log_ratio(-0.25, 1.5)


def test_laplace_identity_values():
    m = Margins([2, 1], [1, 2])
    assert laplace_exact(m, np.zeros(m.shape)) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        laplace_exact(m, np.ones(m.shape))
    rep = empirical_tail_checks(m, 20000, substream(9), lambdas=np.full(m.shape, 0.1))
    assert rep.laplace_ok and rep.sum_ok
    assert rep.log_p_quantiles["1.0"] >= rep.log_p_quantiles["0.5"]


def test_dump_lines():
    lines = sample_dump_lines([np.eye(2), np.ones((2, 2))], chain_id=3)
    assert [json.loads(s)["step"] for s in lines] == [0, 1]
    assert json.loads(lines[0]) == {"chain": 3, "step": 0, "X": [[1.0, 0.0], [0.0, 1.0]]}


def test_default_delta_value():
    m = Margins([2, 2], [2, 2])
    assert default_delta(m) == pytest.approx(1 / (4 * 8 * 10))
    assert math.isclose(default_delta(m) * 4, 1 / 80)
