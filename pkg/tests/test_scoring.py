import numpy as np
import pytest
from scipy import integrate

from maxar.brown_resnick import Semivariogram
from maxar.errors import DataError, ValidationError
from maxar.grid import SpaceTimeField, SpatialGrid
from maxar.model import ModelParams, simulate_st
from maxar.scoring import (crps, evaluate_protocol, pit_chisquare, pit_rank, rmse_of_mean,
                           sample_events, score_table_csv)


def crps_quad(x, obs):
    x = np.sort(np.asarray(x, float))
    F = lambda y: np.searchsorted(x, y, side="right") / len(x)
    lo, hi = min(x[0], obs) - 1, max(x[-1], obs) + 1
    pts = np.unique(np.concatenate([x, [obs]]))
    val, _ = integrate.quad(lambda y: (F(y) - (y >= obs)) ** 2, lo, hi, points=pts, limit=500,
                            epsabs=1e-10)
    return val


def test_crps_examples():
    assert crps([2.5], 1.0) == 1.5
    assert crps([0.0, 1.0], 0.5) == pytest.approx(0.25)
    assert crps_quad([0.0, 1.0], 0.5) == pytest.approx(0.25, abs=1e-8)
    x = np.array([1.0, 2.0, 4.0, 7.0])
    assert crps(x, -1e6) == pytest.approx(x.mean() + 1e6, rel=1e-5)


def test_crps_matches_quadrature():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.gumbel(size=rng.integers(1, 30))
        obs = rng.gumbel()
        assert crps(x, obs) == pytest.approx(crps_quad(x, obs), abs=1e-6)


def test_crps_nonneg_and_zero_iff_exact():
    assert crps([3.0, 3.0, 3.0], 3.0) == 0.0
    rng = np.random.default_rng(1)
    for _ in range(50):
        x = rng.normal(size=5)
        assert crps(x, rng.normal()) > 0
    with pytest.raises(ValidationError):
        crps([], 0.0)


def test_rmse():
    ens = [np.array([1.0, 3.0]), np.array([5.0]), np.array([-2.0, 0.0, 2.0])]
    obs = np.array([2.0, 5.0, 0.0])
    assert rmse_of_mean(ens, obs) == 0.0
    assert rmse_of_mean(ens, obs + 0.7) == pytest.approx(0.7)
    o = np.array([1.0, 2.0, 3.0])
    assert rmse_of_mean(ens, o) == pytest.approx(np.sqrt(np.mean((np.array([2, 5, 0]) - o) ** 2)))


def test_pit_rank_and_chisquare():
    rng = np.random.default_rng(2)
    assert pit_rank([1.0, 2.0, 3.0], 2.5, rng) == 2
    r = {pit_rank([1.0, 2.0, 2.0, 3.0], 2.0, rng) for _ in range(200)}
    assert r == {1, 2, 3}
    ranks = [pit_rank(rng.normal(size=19), rng.normal(), rng) for _ in range(2000)]
    _, p = pit_chisquare(ranks, 19)
    assert p > 0.01
    _, p = pit_chisquare([pit_rank(rng.normal(size=19), 2 + rng.normal(), rng) for _ in range(2000)], 19)
    assert p < 1e-6
    with pytest.raises(ValidationError):
        pit_chisquare(ranks, 19, n_bins=3)


@pytest.fixture(scope="module")
def sim():
    ps = ModelParams(Semivariogram(1.5, 0.6), (0.0, 1.0), 0.8)
    return simulate_st(SpatialGrid(1.0, (6, 6)), 80, ps, 4, history=30), ps


def test_protocol_deterministic(sim):
    f, ps = sim
    a, _ = evaluate_protocol(f, ps, leads=[1, 2], n_events=50, n_members=40, seed=3)
    b, _ = evaluate_protocol(f, ps, leads=[1, 2], n_events=50, n_members=40, seed=3)
    assert score_table_csv(a) == score_table_csv(b)
    assert score_table_csv(a).splitlines()[0] == "lead,mean_crps,rmse,n_events,n_excluded"
    for row in a:
        assert row.n_events + row.n_excluded == 50


def test_protocol_excludes_off_domain(sim):
    f, ps = sim
    rows, evs = evaluate_protocol(f, ps, leads=[1, 3], n_events=100, n_members=10, seed=0)
    site, t = sample_events(f, 3, 100, __import__("maxar").rng.substream(0, 0))
    upwind = f.grid.cells[site][:, 1]
    assert rows[0].n_excluded == int(np.sum(upwind < 1))
    assert rows[1].n_excluded == int(np.sum(upwind < 3))


def test_protocol_insufficient_events(sim):
    f, ps = sim
    with pytest.raises(DataError, match="only 2844 admissible"):
        evaluate_protocol(f, ps, leads=[1], n_events=10_000, n_members=5, seed=0)
    with pytest.raises(DataError, match="only 36 admissible"):
        sample_events(f, 79, 37, np.random.default_rng(0))


def test_near_deterministic_forecast_scores_near_zero():
    ps = ModelParams(Semivariogram(1.5, 0.6), (0.0, 1.0), 0.999)
    f = simulate_st(SpatialGrid(1.0, (4, 6)), 40, ps, 5)
    rows, _ = evaluate_protocol(f, ps, leads=[1], n_events=60, n_members=50, seed=1)
    assert rows[0].mean_crps < 0.02


def test_ensemble_size_effect(sim):
    f, ps = sim
    r1, _ = evaluate_protocol(f, ps, leads=[2], n_events=200, n_members=1, seed=2)
    r500, _ = evaluate_protocol(f, ps, leads=[2], n_events=200, n_members=500, seed=2)
    assert r1[0].mean_crps >= r500[0].mean_crps


def test_raw_scale_needs_marginals(sim):
    f, ps = sim
    with pytest.raises(ValidationError, match="raw-scale"):
        evaluate_protocol(f, ps, leads=[1], n_events=5, n_members=5, scale="raw")
