import math

import numpy as np
import pytest

from maxar.brown_resnick import Semivariogram
from maxar.errors import ValidationError
from maxar.gev import GevParams, from_frechet
from maxar.grid import SpaceTimeField, SpatialGrid, build_mask
from maxar.inference import (FitResult, OptimizerConfig, PsiEpsilon, TermSet, bootstrap_ci,
                             count_terms, default_epsilon, fit_two_step, spacetime_pl, spatial_pl)
from maxar.model import ModelParams, StPair, log_pair_density, simulate_st


def _field(shape, T, seed, mesh=1.0):
    v = 1 / np.random.default_rng(seed).standard_exponential((shape[0] * shape[1], T))
    return SpaceTimeField(SpatialGrid(mesh, shape), v, "frechet")


def test_two_sites_one_time_is_pair_density():
    f = _field((2, 1), 1, 0)
    z = f.values[:, 0]
    got = spatial_pl(f, build_mask(1.0, 1, 1, True), 1.7, 0.4)
    ref = log_pair_density(StPair((1.0, 0.0), 0), z[0], z[1],
                           ModelParams(Semivariogram(1.7, 0.4), (0, 0), 0.5))
    assert got == pytest.approx(float(ref), rel=1e-12)


def test_single_pair_spacetime_is_pair_density():
    f = _field((1, 1), 2, 1)
    psi = ModelParams(Semivariogram(1.2, 0.7), (0.3, 0.4), 0.6)
    got = spacetime_pl(f, build_mask(1.0, 1, 1, False), 1, psi)
    z = f.values[0]
    assert got == pytest.approx(float(log_pair_density(StPair((0, 0), 1), z[0], z[1], psi)), rel=1e-12)


def test_doubling_T_doubles_value():
    f = _field((4, 3), 30, 2)
    g = SpaceTimeField(f.grid, np.concatenate([f.values, f.values], axis=1), "frechet")
    m = build_mask(1.0, 2, 1, True)
    assert spatial_pl(g, m, 1.5, 0.5) == pytest.approx(2 * spatial_pl(f, m, 1.5, 0.5), rel=1e-9)


def test_relabelling_sites_leaves_value_unchanged():
    f = _field((5, 3), 20, 3)
    vt = f.values.reshape(5, 3, 20).transpose(1, 0, 2).reshape(15, 20)
    g = SpaceTimeField(SpatialGrid(1.0, (3, 5)), vt, "frechet")
    ms, mf = build_mask(1.0, 2, 1, True), build_mask(1.0, 1.5, 1, False)
    assert spatial_pl(g, ms, 1.3, 0.6) == pytest.approx(spatial_pl(f, ms, 1.3, 0.6), rel=1e-12)
    p1 = ModelParams(Semivariogram(1.3, 0.6), (0.3, -0.7), 0.6)
    p2 = ModelParams(Semivariogram(1.3, 0.6), (-0.7, 0.3), 0.6)
    assert spacetime_pl(g, mf, 1, p2) == pytest.approx(spacetime_pl(f, mf, 1, p1), rel=1e-12)


def test_kernel_matches_numpy_reference():
    f = _field((4, 4), 15, 4)
    m = build_mask(1.0, 1.5, 2, False)
    ts = TermSet(f, m, 2)
    psi = ModelParams(Semivariogram(0.8, 0.9), (0.45, 0.2), 0.7)
    vals, nclip = ts.terms(psi.sv, psi.tau, psi.a)
    assert nclip == 0
    lz = np.log(f.values)
    ref = np.array([
        log_pair_density(StPair(ts.lag_h[l], ts.lag_u[l]), math.exp(lz[i, t]),
                         math.exp(lz[j, t + ts.lag_u[l]]), psi)
        for i, j, t, l in zip(ts.i1, ts.i2, ts.t1, ts.lag)])
    np.testing.assert_allclose(vals, ref, rtol=1e-11, atol=1e-11)
    assert ts.loglik(psi.sv, psi.tau, psi.a)[0] == pytest.approx(ref.sum(), rel=1e-12)


def test_outside_psi_eps_rejected():
    f = _field((3, 3), 5, 5)
    m = build_mask(1.0, 1, 1, False)
    near = ModelParams(Semivariogram(1, 0.5), (1.01, 0.0), 0.5)
    with pytest.raises(ValidationError, match="outside Psi_eps"):
        spacetime_pl(f, m, 1, near)
    with pytest.raises(ValidationError, match="outside Psi_eps"):
        spacetime_pl(f, m, 1, ModelParams(Semivariogram(1, 0.5), (0.5, 0.5), 0.99))
    with pytest.raises(ValidationError, match="epsilon"):
        PsiEpsilon(0.6, 1.0, m, 1)
    assert default_epsilon(0.25, 1) == pytest.approx(0.025)


def test_degenerate_lag_is_refused_by_the_term_set():
    ts = TermSet(_field((3, 3), 5, 6), build_mask(1.0, 1, 1, False), 1)
    with pytest.raises(ValidationError, match="degenerate pair"):
        ts.loglik(Semivariogram(1, 0.5), (1.0, 0.0), 0.5)


def test_term_counts_closed_form():
    grid = SpatialGrid(0.25, (18, 12))
    assert count_terms(grid, build_mask(0.25, 21, 1, False), 105, 1) == 216 ** 2 * 104 == 4_852_224
    assert count_terms(grid, build_mask(0.25, 21, 1, True), 105, 0) == 2_438_100
    f = SpaceTimeField(grid, np.ones((216, 105)), "frechet")
    assert len(TermSet(f, build_mask(0.25, 21, 1, True), 0)) == 2_438_100
    g = _field((6, 5), 12, 7)
    for r, p in [(1, 1), (2.5, 2), (1.5, 3)]:
        m = build_mask(1.0, r, p, False)
        assert len(TermSet(g, m, p)) == count_terms(g.grid, m, 12, p)


def test_truth_beats_perturbations_on_simulated_fields():
    psi = ModelParams(Semivariogram(2.0, 0.6), (1.0, 0.0), 0.8)
    grid = SpatialGrid(0.5, (8, 8))
    ms, mf = build_mask(0.5, 3, 1, True), build_mask(0.5, 1, 1, False)
    for seed in range(10):
        f = simulate_st(grid, 60, psi, seed, history=30)
        s0 = spatial_pl(f, ms, 2.0, 0.6)
        assert s0 > spatial_pl(f, ms, 6.0, 0.6)
        assert s0 > spatial_pl(f, ms, 0.7, 0.6)
        t0 = spacetime_pl(f, mf, 1, psi)
        for pert in [ModelParams(psi.sv, (0.5, 0.4), 0.8), ModelParams(psi.sv, (1.0, 0.0), 0.4)]:
            assert t0 > spacetime_pl(f, mf, 1, pert)


def test_fit_result_text_round_trip():
    fr = FitResult(ModelParams(Semivariogram(2.1, 0.61), (0.9, -0.05), 0.79), -123.5, -456.25,
                   100, 200, 0.05, 3.0, 1.0, 1, n_clipped=2, boundary=True, converged=False,
                   warnings=["boundary solution"], trace=[("spatial", [1.0, 0.4], -130.0, 55)])
    back = FitResult.from_text(fr.to_text())
    assert back == fr
    assert back.to_text() == fr.to_text()


def test_fit_recovers_parameters_quickly():
    psi = ModelParams(Semivariogram(2.0, 0.6), (1.0, 0.0), 0.8)
    f = simulate_st(SpatialGrid(0.5, (10, 10)), 100, psi, 11, history=30)
    res = fit_two_step(f, build_mask(0.5, 4, 1, True), build_mask(0.5, 1, 1, False), 1,
                       config=OptimizerConfig(restarts=2, xatol=1e-3, fatol=1e-2))
    v = res.psi.as_vector()
    assert abs(v[0] - 2.0) < 0.6 and abs(v[1] - 0.6) < 0.1
    # tau2 is weakly identified on a field this small (seed spread about 0.15)
    assert abs(v[2] - 1.0) < 0.15 and abs(v[3]) < 0.4 and abs(v[4] - 0.8) < 0.05
    assert not res.boundary
    assert res.n_terms_spacetime == count_terms(f.grid, build_mask(0.5, 1, 1, False), 100, 1)


def test_degenerate_bootstrap_has_zero_width():
    psi = ModelParams(Semivariogram(2.0, 0.6), (1.0, 0.0), 0.8)
    f = simulate_st(SpatialGrid(0.5, (5, 5)), 60, psi, 12, history=20)
    raw = SpaceTimeField(f.grid, from_frechet(f.values, GevParams(5.0, 2.0, 0.1)), "raw")
    cfg = OptimizerConfig(restarts=1, xatol=1e-3, fatol=1e-2)
    every = lambda rng, T: np.arange(T)
    ms, mf = build_mask(0.5, 3, 1, True), build_mask(0.5, 1, 1, False)
    res = bootstrap_ci(raw, B=3, seed=0, marginals="fit", mask_s=ms, mask_st=mf, config=cfg,
                       sampler=every)
    assert res.n_failed == 0
    assert np.ptp(res.estimates, axis=0).max() < 1e-9
    # replicates refit from the full estimate, so they agree with it only to
    # optimiser tolerance (xatol 1e-3 in the transformed space)
    width = res.hi - res.lo
    assert np.all(width < 1e-2 * np.maximum(1, np.abs(res.hi)))
    with pytest.raises(ValidationError, match="B >= 50"):
        bootstrap_ci(f, B=10, marginals=None)
