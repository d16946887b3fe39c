import math

import numpy as np
import pytest
from scipy import stats

from maxar.brown_resnick import Semivariogram
from maxar.errors import ValidationError
from maxar.forecast import (ForecastRequest, OffDomainError, forecast_grid, forecast_point,
                            locate_source)
from maxar.gev import GevParams, MarginalModel, gev_quantile
from maxar.grid import SpaceTimeField, SpatialGrid
from maxar.model import ModelParams, conditional_law

frechet = stats.invweibull(1)


def _field(shape, T=3, mesh=1.0, seed=0):
    v = 1 / np.random.default_rng(seed).standard_exponential((shape[0] * shape[1], T))
    return SpaceTimeField(SpatialGrid(mesh, shape), v, "frechet")


def P(tau=(1.0, 0.0), a=0.7):
    return ModelParams(Semivariogram(1.5, 0.6), tau, a)


def _ks_with_atom(x, law):
    xs = np.sort(x)
    n = len(xs)
    right = np.searchsorted(xs, xs, side="right") / n
    left = np.searchsorted(xs, xs, side="left") / n
    F = law.cdf(xs)
    Fl = np.where(xs > law.loc, F, 0.0)
    return max(np.max(np.abs(right - F)), np.max(np.abs(left - Fl)))


def test_request_validation():
    with pytest.raises(ValidationError, match="lead u"):
        ForecastRequest(0, 1, 0, 10, P())
    with pytest.raises(ValidationError, match="ensemble size"):
        ForecastRequest(0, 1, 1, 0, P())
    with pytest.raises(ValidationError, match="lead u"):
        forecast_grid(_field((3, 3)), 1, 0, 10, P())


@pytest.mark.parametrize("u,a", [(1, 0.7), (3, 0.9), (2, 0.3)])
def test_on_grid_ensemble_matches_conditional_law(u, a):
    f = _field((6, 4), seed=u)
    ps = P((1.0, 0.0), a)
    site = f.grid.index(5, 2)
    ens = forecast_point(ForecastRequest(int(site), 2, u, 10_000, ps), f, 9)
    assert ens.conditioned == "grid"
    src = f.grid.index(5 - u, 2)
    assert ens.source_sites == [int(src)]
    law = conditional_law(u, f.values[src, 1], ps)
    assert _ks_with_atom(ens.frechet, law) < 0.02
    assert len(ens) == 10_000 and np.all(ens.frechet > 0)


def test_atom_mass_exact_on_grid():
    f = _field((4, 4), seed=3)
    ps = P((0.0, 1.0), 0.8)
    ens = forecast_point(ForecastRequest(int(f.grid.index(1, 3)), 1, 1, 100_000, ps), f, 4)
    law = conditional_law(1, f.values[f.grid.index(1, 2), 0], ps)
    m = law.atom_mass
    hit = np.mean(ens.frechet == law.loc)
    assert abs(hit - m) < 3 * math.sqrt(m * (1 - m) / 100_000)


def test_limits_in_a():
    f = _field((5, 5), seed=5)
    site = int(f.grid.index(3, 3))
    src = int(f.grid.index(2, 3))
    e = forecast_point(ForecastRequest(site, 1, 1, 2000, P((1.0, 0.0), 1 - 1e-9)), f, 1)
    np.testing.assert_allclose(e.frechet, f.values[src, 0], rtol=1e-6)
    e = forecast_point(ForecastRequest(site, 1, 1, 10_000, P((1.0, 0.0), 1e-9)), f, 2)
    assert stats.kstest(e.frechet, frechet.cdf).pvalue > 0.01


def test_off_grid_source_conditions_on_cell_vertices():
    f = _field((6, 6), seed=6)
    ps = P((0.5, 0.25), 0.8)
    kind, sites, x = locate_source(f.grid, int(f.grid.index(4, 4)), 1, ps.tau)
    assert kind == "simulated"
    np.testing.assert_allclose(x, [3.5, 3.75])
    assert sorted(sites) == sorted(int(f.grid.index(i, j)) for i in (3, 4) for j in (3, 4))
    e = forecast_point(ForecastRequest(int(f.grid.index(4, 4)), 1, 1, 500, ps), f, 3)
    assert e.conditioned == "simulated" and np.all(e.frechet > 0)
    # source on the last grid row: the enclosing cell is the one below it
    kind, sites, _ = locate_source(f.grid, int(f.grid.index(5, 4)), 1, (0.0, 0.5))
    assert kind == "simulated"
    assert {int(f.grid.index(5, 3)), int(f.grid.index(5, 4))} <= set(sites) and len(sites) == 4


def test_snapping_to_grid():
    g = SpatialGrid(0.25, (5, 5))
    kind, sites, _ = locate_source(g, int(g.index(3, 3)), 1, (0.25 + 1e-12, 0.0))
    assert kind == "grid" and sites == [int(g.index(2, 3))]


def test_off_domain_error_message():
    f = _field((4, 4))
    with pytest.raises(OffDomainError, match="advected source off-domain"):
        forecast_point(ForecastRequest(0, 1, 1, 10, P((1.0, 0.0))), f, 0)


def test_zero_advection_no_missing():
    gf = forecast_grid(_field((10, 10)), 2, 3, 5, P((0.0, 0.0)), seed=1)
    assert not gf.missing.any()


def test_case_study_strip_count():
    grid = SpatialGrid(0.25, (18, 12))
    f = SpaceTimeField(grid, np.ones((216, 2)), "frechet")
    tau, u = (0.35, -0.14), 7
    gf = forecast_grid(f, 1, u, 2, P(tau, 0.97), seed=0)
    # independent enumeration: source inside the grid's bounding box
    src = grid.coords - u * np.array(tau)
    hi = grid.mesh * (np.array(grid.shape) - 1)
    inside = np.all((src >= -1e-12) & (src <= hi + 1e-12), axis=1)
    assert inside.sum() == 64
    assert gf.missing.sum() == 152
    assert np.array_equal(~gf.missing, inside)


def test_grid_forecast_independent_of_workers(tmp_path):
    f = _field((4, 5), seed=8)
    ps = P((0.5, 0.0), 0.8)
    g1 = forecast_grid(f, 2, 1, 50, ps, seed=4, threads=1)
    g2 = forecast_grid(f, 2, 1, 50, ps, seed=4, threads=2)
    assert g1.to_csv(f.grid) == g2.to_csv(f.grid)
    text = g1.to_csv(f.grid)
    assert text.splitlines()[0] == "i1,i2,t0,u,member,value_frechet,value_raw,conditioned"
    assert ",,nan,nan,missing" in text


def test_back_transform_uses_site_gev():
    f = _field((3, 1))
    g = GevParams(10.0, 2.0, 0.1)
    marg = MarginalModel([g, None, g], [])
    ps = P((1.0, 0.0), 0.5)
    e = forecast_point(ForecastRequest(2, 1, 1, 100, ps, marg), f, 0)
    np.testing.assert_allclose(e.raw, gev_quantile(np.exp(-1 / e.frechet), g), rtol=1e-10)
    e = forecast_point(ForecastRequest(1, 1, 1, 10, ps, marg), f, 0)
    assert e.raw is None


def test_non_frechet_field_rejected():
    f = _field((3, 3))
    raw = SpaceTimeField(f.grid, f.values, "raw")
    with pytest.raises(ValidationError, match="Frechet"):
        forecast_point(ForecastRequest(4, 1, 1, 5, P((0.0, 0.0))), raw, 0)
