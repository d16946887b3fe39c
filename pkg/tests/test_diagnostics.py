import math

import numpy as np
import pytest
from scipy.special import ndtr

from maxar.brown_resnick import Semivariogram, simulate_br
from maxar.diagnostics import (RatioFieldCdf, detect_atom, empirical_crosscorr, fmadogram_binned,
                               fmadogram_theta, ratio_field_cdf)
from maxar.errors import DataError, ValidationError
from maxar.grid import SpaceTimeField, SpatialGrid
from maxar.model import ModelParams, simulate_st


def _iid(shape, T, seed, mesh=1.0):
    v = 1 / np.random.default_rng(seed).standard_exponential((shape[0] * shape[1], T))
    return SpaceTimeField(SpatialGrid(mesh, shape), v, "frechet")


@pytest.fixture(scope="module")
def advected():
    ps = ModelParams(Semivariogram(2.0, 0.5), (1.0, 0.0), 0.5)
    return simulate_st(SpatialGrid(1.0, (8, 8)), 200, ps, 21, history=40)


def test_ratio_atom_when_tau_equals_lag(advected):
    cdf = ratio_field_cdf(advected, (1.0, 0.0), 1)
    loc, mass = detect_atom(cdf)
    assert loc == pytest.approx(0.5, rel=1e-9)
    # seed-to-seed sd of the mass is about 0.025 on this grid (spatial dependence)
    assert mass == pytest.approx(0.5, abs=0.075)
    assert cdf(0.5 * (1 - 1e-9)) == 0.0


def test_no_atom_off_advection(advected):
    cdf = ratio_field_cdf(advected, (0.0, 1.0), 1)
    assert detect_atom(cdf) is None
    assert cdf.values[0] < 0.05


def test_iid_ratio_is_symmetric():
    cdf = ratio_field_cdf(_iid((5, 5), 400, 1), (0.0, 0.0), 1)
    assert cdf(1.0) == pytest.approx(0.5, abs=0.02)
    z = np.linspace(0.1, 5, 30)
    c = cdf(z)
    assert np.all(np.diff(c) >= 0) and c.min() >= 0 and c.max() <= 1


def test_detect_atom_constructed():
    rng = np.random.default_rng(0)
    v = np.sort(np.concatenate([np.full(500, 0.5), 0.5 + rng.exponential(size=500)]))
    assert detect_atom(RatioFieldCdf((1.0, 0.0), 1, v)) == (0.5, 0.5)
    smooth = RatioFieldCdf((1.0, 0.0), 1, np.sort(rng.exponential(size=1000)))
    assert detect_atom(smooth) is None


def test_ratio_errors_and_csv():
    f = _iid((3, 3), 10, 2)
    with pytest.raises(DataError):
        ratio_field_cdf(f, (5.0, 0.0), 1)
    with pytest.raises(ValidationError, match="not a multiple"):
        ratio_field_cdf(f, (0.5, 0.0), 1)
    with pytest.raises(ValidationError):
        ratio_field_cdf(f, (1.0, 0.0), 0)
    text = ratio_field_cdf(f, (1.0, 0.0), 2).to_csv()
    assert text.startswith("h1,h2,u,z,cdf\n")


def test_madogram_identical_and_independent():
    f = _iid((2, 1), 200_000, 3)
    same = SpaceTimeField(f.grid, np.vstack([f.values[0], f.values[0]]), "frechet")
    r = fmadogram_theta(same, [(0, 1)])
    assert r.nu[0] == 0 and r.theta[0] == 1.0
    r = fmadogram_theta(f, [(0, 1)])
    assert r.nu[0] == pytest.approx(1 / 6, abs=3e-3)
    assert r.theta[0] == pytest.approx(2.0, abs=0.03)


@pytest.mark.parametrize("d", [0.5, 1.5, 4.0])
def test_madogram_matches_br_theta(d):
    sv = Semivariogram(1.5, 0.7)
    n = 100_000
    Z = simulate_br([[0, 0], [d, 0]], sv, 30, size=n).T
    f = SpaceTimeField(SpatialGrid(d, (2, 1)), Z, "frechet")
    r = fmadogram_theta(f, [(0, 1)])
    F = np.exp(-1 / Z)
    sd_nu = np.std(np.abs(F[0] - F[1])) / 2 / math.sqrt(n)
    sd_th = 4 * sd_nu / (1 - 2 * r.nu[0]) ** 2
    ref = 2 * ndtr(math.sqrt(sv.of_distance(d) / 2))
    assert abs(r.theta[0] - ref) < 3 * sd_th


def test_binned_madogram_monotone_and_clipped():
    ps = ModelParams(Semivariogram(1.0, 0.5), (0.0, 0.0), 0.1)
    f = simulate_st(SpatialGrid(1.0, (6, 6)), 400, ps, 22)
    centres, th, cnt, clipped = fmadogram_binned(f, np.arange(0.5, 8.0, 1.0))
    ok = cnt > 0
    assert np.all((th[ok] >= 1) & (th[ok] <= 2))
    assert np.all(np.diff(th[ok]) > -0.03)
    assert th[ok][0] < th[ok][-1]
    r = fmadogram_theta(_iid((3, 1), 30, 4), [(0, 1), (0, 2), (1, 2)])
    assert np.all(r.theta <= 2) and r.clipped.dtype == bool


def test_crosscorr_limits():
    f = _iid((6, 6), 2000, 5)
    c0 = empirical_crosscorr(f, (0.0, 0.0), 0)
    assert c0.mean == pytest.approx(1.0, abs=0.05)
    c1 = empirical_crosscorr(f, (1.0, 0.0), 1)
    assert abs(c1.mean) < 3 / math.sqrt(2000)
    assert c1.lo <= c1.mean <= c1.hi


def test_crosscorr_location_free_and_negative_lag():
    f = _iid((5, 4), 300, 6)
    g = SpaceTimeField(f.grid, f.values * 7.3, "frechet")
    a = empirical_crosscorr(f, (1.0, -1.0), 2)
    b = empirical_crosscorr(g, (1.0, -1.0), 2)
    assert a.mean == pytest.approx(b.mean, rel=1e-10, abs=1e-12)
    c = empirical_crosscorr(f, (-1.0, 1.0), -2)
    assert c.mean == a.mean and c.u == 2


def test_crosscorr_needs_three_sites():
    with pytest.raises(DataError, match="fewer than 3"):
        empirical_crosscorr(_iid((3, 1), 50, 7), (2.0, 0.0), 1)
