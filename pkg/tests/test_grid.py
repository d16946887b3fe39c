import math

import numpy as np
import pytest

from maxar.errors import DataError, ValidationError
from maxar.grid import SpatialGrid, SpaceTimeField, build_mask, load_field, save_field


def _write(path, rows):
    with open(path, "w") as fh:
        fh.write("lon,lat,t,value\n")
        for r in rows:
            fh.write(",".join(repr(x) for x in r) + "\n")


def test_load_2x2_grid(tmp_path):
    rows = [(x, y, t, 10 * x + y + t) for x in (0.0, 1.0) for y in (5.0, 6.0) for t in (1, 2)]
    _write(tmp_path / "f.csv", rows[::-1])          # order in the file is irrelevant
    f = load_field(tmp_path / "f.csv")
    assert f.grid.shape == (2, 2) and f.T == 2 and f.grid.mesh == 1.0
    assert f.grid.origin == (0.0, 5.0)
    # row-major: site 1 is (i1=0, i2=1) -> lon 0, lat 6
    assert f.values[1, 0] == 0 + 6 + 1


def test_incomplete_grid_names_missing_cell(tmp_path):
    rows = [(x, y, t, 1.0) for x in (0.0, 1.0) for y in (0.0, 1.0) for t in (1, 2)]
    del rows[3]
    _write(tmp_path / "f.csv", rows)
    with pytest.raises(DataError, match="incomplete grid.*t=2"):
        load_field(tmp_path / "f.csv")


def test_irregular_spacing(tmp_path):
    rows = [(x, 0.0, 1, 1.0) for x in (0.0, 1.0, 2.5)]
    _write(tmp_path / "f.csv", rows)
    with pytest.raises(DataError, match="irregular grid"):
        load_field(tmp_path / "f.csv")


def test_quarter_degree_216_sites(tmp_path):
    # 18 x 12 grid at 0.25 degrees, as in a typical reanalysis extract
    lons = -5 + 0.25 * np.arange(18)
    lats = 45 + 0.25 * np.arange(12)
    rows = [(float(x), float(y), 1, 1.0) for x in lons for y in lats]
    _write(tmp_path / "f.csv", rows)
    f = load_field(tmp_path / "f.csv")
    assert f.grid.mesh == pytest.approx(0.25, rel=1e-12)
    assert f.grid.shape == (18, 12) and f.grid.n_sites == 216


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    g = SpatialGrid(0.1, (3, 4), (0.3, -1.7))
    f = SpaceTimeField(g, rng.gumbel(size=(12, 5)) * 1e-3 + 1 / 3, "raw")
    save_field(f, tmp_path / "a.csv")
    f2 = load_field(tmp_path / "a.csv")
    assert np.array_equal(f.values, f2.values)
    save_field(f2, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_frechet_field_must_be_positive():
    g = SpatialGrid(1.0, (1, 2))
    with pytest.raises(DataError):
        SpaceTimeField(g, np.array([[1.0], [-1.0]]), "frechet")


def test_mask_r1_full_and_half():
    full = build_mask(1.0, 1, 1)
    assert sorted(map(tuple, full.cells)) == [(-1, 0), (0, -1), (0, 0), (0, 1), (1, 0)]
    half = build_mask(1.0, 1, 1, spatial_only=True)
    assert sorted(map(tuple, half.cells)) == [(0, 1), (1, 0)]


def test_mask_r21_count_matches_enumeration():
    # brute-force count of integer points in the closed disk of radius 21
    n = sum(1 for i in range(-21, 22) for j in range(-21, 22) if i * i + j * j <= 441)
    assert len(build_mask(1.0, 21, 1)) == n


@pytest.mark.parametrize("r", [1, math.sqrt(2), 2.5, 7])
def test_half_plane_union_negation_is_full(r):
    half = {tuple(c) for c in build_mask(1.0, r, 1, True).cells}
    neg = {(-a, -b) for a, b in half}
    assert not half & neg and (0, 0) not in half
    assert half | neg | {(0, 0)} == {tuple(c) for c in build_mask(1.0, r, 1).cells}


def test_mask_preconditions():
    with pytest.raises(ValidationError):
        build_mask(1.0, 0.5, 1)
    with pytest.raises(ValidationError):
        build_mask(1.0, 1, 0)
