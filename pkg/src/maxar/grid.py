"""Regular spatial grids, space-time fields and pair design masks.

Sites are addressed internally by 0-based integer cells ``(i1, i2)`` and
enumerated row-major (``site = i1 * m2 + i2``). Physical coordinates only
appear at I/O boundaries. Files use 1-based time indices.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import DataError, ValidationError

SCALES = ("raw", "frechet", "gumbel")
REL_TOL = 1e-9


@dataclass(frozen=True)
class SpatialGrid:
    mesh: float
    shape: tuple
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not (self.mesh > 0 and math.isfinite(self.mesh)):
            raise ValidationError(f"mesh must be positive, got {self.mesh}")
        m1, m2 = (int(m) for m in self.shape)
        if m1 < 1 or m2 < 1:
            raise ValidationError(f"grid shape must be positive, got {self.shape}")
        object.__setattr__(self, "shape", (m1, m2))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def n_sites(self):
        return self.shape[0] * self.shape[1]

    @property
    def cells(self):
        m1, m2 = self.shape
        i1, i2 = np.meshgrid(np.arange(m1), np.arange(m2), indexing="ij")
        return np.column_stack([i1.ravel(), i2.ravel()])

    @property
    def coords(self):
        return np.asarray(self.origin) + self.mesh * self.cells

    def index(self, i1, i2):
        """Row-major site index of cell(s); -1 where outside the grid."""
        i1 = np.asarray(i1)
        i2 = np.asarray(i2)
        m1, m2 = self.shape
        inside = (i1 >= 0) & (i1 < m1) & (i2 >= 0) & (i2 < m2)
        return np.where(inside, i1 * m2 + i2, -1)

    def to_cell_units(self, x):
        """Physical position(s) -> fractional cell coordinates."""
        return (np.asarray(x, dtype=float) - np.asarray(self.origin)) / self.mesh

    def shifted_index(self, shift):
        """For each site s, index of s + shift (integer cells) or -1."""
        c = self.cells + np.asarray(shift, dtype=int)
        return self.index(c[:, 0], c[:, 1])


@dataclass
class SpaceTimeField:
    grid: SpatialGrid
    values: np.ndarray          # (n_sites, T)
    scale: str = "raw"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.scale not in SCALES:
            raise ValidationError(f"unknown scale tag {self.scale!r}")
        if self.values.ndim != 2 or self.values.shape[0] != self.grid.n_sites:
            raise ValidationError(
                f"values must have shape (n_sites={self.grid.n_sites}, T), got {self.values.shape}")
        if self.values.shape[1] < 1:
            raise ValidationError("field needs at least one time step")
        if not np.all(np.isfinite(self.values)):
            raise DataError("field contains non-finite values")
        if self.scale == "frechet" and np.any(self.values <= 0):
            raise DataError("Frechet-scale field must be strictly positive")

    @property
    def T(self):
        return self.values.shape[1]

    def slice(self, t):
        """Values at 1-based time t."""
        if not 1 <= t <= self.T:
            raise ValidationError(f"time index {t} outside 1..{self.T}")
        return self.values[:, t - 1]

    def restrict_time(self, t0, t1):
        """Field on 1-based times t0..t1 inclusive."""
        return SpaceTimeField(self.grid, self.values[:, t0 - 1:t1].copy(), self.scale)


@dataclass(frozen=True)
class DesignMask:
    mesh: float
    r: float
    p: int
    cells: np.ndarray = dc_field(repr=False)   # (k, 2) integer lags
    spatial_only: bool = False

    @property
    def lags(self):
        return self.mesh * self.cells

    def __len__(self):
        return len(self.cells)


def build_mask(mesh, r, p=1, spatial_only=False):
    if r < 1:
        raise ValidationError(f"lag radius r must be >= 1, got {r}")
    if int(p) != p or p < 1:
        raise ValidationError(f"temporal lag p must be a positive integer, got {p}")
    R = int(math.floor(r))
    z = np.arange(-R, R + 1)
    z1, z2 = np.meshgrid(z, z, indexing="ij")
    cells = np.column_stack([z1.ravel(), z2.ravel()])
    # tiny slack so that e.g. r = sqrt(2) keeps the diagonal
    cells = cells[np.hypot(cells[:, 0], cells[:, 1]) <= r * (1 + 1e-12)]
    if spatial_only:
        keep = (cells[:, 0] > 0) | ((cells[:, 0] == 0) & (cells[:, 1] > 0))
        cells = cells[keep]
    return DesignMask(float(mesh), float(r), int(p), cells.astype(int), bool(spatial_only))


def _lattice_axis(vals, name):
    u = np.unique(vals)
    if len(u) == 1:
        return u[0], None, 1
    step = (u[-1] - u[0]) / (len(u) - 1)
    idx = np.arange(len(u))
    if np.max(np.abs(u - (u[0] + step * idx))) > REL_TOL * step:
        raise DataError(f"irregular grid: {name} spacing is not uniform")
    return u[0], step, len(u)


def load_field(path, scale="raw", mesh=None):
    """Read a ``lon,lat,t,value`` CSV into a validated field."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file")
        if header != ["lon", "lat", "t", "value"]:
            raise DataError(f"{path}: expected header lon,lat,t,value, got {','.join(header)}")
        rows = [r for r in reader if r]
    if not rows:
        raise DataError(f"{path}: no data rows")
    try:
        arr = np.array([[float(x) for x in r] for r in rows])
    except ValueError as e:
        raise DataError(f"{path}: unparsable row ({e})")
    if arr.shape[1] != 4:
        raise DataError(f"{path}: expected 4 columns")
    lon, lat, t, val = arr.T
    if np.any(t != np.round(t)) or np.any(t < 1):
        raise DataError("time index must be an integer >= 1")
    x0, s1, m1 = _lattice_axis(lon, "lon")
    y0, s2, m2 = _lattice_axis(lat, "lat")
    steps = [s for s in (s1, s2) if s is not None]
    if mesh is None:
        if not steps:
            mesh = 1.0
        else:
            mesh = steps[0]
            if len(steps) == 2 and abs(steps[0] - steps[1]) > REL_TOL * steps[0]:
                raise DataError(f"irregular grid: lon spacing {steps[0]} != lat spacing {steps[1]}")
    grid = SpatialGrid(float(mesh), (m1, m2), (x0, y0))
    i1 = np.rint((lon - x0) / mesh).astype(int)
    i2 = np.rint((lat - y0) / mesh).astype(int)
    if np.any(np.abs(lon - (x0 + mesh * i1)) > REL_TOL * mesh) or \
            np.any(np.abs(lat - (y0 + mesh * i2)) > REL_TOL * mesh):
        raise DataError("irregular grid: coordinates off the lattice")
    T = int(t.max())
    site = grid.index(i1, i2)
    ti = t.astype(int) - 1
    values = np.full((grid.n_sites, T), np.nan)
    seen = np.zeros((grid.n_sites, T), dtype=int)
    np.add.at(seen, (site, ti), 1)
    if np.any(seen > 1):
        s, tt = np.argwhere(seen > 1)[0]
        raise DataError(f"duplicate cell at site {tuple(grid.coords[s])}, t={tt + 1}")
    if np.any(seen == 0):
        s, tt = np.argwhere(seen == 0)[0]
        raise DataError(f"incomplete grid: missing site {tuple(grid.coords[s])}, t={tt + 1}")
    values[site, ti] = val
    return SpaceTimeField(grid, values, scale)


def save_field(field, path):
    path = Path(path)
    coords = field.grid.coords
    with open(path, "w") as fh:
        fh.write("lon,lat,t,value\n")
        for s in range(field.grid.n_sites):
            x, y = coords[s]
            for t in range(field.T):
                fh.write(f"{x:.17g},{y:.17g},{t + 1},{field.values[s, t]:.17g}\n")
    return path
