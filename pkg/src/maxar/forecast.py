"""Ensemble forecasts at lead u from the field at a base time t0.

The recursion gives Z(s, t0+u) = max{a^u Z(s - u tau, t0), (1 - a^u) W~} with W~
standard Frechet and independent of the past. When s - u tau is a grid site
its observed value is used; otherwise the value there is drawn from the
Brown-Resnick conditional law given the four vertices of the enclosing cell.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from .brown_resnick import conditional_sample_br
from .errors import ValidationError
from .gev import MarginalModel, from_frechet
from .model import ModelParams
from .rng import as_generator, substream

SNAP_TOL = 1e-9     # in units of the mesh


@dataclass
class ForecastRequest:
    site: int                    # row-major index of the target site
    t0: int                      # 1-based base time
    u: int
    n: int
    params: ModelParams
    marginals: MarginalModel | None = None

    def __post_init__(self):
        if int(self.u) != self.u or self.u < 1:
            raise ValidationError(f"lead u must be an integer >= 1, got {self.u}")
        if int(self.n) != self.n or self.n < 1:
            raise ValidationError(f"ensemble size must be >= 1, got {self.n}")
        self.u = int(self.u)
        self.n = int(self.n)


@dataclass
class ForecastEnsemble:
    frechet: np.ndarray
    raw: np.ndarray | None       # None when the site has no usable GEV fit
    conditioned: str             # "grid" or "simulated"
    source: np.ndarray           # physical position s0 - u tau
    source_sites: list = dc_field(default_factory=list)

    def __len__(self):
        return len(self.frechet)

    @property
    def gumbel(self):
        return np.log(self.frechet)


class OffDomainError(ValidationError):
    pass


def _slice_t0(field, t0):
    if field.scale != "frechet":
        raise ValidationError("forecasting needs a Frechet-scale field")
    if not 1 <= t0 <= field.T:
        raise ValidationError(f"base time t0={t0} outside 1..{field.T}")
    z = field.values[:, t0 - 1]
    if not np.all(np.isfinite(z) & (z > 0)):
        raise ValidationError(f"field at t0={t0} is incomplete")
    return z


def source_cells(grid, site, u, tau):
    """Fractional cell coordinates of s0 - u tau."""
    c = grid.cells[site].astype(float)
    return c - u * np.asarray(tau, float) / grid.mesh


def locate_source(grid, site, u, tau):
    """("grid", [site]) or ("simulated", vertex sites); raises OffDomainError."""
    x = source_cells(grid, site, u, tau)
    m = np.array(grid.shape)
    r = np.round(x)
    if np.all(np.abs(x - r) <= SNAP_TOL):
        x = r
    if np.any(x < 0) or np.any(x > m - 1):
        pos = np.asarray(grid.origin) + grid.mesh * x
        lo = np.asarray(grid.origin)
        hi = lo + grid.mesh * (m - 1)
        raise OffDomainError(
            f"advected source off-domain: s0 - u*tau = ({pos[0]:.6g}, {pos[1]:.6g}) "
            f"for u={u}; the grid covers [{lo[0]:.6g}, {hi[0]:.6g}] x [{lo[1]:.6g}, {hi[1]:.6g}]")
    if np.all(x == np.round(x)):
        return "grid", [int(grid.index(int(x[0]), int(x[1])))], x
    lo = np.minimum(np.floor(x), np.maximum(m - 2, 0)).astype(int)
    verts = []
    for d1 in (0, 1):
        for d2 in (0, 1):
            v = (min(lo[0] + d1, m[0] - 1), min(lo[1] + d2, m[1] - 1))
            k = int(grid.index(*v))
            if k not in verts:
                verts.append(k)
    return "simulated", verts, x


def forecast_point(req, field, rng):
    """Ensemble of req.n draws of Z(site, t0 + u) given the field at t0."""
    rng = as_generator(rng)
    z0 = _slice_t0(field, req.t0)
    grid = field.grid
    if not 0 <= req.site < grid.n_sites:
        raise ValidationError(f"site {req.site} outside the grid")
    ps = req.params
    kind, sites, x = locate_source(grid, req.site, req.u, ps.tau)
    if kind == "grid":
        y = np.full(req.n, z0[sites[0]])
    else:
        coords = grid.coords[sites]
        target = np.asarray(grid.origin) + grid.mesh * x
        y = conditional_sample_br(coords, z0[sites], target, ps.sv, rng, req.n)
    b = ps.a ** req.u
    w = 1.0 / rng.standard_exponential(req.n)
    zf = np.maximum(b * y, (1.0 - b) * w)
    raw = None
    if req.marginals is not None:
        g = req.marginals.params[req.site]
        if g is not None:
            raw = from_frechet(zf, g)
    return ForecastEnsemble(zf, raw, kind, np.asarray(grid.origin) + grid.mesh * x, sites)


@dataclass
class GridForecast:
    t0: int
    u: int
    ensembles: list              # ForecastEnsemble or None (missing)

    @property
    def missing(self):
        return np.array([e is None for e in self.ensembles])

    def to_csv(self, grid):
        rows = ["i1,i2,t0,u,member,value_frechet,value_raw,conditioned"]
        for (i1, i2), e in zip(grid.cells, self.ensembles):
            if e is None:
                rows.append(f"{i1 + 1},{i2 + 1},{self.t0},{self.u},,nan,nan,missing")
                continue
            raw = e.raw if e.raw is not None else np.full(len(e), np.nan)
            for k, (zf, zr) in enumerate(zip(e.frechet, raw)):
                rows.append(f"{i1 + 1},{i2 + 1},{self.t0},{self.u},{k + 1},{zf:.17g},{zr:.17g},"
                            f"{e.conditioned}")
        return "\n".join(rows) + "\n"


_CTX = {}


def _grid_init(ctx):
    _CTX.clear()
    _CTX.update(ctx)


def _grid_one(site):
    c = _CTX
    req = ForecastRequest(site, c["t0"], c["u"], c["n"], c["params"], c["marginals"])
    try:
        return forecast_point(req, c["field"], substream(c["seed"], site, c["u"]))
    except OffDomainError:
        return None


def forecast_grid(field, t0, u, n, params, marginals=None, seed=0, threads=1):
    """forecast_point at every site; off-domain sources are marked missing.

    Site s uses the stream keyed by (seed, s, u), so results do not depend on
    the number of workers.
    """
    ForecastRequest(0, t0, u, n, params)      # validates u and n
    _slice_t0(field, t0)
    ctx = dict(field=field, t0=int(t0), u=int(u), n=int(n), params=params,
               marginals=marginals, seed=seed)
    sites = range(field.grid.n_sites)
    if threads > 1:
        with ProcessPoolExecutor(threads, initializer=_grid_init, initargs=(ctx,)) as ex:
            out = list(ex.map(_grid_one, sites, chunksize=max(1, len(sites) // (4 * threads))))
    else:
        _grid_init(ctx)
        out = [_grid_one(s) for s in sites]
        _CTX.clear()
    return GridForecast(int(t0), int(u), out)

