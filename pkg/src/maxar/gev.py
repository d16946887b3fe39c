"""Site-wise GEV margins and transforms between raw, Frechet and Gumbel scales.

Convention: F(x) = exp(-(1 + xi (x - mu) / sigma)^(-1/xi)), xi = 0 is Gumbel.
(scipy.stats.genextreme uses c = -xi.)
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._kernels import gev_nll_many, nelder_mead_gev
from .errors import DataError, NumericalError, ValidationError
from .grid import SpaceTimeField

XI_BOUND = 0.5
EULER = 0.5772156649015329
MIN_SAMPLES = 20
_XI_EPS = 1e-8


@dataclass(frozen=True)
class GevParams:
    mu: float
    sigma: float
    xi: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValidationError(f"GEV scale must be positive, got {self.sigma}")


def _reduced(x, g):
    """-log F(x), i.e. (1 + xi y)^(-1/xi); nan outside the support."""
    y = (np.asarray(x, dtype=float) - g.mu) / g.sigma
    if abs(g.xi) < _XI_EPS:
        return np.exp(-y)
    tt = 1.0 + g.xi * y
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(tt > 0, np.exp(-np.log(np.where(tt > 0, tt, 1.0)) / g.xi), np.nan)
    return out


def gev_cdf(x, g):
    r = _reduced(x, g)
    # below the lower endpoint (xi > 0) F = 0; above the upper one (xi < 0) F = 1
    y = (np.asarray(x, dtype=float) - g.mu) / g.sigma
    out = np.exp(-np.nan_to_num(r, nan=0.0))
    if g.xi > 0:
        out = np.where(1 + g.xi * y <= 0, 0.0, out)
    elif g.xi < 0:
        out = np.where(1 + g.xi * y <= 0, 1.0, out)
    return out


def gev_quantile(p, g):
    p = np.asarray(p, dtype=float)
    w = -np.log(p)
    if abs(g.xi) < _XI_EPS:
        return g.mu - g.sigma * np.log(w)
    return g.mu + g.sigma * np.expm1(-g.xi * np.log(w)) / g.xi


def to_frechet(x, g):
    """x -> -1/log F(x), strictly increasing on the support."""
    r = _reduced(x, g)
    bad = ~np.isfinite(r) | (r <= 0) | np.isinf(1.0 / np.where(r > 0, r, 1.0))
    if np.any(bad):
        raise DataError("out of support: value(s) outside the GEV support")
    return 1.0 / r


def from_frechet(z, g):
    """Inverse of to_frechet: the GEV quantile at exp(-1/z)."""
    z = np.asarray(z, dtype=float)
    if np.any(~(z > 0)):
        raise ValidationError("Frechet values must be positive")
    # -log F = 1/z
    if abs(g.xi) < _XI_EPS:
        return g.mu + g.sigma * np.log(z)
    return g.mu + g.sigma * np.expm1(g.xi * np.log(z)) / g.xi


def gev_loglik(x, g, weights=None):
    x = np.ascontiguousarray(x, dtype=float)[None, :]
    w = np.ones_like(x) if weights is None else np.asarray(weights, float)[None, :]
    th = np.array([[g.mu, math.log(g.sigma), g.xi]])
    return -float(gev_nll_many(th, x, w)[0])


def _start(x, w):
    n = w.sum()
    m = np.sum(w * x) / n
    sd = math.sqrt(np.sum(w * (x - m) ** 2) / max(n - 1, 1))
    return m, sd


def fit_gev_many(samples, weights=None, start=None, min_samples=MIN_SAMPLES,
                 maxiter=2000, step=None):
    """Row-wise GEV MLE for a (n_series, n_obs) array.

    Nelder-Mead on (mu, log sigma, xi) with xi clipped to [-0.5, 0.5] and a
    1e10 penalty outside the support. Returns (params (n,3) as mu, sigma, xi;
    converged flags). Rows with too few or constant samples raise.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if not np.all(np.isfinite(x)):
        raise DataError("GEV samples must be finite")
    w = np.ones_like(x) if weights is None else np.broadcast_to(
        np.asarray(weights, float), x.shape).copy()
    nobs = w.sum(axis=1)
    if np.any(nobs < min_samples):
        raise ValidationError(f"GEV fit needs at least {min_samples} samples")
    th0 = np.empty((x.shape[0], 3))
    scale = np.empty((x.shape[0], 3))
    for i in range(x.shape[0]):
        m, sd = _start(x[i], w[i])
        if not sd > 0 or (np.ptp(x[i][w[i] > 0]) == 0):
            raise NumericalError(f"degenerate sample in series {i}: zero spread (sigma -> 0)")
        if start is not None:
            th0[i] = (start[i][0], math.log(start[i][1]), start[i][2])
            scale[i] = step if step is not None else (0.05 * start[i][1], 0.05, 0.02)
            continue
        s0 = sd * math.sqrt(6) / math.pi
        mu0 = m - EULER * s0
        xi0 = 0.1
        if np.any(1 + xi0 * (x[i][w[i] > 0] - mu0) / s0 <= 0):
            xi0 = 0.0
        th0[i] = (mu0, math.log(s0), xi0)
        scale[i] = (0.1 * s0, 0.1, 0.05)
    th, fval, nit, conv = nelder_mead_gev(th0, scale, x, w, XI_BOUND, maxiter, 1e-10, 1e-9)
    out = np.column_stack([th[:, 0], np.exp(th[:, 1]), th[:, 2]])
    return out, conv.astype(bool)


def fit_gev(samples, weights=None, min_samples=MIN_SAMPLES, maxiter=2000):
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < min_samples and weights is None:
        raise ValidationError(f"GEV fit needs at least {min_samples} samples, got {x.size}")
    out, conv = fit_gev_many(x[None, :], None if weights is None else np.asarray(weights)[None, :],
                             min_samples=min_samples, maxiter=maxiter)
    g = GevParams(*out[0])
    if not conv[0]:
        raise NumericalError("GEV fit did not converge", best=g)
    return g


@dataclass
class MarginalModel:
    """One GevParams per site; None marks a failed fit."""
    params: list
    shape: tuple

    def __len__(self):
        return len(self.params)

    @property
    def complete(self):
        return all(p is not None for p in self.params)

    def as_array(self):
        return np.array([[np.nan] * 3 if p is None else [p.mu, p.sigma, p.xi] for p in self.params])


def fit_marginals(field, weights=None, start=None, strict=True):
    """Fit a GEV at every site of a raw field.

    With strict=False sites whose fit fails are stored as None instead of raising.
    """
    if field.scale != "raw":
        raise ValidationError("marginal fitting expects a raw-scale field")
    x = field.values
    w = None if weights is None else np.broadcast_to(weights, x.shape)
    try:
        out, conv = fit_gev_many(x, w, start=None if start is None else start.as_array())
    except (NumericalError, ValidationError):
        if strict:
            raise
        out = np.full((x.shape[0], 3), np.nan)
        conv = np.zeros(x.shape[0], bool)
        for i in range(x.shape[0]):
            try:
                o, c = fit_gev_many(x[i:i + 1], None if w is None else w[i:i + 1])
                out[i], conv[i] = o[0], c[0]
            except (NumericalError, ValidationError):
                pass
    if strict and not conv.all():
        bad = int(np.flatnonzero(~conv)[0])
        raise NumericalError(f"GEV fit did not converge at site {bad}",
                             best=GevParams(*out[bad]))
    params = [GevParams(*o) if c else None for o, c in zip(out, conv)]
    return MarginalModel(params, field.grid.shape)


def standardize_field(field, model, weights=None):
    """Raw field -> standard Frechet field using each site's GEV."""
    if field.scale != "raw":
        raise ValidationError("standardize_field expects a raw-scale field")
    if len(model) != field.grid.n_sites or not model.complete:
        raise ValidationError("marginal model must cover every site")
    out = np.empty_like(field.values)
    bad = []
    for s, g in enumerate(model.params):
        r = _reduced(field.values[s], g)
        ok = np.isfinite(r) & (r > 0)
        if weights is not None:
            ok |= np.asarray(weights) == 0
        if not ok.all():
            bad.extend((s, int(t) + 1) for t in np.flatnonzero(~ok))
        with np.errstate(divide="ignore", invalid="ignore"):
            out[s] = 1.0 / r
    if bad:
        cells = ", ".join(f"(site {s}, t={t})" for s, t in bad[:20])
        more = "" if len(bad) <= 20 else f" and {len(bad) - 20} more"
        raise DataError(f"out of support: {len(bad)} cell(s): {cells}{more}")
    if weights is not None:
        out[:, np.asarray(weights) == 0] = 1.0     # never used; keep field valid
    return SpaceTimeField(field.grid, out, "frechet")


def destandardize(z, model, site):
    g = model.params[site]
    if g is None:
        return None
    return from_frechet(z, g)


def save_marginals(model, grid, path):
    cells = grid.cells
    with open(path, "w") as fh:
        fh.write("i1,i2,mu,sigma,xi\n")
        for (i1, i2), g in zip(cells, model.params):
            if g is None:
                fh.write(f"{i1 + 1},{i2 + 1},nan,nan,nan\n")
            else:
                fh.write(f"{i1 + 1},{i2 + 1},{g.mu:.17g},{g.sigma:.17g},{g.xi:.17g}\n")
    return Path(path)


def load_marginals(path, grid):
    params = [None] * grid.n_sites
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != ["i1", "i2", "mu", "sigma", "xi"]:
            raise DataError(f"{path}: expected header i1,i2,mu,sigma,xi")
        for row in rd:
            s = int(grid.index(int(row["i1"]) - 1, int(row["i2"]) - 1))
            if s < 0:
                raise DataError(f"{path}: cell ({row['i1']},{row['i2']}) outside grid")
            mu, sg, xi = float(row["mu"]), float(row["sigma"]), float(row["xi"])
            params[s] = None if not np.isfinite([mu, sg, xi]).all() else GevParams(mu, sg, xi)
    return MarginalModel(params, grid.shape)
