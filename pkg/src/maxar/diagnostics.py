"""Model checks: ratio random field, F-madogram extremal coefficients and
empirical cross-correlations of log-values."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ValidationError

ATOM_THRESHOLD = 0.05
ATOM_RTOL = 1e-9
GUMBEL_VAR = math.pi ** 2 / 6


def _frechet(field):
    if field.scale != "frechet":
        raise ValidationError("diagnostics expect a Frechet-scale field")
    return field.values


def _pair_index(grid, h):
    """(src, dst) site indices with dst = src + h; h physical, grid-aligned."""
    c = np.asarray(h, float) / grid.mesh
    shift = np.rint(c)
    if np.any(np.abs(c - shift) > 1e-9 * np.maximum(1.0, np.abs(c))):
        raise ValidationError(f"lag h={tuple(h)} is not a multiple of the mesh {grid.mesh}")
    j = grid.shifted_index(shift.astype(int))
    src = np.flatnonzero(j >= 0)
    return src, j[src]


# ------------------------------------------------------------- ratio field

@dataclass
class RatioFieldCdf:
    h: tuple
    u: int
    values: np.ndarray           # sorted chi sample

    def __call__(self, z):
        return np.searchsorted(self.values, np.asarray(z, float), side="right") / len(self.values)

    def __len__(self):
        return len(self.values)

    def to_csv(self, n_points=200):
        v = self.values
        zs = np.unique(np.quantile(v, np.linspace(0, 1, n_points)))
        rows = ["h1,h2,u,z,cdf"]
        rows += [f"{self.h[0]:.10g},{self.h[1]:.10g},{self.u},{z:.17g},{c:.17g}"
                 for z, c in zip(zs, self(zs))]
        return "\n".join(rows) + "\n"


def ratio_field_cdf(field, h, u):
    """Empirical CDF of chi = (Z(s+h, t+u) / Z(s, t))^(1/u) over all admissible (s, t)."""
    z = _frechet(field)
    if int(u) != u or u < 1:
        raise ValidationError("ratio field needs an integer u >= 1")
    u = int(u)
    src, dst = _pair_index(field.grid, h)
    T = field.T
    if src.size == 0 or T - u < 1:
        raise DataError(f"ratio field: no admissible (s, t) for h={tuple(h)}, u={u}")
    r = z[dst, u:] / z[src, :T - u]
    chi = r if u == 1 else r ** (1.0 / u)
    return RatioFieldCdf(tuple(float(x) for x in h), u, np.sort(chi.ravel()))


def detect_atom(cdf, threshold=ATOM_THRESHOLD, rtol=ATOM_RTOL):
    """Largest point mass of the empirical CDF (values equal up to rtol).

    Returns (location, mass) when the mass exceeds `threshold`, else None.
    """
    v = cdf.values
    if v.size == 0:
        return None
    brk = np.flatnonzero(np.diff(v) > rtol * np.abs(v[1:]))
    starts = np.concatenate([[0], brk + 1])
    ends = np.concatenate([brk + 1, [v.size]])
    sizes = ends - starts
    k = int(np.argmax(sizes))
    mass = sizes[k] / v.size
    if sizes[k] < 2 or mass <= threshold:
        return None
    return float(np.median(v[starts[k]:ends[k]])), float(mass)


# -------------------------------------------------------------- F-madogram

@dataclass
class MadogramResult:
    dist: np.ndarray
    nu: np.ndarray
    theta: np.ndarray
    clipped: np.ndarray


def _theta(nu):
    nu = np.asarray(nu, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        th = np.where(nu < 0.5, (1 + 2 * nu) / (1 - 2 * nu), np.inf)
    clipped = th > 2.0
    return np.clip(th, 1.0, 2.0), clipped


def fmadogram_theta(field, pairs):
    """Theta estimates for site pairs (array of (i, j) row-major indices).

    nu = mean |F(Z_i) - F(Z_j)| / 2 with F the unit Frechet CDF, and
    Theta = (1 + 2 nu) / (1 - 2 nu), clipped to [1, 2] (flagged).
    """
    z = _frechet(field)
    pairs = np.atleast_2d(np.asarray(pairs, int))
    F = np.exp(-1.0 / z)
    nu = 0.5 * np.mean(np.abs(F[pairs[:, 0]] - F[pairs[:, 1]]), axis=1)
    th, cl = _theta(nu)
    c = field.grid.coords
    d = np.hypot(*(c[pairs[:, 0]] - c[pairs[:, 1]]).T)
    return MadogramResult(d, nu, th, cl)


def fmadogram_binned(field, bins, max_pairs=None, rng=None):
    """Theta against distance: nu averaged within distance bins first.

    Uses every unordered site pair unless max_pairs is given (then a seeded
    random subset). Returns (bin centres, theta, n_pairs, clipped).
    """
    n = field.grid.n_sites
    i, j = np.triu_indices(n, 1)
    if max_pairs is not None and len(i) > max_pairs:
        if rng is None:
            raise ValidationError("subsampling pairs needs an rng")
        k = np.sort(rng.choice(len(i), max_pairs, replace=False))
        i, j = i[k], j[k]
    res = fmadogram_theta(field, np.column_stack([i, j]))
    bins = np.asarray(bins, float)
    b = np.digitize(res.dist, bins) - 1
    ok = (b >= 0) & (b < len(bins) - 1)
    cnt = np.bincount(b[ok], minlength=len(bins) - 1)
    tot = np.bincount(b[ok], weights=res.nu[ok], minlength=len(bins) - 1)
    with np.errstate(invalid="ignore"):
        nu = tot / cnt
    th, cl = _theta(nu)
    th = np.where(cnt > 0, th, np.nan)
    return 0.5 * (bins[1:] + bins[:-1]), th, cnt, cl & (cnt > 0)


# ------------------------------------------------------- cross-correlations

@dataclass
class CrossCorr:
    h: tuple
    u: int
    mean: float
    lo: float
    hi: float
    per_site: np.ndarray


def empirical_crosscorr(field, h, u, level=0.95):
    """Average of the per-site estimates

        rho_s = 6 / ((n - u) pi^2) sum_t (log Z(s,t) - m_s)(log Z(s+h,t+u) - m_{s+h})

    with m_s the full-series mean of log Z(s, .), and the central `level`
    quantile band of the per-site values. Negative u uses
    rho(h, -u) = rho(-h, u).
    """
    z = _frechet(field)
    u = int(u)
    h = np.asarray(h, float)
    if u < 0:
        h, u = -h, -u
    src, dst = _pair_index(field.grid, h)
    if src.size < 3:
        raise DataError(f"cross-correlation at h={tuple(h)}: fewer than 3 admissible sites")
    n = field.T
    if n - u < 2:
        raise DataError(f"cross-correlation at u={u}: series too short")
    x = np.log(z)
    x = x - x.mean(axis=1, keepdims=True)
    rho = np.sum(x[src, :n - u] * x[dst, u:], axis=1) / ((n - u) * GUMBEL_VAR)
    q = (1 - level) / 2
    lo, hi = np.quantile(rho, [q, 1 - q])
    return CrossCorr(tuple(h), u, float(rho.mean()), float(lo), float(hi), rho)
