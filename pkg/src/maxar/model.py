"""Space-time max-autoregressive Brown-Resnick model with advection.

    Z(s, t) = max{ a Z(s - tau, t - 1), (1 - a) W_t(s) },

with W_t iid Brown-Resnick fields. Pairs at lag (h, u) have exponent measure

    V(z1, z2) = Phi(q1)/z1 + a^u Phi(q2)/z2 + (1 - a^u)/z2,

with the variogram evaluated at h - u tau; when h = u tau the pair has an
atom and V = 1/min(z1, z2/a^u) + (1 - a^u)/z2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss

from .brown_resnick import Semivariogram, exponent_with_decay, gamma, simulate_br
from .errors import NumericalError, ValidationError
from .grid import SpaceTimeField, SpatialGrid
from .rng import as_generator

GUMBEL_VAR = math.pi ** 2 / 6


@dataclass(frozen=True)
class ModelParams:
    sv: Semivariogram
    tau: tuple
    a: float

    def __post_init__(self):
        if not 0 < self.a < 1:
            raise ValidationError(f"decay a must lie in (0, 1), got {self.a}")
        t = tuple(float(x) for x in self.tau)
        if len(t) != 2:
            raise ValidationError("tau must be a 2-vector")
        object.__setattr__(self, "tau", t)

    @classmethod
    def from_vector(cls, v):
        k, H, t1, t2, a = (float(x) for x in v)
        return cls(Semivariogram(k, H), (t1, t2), a)

    def as_vector(self):
        return np.array([self.sv.kappa, self.sv.hurst, self.tau[0], self.tau[1], self.a])

    @property
    def kappa(self):
        return self.sv.kappa

    @property
    def hurst(self):
        return self.sv.hurst


@dataclass(frozen=True)
class StPair:
    h: tuple
    u: int = 0

    def __post_init__(self):
        if int(self.u) != self.u or self.u < 0:
            raise ValidationError(f"temporal lag must be a nonnegative integer, got {self.u}")
        object.__setattr__(self, "h", tuple(float(x) for x in self.h))
        object.__setattr__(self, "u", int(self.u))


def effective_lag(pair, params):
    return np.asarray(pair.h) - pair.u * np.asarray(params.tau)


def is_degenerate(pair, params):
    return bool(np.all(effective_lag(pair, params) == 0))


def exponent_V_st(pair, z1, z2, params):
    g = gamma(effective_lag(pair, params), params.sv)
    b = params.a ** pair.u
    return exponent_with_decay(z1, z2, g, b, u=pair.u, a=params.a)


def log_pair_density(pair, z1, z2, params):
    """log f = -V + log(V1 V2 - V12); numpy reference implementation."""
    if is_degenerate(pair, params):
        raise ValidationError("degenerate pair: density undefined (h = u tau)")
    bv = exponent_V_st(pair, z1, z2, params)
    return -bv.V + np.log(bv.V1 * bv.V2 - bv.V12)


def pair_density(pair, z1, z2, params):
    return np.exp(log_pair_density(pair, z1, z2, params))


def extremal_coeff(pair, params):
    return float(exponent_V_st(pair, 1.0, 1.0, params).V)


class ConditionalLaw:
    """Law of Z(s, t+u) given Z(s - u tau, t) = z1: an atom at a^u z1 plus a
    (1 - a^u)-scaled Frechet tail above it."""

    def __init__(self, u, z1, params):
        if int(u) != u or u < 1:
            raise ValidationError("conditional law needs u >= 1")
        if not z1 > 0:
            raise ValidationError("conditioning value must be positive")
        self.u = int(u)
        self.z1 = float(z1)
        self.b = params.a ** self.u
        self.loc = self.b * self.z1
        self.scale = 1.0 - self.b

    @property
    def atom(self):
        return self.loc, self.atom_mass

    @property
    def atom_mass(self):
        return math.exp(-self.scale / self.loc)

    def cdf(self, z2):
        z2 = np.asarray(z2, dtype=float)
        with np.errstate(divide="ignore"):
            return np.where(z2 >= self.loc, np.exp(-self.scale / np.where(z2 > 0, z2, 1.0)), 0.0)

    def sample(self, rng, n):
        rng = as_generator(rng)
        w = 1.0 / rng.standard_exponential(n)
        return np.maximum(self.loc, self.scale * w)


def conditional_law(u, z1, params):
    return ConditionalLaw(u, z1, params)


# ---------------------------------------------------------------- simulation

def grid_shift(tau, mesh):
    c = np.asarray(tau, dtype=float) / mesh
    r = np.rint(c)
    if np.any(np.abs(c - r) > 1e-9 * np.maximum(1.0, np.abs(c))):
        raise ValidationError(
            f"tau={tuple(tau)} is not a multiple of the mesh {mesh}; "
            "simulate on a finer grid whose mesh divides tau")
    return r.astype(int)


def _key(c):
    return (c[:, 0].astype(np.int64) + (1 << 30)) * (1 << 31) + (c[:, 1].astype(np.int64) + (1 << 30))


def simulation_domain(grid, shift, L):
    """Cells of grid - k*shift for k = 0..L (sorted), and row indices of the grid cells."""
    cells = grid.cells
    if np.all(shift == 0):
        L = 0
    allc = np.concatenate([cells - k * shift for k in range(L + 1)])
    keys, first = np.unique(_key(allc), return_index=True)
    dom = allc[first]
    gidx = np.searchsorted(keys, _key(cells))
    up = np.searchsorted(keys, _key(dom - shift))
    up = np.where((up < len(keys)) & (keys[np.minimum(up, len(keys) - 1)] == _key(dom - shift)), up, -1)
    return dom, gidx, up


def simulate_st(grid, T, params, rng, history=None, size=None):
    """Simulate the space-time field on `grid` for t = 1..T.

    Innovations live on the grid enlarged upwind by every cell that can feed
    the grid within the horizon, so the output is exact. `history` (steps)
    truncates that buffer: memory older than `history` steps is dropped,
    which lowers the Frechet scale by at most a^(history+1).
    Returns a Frechet SpaceTimeField, or an array (size, n_sites, T).
    """
    rng = as_generator(rng)
    T = int(T)
    if T < 1:
        raise ValidationError("T must be >= 1")
    shift = grid_shift(params.tau, grid.mesh)
    L = T if history is None else max(0, min(int(history), T))
    dom, gidx, up = simulation_domain(grid, shift, L)
    coords = np.asarray(grid.origin) + grid.mesh * dom
    R = 1 if size is None else int(size)
    W = simulate_br(coords, params.sv, rng, size=R * (T + 1)).reshape(R, T + 1, len(dom))
    a = params.a
    out = np.empty((R, grid.n_sites, T))
    Z = W[:, 0]
    has_up = up >= 0
    upi = np.where(has_up, up, 0)
    for t in range(1, T + 1):
        mem = np.where(has_up, a * Z[:, upi], 0.0)
        Z = np.maximum(mem, (1.0 - a) * W[:, t])
        out[:, :, t - 1] = Z[:, gidx]
    if size is None:
        return SpaceTimeField(grid, out[0], "frechet")
    return out


def _shift2d(x, shift):
    """y[c] = x[c - shift] on a 2-D array, NaN where undefined."""
    m1, m2 = x.shape
    s1, s2 = int(shift[0]), int(shift[1])
    y = np.full_like(x, np.nan)
    src1 = slice(max(0, -s1), min(m1, m1 - s1))
    dst1 = slice(max(0, s1), min(m1, m1 + s1))
    src2 = slice(max(0, -s2), min(m2, m2 - s2))
    dst2 = slice(max(0, s2), min(m2, m2 + s2))
    if src1.start < src1.stop and src2.start < src2.stop:
        y[dst1, dst2] = x[src1, src2]
    return y


def advance(prev, innov, a, shift):
    """One application of the recursion on 2-D slices (NaN outside)."""
    return np.maximum(a * _shift2d(prev, shift), (1.0 - a) * innov)


def _times_a(x, a, k):
    for _ in range(k):
        x = a * x
    return x


def lagu_closed_form(prev, innovations, params, u, shift=None, mesh=1.0):
    """Z(., t) = max{ a^u Z(. - u tau, t-u), (1 - a^u) W~ } on 2-D slices.

    innovations[k-1] is W_{t-u+k}, k = 1..u. The decay a^k is applied as k
    successive multiplications, which makes the result identical bit for bit
    to u applications of the recursion.
    """
    if u < 1:
        raise ValidationError("u must be >= 1")
    if shift is None:
        shift = grid_shift(params.tau, mesh)
    shift = np.asarray(shift, int)
    a = params.a
    out = _times_a(_shift2d(prev, u * shift), a, u)
    for k in range(u):
        # W_{t-k} contributes (1-a) a^k W_{t-k}(s - k tau)
        term = _times_a((1.0 - a) * _shift2d(innovations[u - 1 - k], k * shift), a, k)
        out = np.maximum(out, term)
    return out


def w_tilde(innovations, params, u, shift):
    """max_k (1-a) a^k W_{t-k}(s - k tau) / (1 - a^u): standard Frechet."""
    a = params.a
    terms = [(1 - a) * a ** k * _shift2d(innovations[u - 1 - k], k * np.asarray(shift)) for k in range(u)]
    return np.maximum.reduce(terms) / (1 - a ** u)


# ------------------------------------------------------- cross-correlation

def _gl_panels(lo, hi, n, nodes, weights, breaks=()):
    edges = np.linspace(lo, hi, n + 1)
    if breaks:
        edges = np.unique(np.concatenate([edges, [b for b in breaks if lo < b < hi]]))
    a, b = edges[:-1], edges[1:]
    half = 0.5 * (b - a)
    x = (0.5 * (a + b))[:, None] + half[:, None] * nodes[None, :]
    w = half[:, None] * weights[None, :]
    return x.ravel(), w.ravel()


def _hoeffding(pair, params, n, box):
    nodes, weights = leggauss(8)
    lo, hi = box
    b = params.a ** pair.u
    c = math.log(b)
    g = float(gamma(effective_lag(pair, params), params.sv))
    # integrate in (x, w) with y = x + c + w so the ridge/kink sits at w = 0
    x, wx = _gl_panels(lo, hi, n, nodes, weights)
    span = (hi - lo) + abs(c)
    v, wv = _gl_panels(-span, span, 2 * n, nodes, weights, breaks=(0.0,))
    total = 0.0
    for i0 in range(0, len(x), 256):
        xs = x[i0:i0 + 256, None]
        ys = xs + c + v[None, :]
        z1 = np.exp(xs)
        z2 = np.exp(ys)
        V = exponent_with_decay(z1, z2, g, b).V
        Vi = np.exp(-xs) + np.exp(-ys)
        with np.errstate(over="ignore", invalid="ignore"):
            f = np.exp(-Vi) * np.expm1(Vi - V)
        f = np.where(np.isfinite(f), f, 0.0)
        total += float(np.sum(wx[i0:i0 + 256, None] * f * wv[None, :]))
    return total


def theoretical_crosscorr(pair, params, tol=1e-4, box=(-7.0, 14.0), max_panels=512):
    """Corr(log Z(0,0), log Z(h,u)) via Hoeffding's covariance identity.

    Negative u is accepted and mapped to (-h, -u).
    """
    if pair.u == 0 and pair.h == (0.0, 0.0):
        return 1.0
    n = 16
    prev = _hoeffding(pair, params, n, box) / GUMBEL_VAR
    while n < max_panels:
        n *= 2
        cur = _hoeffding(pair, params, n, box) / GUMBEL_VAR
        if abs(cur - prev) < tol:
            return cur
        prev = cur
    raise NumericalError(f"cross-correlation quadrature did not converge "
                         f"(last change {abs(cur - prev):.2e} > {tol:.0e})")


def crosscorr_signed(h, u, params, **kw):
    """Theoretical correlation for any integer u (negative u via symmetry)."""
    if u < 0:
        return theoretical_crosscorr(StPair(tuple(-np.asarray(h, float)), -u), params, **kw)
    return theoretical_crosscorr(StPair(h, u), params, **kw)


def peak_corr_lag(h, params):
    """<h, tau>/|tau|^2: approximate lag of maximal correlation (a close to 1)."""
    t = np.asarray(params.tau, dtype=float)
    nt = float(t @ t)
    if nt == 0:
        raise ValidationError("peak lag undefined for tau = 0")
    return float(np.asarray(h, dtype=float) @ t / nt)
