"""Spatial Brown-Resnick fields: variogram, exact and conditional simulation,
bivariate exponent measure with partial derivatives.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri, ndtri_exp
from scipy.stats import qmc

from .errors import NumericalError, ValidationError
from .rng import as_generator

MAX_CONDITIONING = 6
GIBBS_SWITCH = 0.01      # rejection acceptance below which Gibbs takes over
GIBBS_SWEEPS = 100


@dataclass(frozen=True)
class Semivariogram:
    kappa: float
    hurst: float

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValidationError(f"kappa must be positive, got {self.kappa}")
        if not 0 < self.hurst <= 1:
            raise ValidationError(f"Hurst index must lie in (0, 1], got {self.hurst}")

    def of_distance(self, d):
        return (np.asarray(d, dtype=float) / self.kappa) ** (2.0 * self.hurst)

    def __call__(self, h):
        return gamma(h, self)


def gamma(h, sv):
    """gamma(h) = (|h| / kappa)^(2H) for 2-vector(s) h (last axis)."""
    h = np.asarray(h, dtype=float)
    d = np.hypot(h[..., 0], h[..., 1])
    return sv.of_distance(d)


@dataclass
class BivariateV:
    V: np.ndarray
    V1: np.ndarray
    V2: np.ndarray
    V12: np.ndarray
    dV_dgamma: Optional[np.ndarray] = None
    dV_da: Optional[np.ndarray] = None


def norm_pdf(x):
    return np.exp(-0.5 * np.square(x)) / math.sqrt(2 * math.pi)


def exponent_with_decay(z1, z2, g, b, u=0, a=None):
    """V(z1, z2) = Phi(q1)/z1 + b Phi(q2)/z2 + (1-b)/z2 and partials.

    b = a^u is the decay factor (b = 1 gives the spatial pair). g is the
    variogram value at the effective lag; g = 0 is the comonotone/atom case.
    """
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    g = np.asarray(g, dtype=float)
    z1, z2, g = np.broadcast_arrays(z1, z2, g)
    pos = g > 0
    s = np.sqrt(2.0 * np.where(pos, g, 1.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        q1 = np.log(z2 / (b * z1)) / s + 0.5 * s
    q2 = s - q1
    P1, P2, d1 = ndtr(q1), ndtr(q2), norm_pdf(q1)
    V = P1 / z1 + (b * P2 + 1.0 - b) / z2
    V1 = -P1 / z1 ** 2
    V2 = -(b * P2 + 1.0 - b) / z2 ** 2
    V12 = -d1 / (s * z1 ** 2 * z2)
    dg = d1 / (z1 * s)
    da = None
    if a is not None and u > 0:
        da = u * a ** (u - 1) * (P2 - 1.0) / z2
    if not np.all(pos):
        # coincident (effective) sites: V = 1/min(z1, z2/b) + (1-b)/z2
        deg = ~pos
        first = z1 < z2 / b
        Vd = np.where(first, 1.0 / z1 + (1.0 - b) / z2, 1.0 / z2)
        V = np.where(deg, Vd, V)
        V1 = np.where(deg, np.where(first, -1.0 / z1 ** 2, 0.0), V1)
        V2 = np.where(deg, np.where(first, -(1.0 - b) / z2 ** 2, -1.0 / z2 ** 2), V2)
        V12 = np.where(deg, 0.0, V12)
        dg = np.where(deg, np.nan, dg)
        if da is not None:
            da = np.where(deg, np.where(first, -u * a ** (u - 1) / z2, 0.0), da)
    return BivariateV(V[()], V1[()], V2[()], V12[()], dg[()], None if da is None else da[()])


def exponent_V_spatial(z1, z2, gh):
    return exponent_with_decay(z1, z2, gh, 1.0)


def extremal_coefficient_spatial(gh):
    return 2.0 * ndtr(np.sqrt(np.asarray(gh, dtype=float) / 2.0))


# ---------------------------------------------------------------- simulation

def _as_sites(sites):
    x = np.atleast_2d(np.asarray(sites, dtype=float))
    if x.ndim != 2 or x.shape[1] != 2:
        raise ValidationError("sites must be an (n, 2) array of coordinates")
    return x


def variogram_matrix(sites, sv):
    x = _as_sites(sites)
    return gamma(x[:, None, :] - x[None, :, :], sv)


def _psd_sqrt(C, sites=None, what="increment covariance"):
    """Lower-triangular-ish square root L with L L^T = C."""
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        pass
    w, U = np.linalg.eigh(C)
    tol = 1e-10 * max(1.0, float(np.max(np.abs(w))))
    if w.min() < -tol:
        pair = ""
        if sites is not None and len(sites) > 1:
            d = np.hypot(*(sites[:, None, :] - sites[None, :, :]).transpose(2, 0, 1))
            d[np.diag_indices_from(d)] = np.inf
            i, j = np.unravel_index(np.argmin(d), d.shape)
            pair = f"; offending site pair ({i}, {j})"
        raise NumericalError(f"{what} is not positive semi-definite{pair}")
    return U * np.sqrt(np.clip(w, 0, None))


def _check_distinct(x):
    if len(x) < 2:
        return
    d = np.hypot(*(x[:, None, :] - x[None, :, :]).transpose(2, 0, 1))
    d[np.diag_indices_from(d)] = np.inf
    if d.min() == 0:
        i, j = np.unravel_index(np.argmin(d), d.shape)
        raise NumericalError(f"Cholesky failure: duplicate sites, offending site pair ({min(i, j)}, {max(i, j)})")


def simulate_br(sites, sv, rng, size=None):
    """Exact draw(s) of a Brown-Resnick vector on a finite site set.

    Extremal-functions algorithm: sites are visited in order; at site k the
    Poisson points zeta = 1/Gamma are generated in decreasing order with
    spectral functions normalised at site k, and a function is kept only if it
    does not exceed the current maxima at the sites already visited.
    Vectorised over replicates. Returns shape (n,) or (size, n).
    """
    rng = as_generator(rng)
    x = _as_sites(sites)
    n = len(x)
    _check_distinct(x)
    G = variogram_matrix(x, sv)
    N = 1 if size is None else int(size)
    if n == 1:
        Z = 1.0 / rng.standard_exponential(N)
        return Z[0:1] if size is None else Z[:, None]
    C = G[1:, 0][:, None] + G[0, 1:][None, :] - G[1:, 1:]
    L = _psd_sqrt(C, x)
    chunk = max(1, 2_000_000 // n)
    out = np.empty((N, n))
    for c0 in range(0, N, chunk):
        out[c0:c0 + chunk] = _extremal_functions(L, G, min(chunk, N - c0), rng)
    return out[0] if size is None else out


class _GaussianPool:
    """Columns of L @ xi drawn in large blocks (one matmul per refill) and
    handed out in order; rows are sites, with the pinned site fixed at 0."""

    def __init__(self, L, rng, block=None):
        self.L, self.rng = L, rng
        n = L.shape[0] + 1
        self.block = block or int(min(8192, max(256, 8_000_000 // n)))
        self.buf = np.zeros((0, n))
        self.pos = 0

    def take(self, m):
        parts = []
        while m > 0:
            if self.pos == len(self.buf):
                n1 = self.L.shape[0]
                self.buf = np.zeros((self.block, n1 + 1))
                self.buf[:, 1:] = (self.L @ self.rng.standard_normal((n1, self.block))).T
                self.pos = 0
            k = min(m, len(self.buf) - self.pos)
            parts.append(self.buf[self.pos:self.pos + k])
            self.pos += k
            m -= k
        return parts[0] if len(parts) == 1 else np.concatenate(parts)


def _extremal_functions(L, G, N, rng):
    n = G.shape[0]
    Z = np.zeros((N, n))
    pool = _GaussianPool(L, rng)
    for k in range(n):
        E = rng.standard_exponential(N)
        idx = np.flatnonzero(1.0 / E > Z[:, k])
        while idx.size:
            m = idx.size
            g = pool.take(m)
            Y = np.exp(g - g[:, k:k + 1] - G[k][None, :])
            Y *= (1.0 / E[idx])[:, None]
            if k > 0:
                ok = np.all(Y[:, :k] < Z[idx, :k], axis=1)
                acc = idx[ok]
                Z[acc] = np.maximum(Z[acc], Y[ok])
            else:
                Z[idx] = np.maximum(Z[idx], Y)
            E[idx] += rng.standard_exponential(m)
            keep = 1.0 / E[idx] > Z[idx, k]
            idx = idx[keep]
    return Z


# ------------------------------------------------- conditional simulation

def set_partitions(items):
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        yield [[first]] + part
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]


@lru_cache(maxsize=None)
def _qmc_points(d, m=13):
    if d == 0:
        return np.zeros((1, 0))
    return qmc.Sobol(d, scramble=True, seed=20240607).random_base2(m)


def mvn_cdf(upper, cov):
    """P(X < upper), X ~ N(0, cov), via Genz's separation of variables on a
    fixed scrambled Sobol point set (deterministic)."""
    c = np.asarray(upper, dtype=float)
    k = c.size
    if k == 0:
        return 1.0
    cov = np.asarray(cov, dtype=float)
    if k == 1:
        return float(ndtr(c[0] / math.sqrt(cov[0, 0])))
    # order variables by tightest bound first (helps the QMC error)
    sd = np.sqrt(np.diag(cov))
    order = np.argsort(c / sd)
    c = c[order]
    cov = cov[np.ix_(order, order)]
    jit = 0.0
    for _ in range(8):
        try:
            L = np.linalg.cholesky(cov + jit * np.eye(k))
            break
        except np.linalg.LinAlgError:
            jit = max(jit * 10, 1e-12 * np.trace(cov) / k)
    else:
        raise NumericalError("degenerate covariance in conditional simulation")
    w = _qmc_points(k - 1)
    M = w.shape[0]
    e = np.full(M, ndtr(c[0] / L[0, 0]))
    f = e.copy()
    y = np.zeros((M, k))
    for i in range(1, k):
        y[:, i - 1] = ndtri(np.clip(w[:, i - 1] * e, 1e-300, 1 - 1e-16))
        e = ndtr((c[i] - y[:, :i] @ L[i, :i]) / L[i, i])
        f *= e
    return float(np.mean(f))


def _gauss_logpdf(d, m, S):
    k = len(d)
    L = np.linalg.cholesky(S)
    r = np.linalg.solve(L, d - m)
    return -0.5 * r @ r - np.log(np.diag(L)).sum() - 0.5 * k * math.log(2 * math.pi)


class _CondSetup:
    """Gaussian quantities for a set of conditioning sites plus a target."""

    def __init__(self, obs_sites, z, target, sv):
        X = np.vstack([obs_sites, np.asarray(target, float)[None, :]])
        self.G = variogram_matrix(X, sv)
        self.K = len(z)
        self.z = np.asarray(z, float)
        self.lz = np.log(self.z)

    def pinned(self, b, idx):
        """Mean and covariance of log Y^(b) at indices idx (pinned at b)."""
        G = self.G
        idx = np.asarray(idx, int)
        m = -G[idx, b]
        S = G[idx, b][:, None] + G[b, idx][None, :] - G[np.ix_(idx, idx)]
        return m, S

    def block_terms(self, B):
        b = B[0]
        rest = [i for i in B[1:]]
        comp = [i for i in range(self.K) if i not in B]
        loglam = -2.0 * self.lz[b] - self.lz[rest].sum()
        idx = rest + comp
        m, S = self.pinned(b, idx)
        r = len(rest)
        d = self.lz[rest] - self.lz[b]
        if r:
            loglam += _gauss_logpdf(d, m[:r], S[:r, :r])
        if not comp:
            return loglam, 0.0
        cm, cS = _conditional(m, S, r, d)
        P = mvn_cdf(self.lz[comp] - self.lz[b] - cm, cS)
        return loglam, (math.log(P) if P > 0 else -np.inf)


def _conditional(m, S, r, d):
    """Gaussian (m, S) conditioned on its first r coordinates equal to d."""
    if r == 0:
        return m.copy(), S.copy()
    A = S[:r, :r]
    Bm = S[r:, :r]
    sol = np.linalg.solve(A, np.column_stack([d - m[:r], Bm.T]))
    cm = m[r:] + Bm @ sol[:, 0]
    cS = S[r:, r:] - Bm @ sol[:, 1:]
    return cm, 0.5 * (cS + cS.T)


def partition_log_weights(obs_sites, obs_values, sv, target=None):
    """Unnormalised log-weights of every hitting scenario (set partition)."""
    obs_sites = _as_sites(obs_sites)
    if target is None:
        target = obs_sites[0] + 1.0
    st = _CondSetup(obs_sites, obs_values, target, sv)
    cache = {}
    parts = list(set_partitions(range(st.K)))
    lw = np.empty(len(parts))
    for i, P in enumerate(parts):
        tot = 0.0
        for B in P:
            key = tuple(B)
            if key not in cache:
                cache[key] = sum(st.block_terms(B))
            tot += cache[key]
        lw[i] = tot
    return parts, lw, st


def conditional_sample_br(obs_sites, obs_values, target, sv, rng, n):
    """n draws of W(target) given W(obs_sites) = obs_values (exact)."""
    rng = as_generator(rng)
    obs_sites = _as_sites(obs_sites)
    z = np.asarray(obs_values, dtype=float).ravel()
    K = len(z)
    if K < 1:
        raise ValidationError("need at least one conditioning site")
    if K > MAX_CONDITIONING:
        raise ValidationError(f"too many conditioning sites ({K} > {MAX_CONDITIONING})")
    if len(obs_sites) != K:
        raise ValidationError("obs sites and values differ in length")
    if not np.all(z > 0):
        raise ValidationError("conditioning values must be positive")
    _check_distinct(obs_sites)
    target = np.asarray(target, dtype=float)
    if np.any(np.hypot(*(obs_sites - target).T) == 0):
        raise ValidationError("target coincides with a conditioning site")
    parts, lw, st = partition_log_weights(obs_sites, z, sv, target)
    if not np.isfinite(lw).any():
        raise NumericalError("all hitting scenarios have zero weight")
    p = np.exp(lw - lw.max())
    p /= p.sum()
    pick = rng.choice(len(parts), size=n, p=p)
    out = np.zeros(n)
    for j in np.unique(pick):
        rows = np.flatnonzero(pick == j)
        for B in parts[j]:
            out[rows] = np.maximum(out[rows], _extremal_at_target(st, B, len(rows), rng))
    out = np.maximum(out, _subextremal_at_target(st, n, rng))
    return out


def _extremal_at_target(st, B, n, rng, max_rounds=10_000):
    """Value at the target of the extremal function hitting block B,
    conditioned to stay below the observations elsewhere."""
    K = st.K
    b = B[0]
    rest = list(B[1:])
    comp = [i for i in range(K) if i not in B]
    r = len(rest)
    idx = rest + comp + [K]
    m, S = st.pinned(b, idx)
    d = st.lz[rest] - st.lz[b]
    cm, cS = _conditional(m, S, r, d)
    R = _psd_sqrt(cS, what="conditional covariance")
    lim = st.lz[comp] - st.lz[b]
    out = np.empty(n)
    todo = np.arange(n)
    for k in range(max_rounds):
        if todo.size == 0:
            return out
        D = cm[None, :] + rng.standard_normal((todo.size, len(cm))) @ R.T
        ok = np.all(D[:, :-1] < lim[None, :], axis=1) if comp else np.ones(todo.size, bool)
        out[todo[ok]] = st.z[b] * np.exp(D[ok, -1])
        if k == 0 and ok.mean() < GIBBS_SWITCH:
            todo = todo[~ok]
            out[todo] = st.z[b] * np.exp(_gibbs_orthant(cm, cS, lim, todo.size, rng))
            return out
        todo = todo[~ok]
    raise NumericalError("rejection sampler for conditioned extremal function did not finish")


def _gibbs_orthant(m, S, lim, n, rng, sweeps=GIBBS_SWEEPS):
    """Last coordinate of N(m, S) restricted to {x[:-1] < lim}: n parallel
    Gibbs chains on the truncated coordinates, then an exact Gaussian draw
    of the last coordinate given them."""
    k = len(lim)
    Sc = S[:k, :k]
    Q = np.linalg.inv(Sc)
    sd = 1.0 / np.sqrt(np.diag(Q))
    # feasible start strictly inside the orthant
    x = np.tile(np.minimum(m[:k], lim - sd), (n, 1))
    for _ in range(sweeps):
        for j in range(k):
            dev = x - m[:k]
            mu = m[j] - (dev @ Q[j] - Q[j, j] * dev[:, j]) / Q[j, j]
            beta = (lim[j] - mu) / sd[j]
            logu = np.log(rng.uniform(size=n)) + log_ndtr(beta)
            x[:, j] = mu + sd[j] * np.minimum(ndtri_exp(logu), beta)
    w = np.linalg.solve(Sc, S[:k, k])
    cmu = m[k] + (x - m[:k]) @ w
    cvar = max(S[k, k] - S[k, :k] @ w, 0.0)
    return cmu + math.sqrt(cvar) * rng.standard_normal(n)


def _subextremal_at_target(st, n, rng):
    """Largest value at the target among Poisson functions lying below all
    observations; functions are normalised at the target so zeta decreases."""
    K = st.K
    m, S = st.pinned(K, list(range(K)))
    R = _psd_sqrt(S, what="increment covariance")
    out = np.empty(n)
    E = np.zeros(n)
    todo = np.arange(n)
    while todo.size:
        E[todo] += rng.standard_exponential(todo.size)
        zeta = 1.0 / E[todo]
        D = m[None, :] + rng.standard_normal((todo.size, K)) @ R.T
        ok = np.all(zeta[:, None] * np.exp(D) < st.z[None, :], axis=1)
        out[todo[ok]] = zeta[ok]
        todo = todo[~ok]
    return out
