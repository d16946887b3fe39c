"""Pairwise composite likelihood: spatial step for (kappa, H), space-time step
for (tau, a) over the constrained set Psi_eps, and a time-index bootstrap.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.optimize import minimize

from ._kernels import pair_logdens_terms, pair_loglik_sum
from .brown_resnick import Semivariogram, gamma
from .errors import DataError, NumericalError, ValidationError
from .gev import fit_marginals, standardize_field, MarginalModel
from .grid import DesignMask, SpaceTimeField, build_mask
from .model import ModelParams
from .rng import substream

LOG_FLOOR = -1e8
_NO_WEIGHTS = np.empty(0)
PARAM_NAMES = ("kappa", "hurst", "tau1", "tau2", "a")


def default_epsilon(mesh, p):
    return min(0.5, mesh / p) / 10.0


@dataclass
class PsiEpsilon:
    eps: float
    mesh: float
    mask: DesignMask
    p: int

    def __post_init__(self):
        upper = min(0.5, self.mesh / self.p)
        if not 0 < self.eps < upper:
            raise ValidationError(f"epsilon must lie in (0, {upper:g}), got {self.eps}")
        cen = [self.mesh * self.mask.cells / u for u in range(1, self.p + 1)]
        self.centers = np.unique(np.round(np.concatenate(cen), 12), axis=0)

    @property
    def lower(self):
        e = self.eps
        return np.array([e, e, -1 / e, -1 / e, e])

    @property
    def upper(self):
        e = self.eps
        return np.array([1 / e, 1 - e, 1 / e, 1 / e, 1 - e])

    def tau_distance(self, tau):
        d = np.hypot(*(np.asarray(tau, float)[None, :] - self.centers).T)
        return d.min(), int(np.argmin(d))

    def contains(self, psi):
        v = np.asarray(psi.as_vector() if isinstance(psi, ModelParams) else psi, float)
        if np.any(v < self.lower) or np.any(v > self.upper):
            return False
        return self.tau_distance(v[2:4])[0] >= self.eps

    def project_tau(self, tau):
        """Push tau radially out of any violated exclusion ball (repeat until clear)."""
        t = np.clip(np.asarray(tau, float), self.lower[2:4], self.upper[2:4])
        for _ in range(20):
            d, i = self.tau_distance(t)
            if d >= self.eps:
                return t
            c = self.centers[i]
            v = t - c
            nv = np.hypot(*v)
            v = np.array([1.0, 0.0]) if nv == 0 else v / nv
            t = c + v * self.eps * (1 + 1e-9)
            t = np.clip(t, self.lower[2:4], self.upper[2:4])
        raise NumericalError("could not project tau out of the excluded balls")

    def on_boundary(self, v, rtol=1e-6):
        v = np.asarray(v, float)
        span = self.upper - self.lower
        box = np.any(np.abs(v - self.lower) <= rtol * span) or np.any(np.abs(v - self.upper) <= rtol * span)
        ball = self.tau_distance(v[2:4])[0] <= self.eps * (1 + 1e-4)
        return bool(box or ball)


class TermSet:
    """Flattened pairwise-likelihood terms for a field and design.

    Term order is lag-major, then site, then time, and never depends on how
    the work is split, so sums are reproducible.
    """

    def __init__(self, field, mask, p=0):
        if field.scale != "frechet":
            raise ValidationError("pairwise likelihood needs a Frechet-scale field")
        grid = field.grid
        T = field.T
        us = [0] if p == 0 else list(range(1, p + 1))
        i1s, i2s, ts, lags = [], [], [], []
        lag_cells, lag_u = [], []
        for u in us:
            if T - u < 1:
                continue
            for z in mask.cells:
                j = grid.shifted_index(z)
                src = np.flatnonzero(j >= 0)
                if src.size == 0:
                    continue
                l = len(lag_cells)
                lag_cells.append(z)
                lag_u.append(u)
                nt = T - u
                i1s.append(np.repeat(src, nt))
                i2s.append(np.repeat(j[src], nt))
                ts.append(np.tile(np.arange(nt), src.size))
                lags.append(np.full(src.size * nt, l))
        if not lag_cells:
            raise DataError("design mask produces no pairs on this grid")
        self.T = T
        self.mesh = grid.mesh
        self.lag_h = grid.mesh * np.array(lag_cells, float)
        self.lag_u = np.array(lag_u, int)
        self.i1 = np.concatenate(i1s).astype(np.int32)
        self.i2 = np.concatenate(i2s).astype(np.int32)
        self.t1 = np.concatenate(ts).astype(np.int32)
        self.lag = np.concatenate(lags).astype(np.int32)
        self.set_values(field.values)
        self.weights = None

    def set_values(self, values):
        lz = np.log(values)
        self.lz1 = lz[self.i1, self.t1]
        self.lz2 = lz[self.i2, self.t1 + self.lag_u[self.lag]]
        self.iz1 = np.exp(-self.lz1)
        self.iz2 = np.exp(-self.lz2)

    def __len__(self):
        return len(self.lag)

    def restrict(self, tw):
        """Copy keeping only terms whose first time has positive weight
        (bootstrap multiplicities); the weights multiply the terms."""
        tw = np.asarray(tw, float)
        keep = tw[self.t1] > 0
        new = object.__new__(TermSet)
        new.__dict__.update(self.__dict__)
        for k in ("i1", "i2", "t1", "lag", "lz1", "lz2", "iz1", "iz2"):
            setattr(new, k, getattr(self, k)[keep])
        new.weights = tw[new.t1]
        return new

    def lag_gammas(self, sv, tau=(0.0, 0.0)):
        eff = self.lag_h - self.lag_u[:, None] * np.asarray(tau, float)[None, :]
        return gamma(eff, sv)

    def _lag_args(self, sv, tau, a):
        g = self.lag_gammas(sv, tau)
        if np.any(g <= 0):
            l = int(np.flatnonzero(g <= 0)[0])
            raise ValidationError(
                f"degenerate pair: lag h={tuple(self.lag_h[l])}, u={self.lag_u[l]} has h = u tau")
        b = np.power(a, self.lag_u.astype(float))
        return (self.lz1, self.lz2, self.iz1, self.iz2, self.lag, np.sqrt(2 * g), b, np.log(b),
                LOG_FLOOR)

    def terms(self, sv, tau=(0.0, 0.0), a=1.0):
        """Per-term log-densities (unweighted) and the clip count."""
        return pair_logdens_terms(*self._lag_args(sv, tau, a))

    def loglik(self, sv, tau=(0.0, 0.0), a=1.0):
        w = _NO_WEIGHTS if self.weights is None else self.weights
        val, nclip, bad = pair_loglik_sum(*self._lag_args(sv, tau, a), w)
        if bad >= 0:
            l = self.lag[bad]
            raise NumericalError(f"non-finite log-density at site {self.i1[bad]}, "
                                 f"t={self.t1[bad] + 1}, h={tuple(self.lag_h[l])}, u={self.lag_u[l]}")
        return float(val), int(nclip)


def count_terms(grid, mask, T, p=0):
    """Closed-form number of pairwise terms (p=0: spatial)."""
    m1, m2 = grid.shape
    per_t = sum(max(m1 - abs(z[0]), 0) * max(m2 - abs(z[1]), 0) for z in mask.cells)
    if p == 0:
        return per_t * T
    return per_t * sum(max(T - u, 0) for u in range(1, p + 1))


def spatial_pl(field, mask, kappa, hurst):
    if not mask.spatial_only:
        raise ValidationError("spatial likelihood expects a spatial-only (half-plane) mask")
    return TermSet(field, mask, 0).loglik(Semivariogram(kappa, hurst))[0]


def spacetime_pl(field, mask, p, psi, eps=None):
    if mask.spatial_only:
        raise ValidationError("space-time likelihood expects a full mask")
    if eps is None:
        eps = default_epsilon(field.grid.mesh, p)
    region = PsiEpsilon(eps, field.grid.mesh, mask, p)
    if not region.contains(psi):
        raise ValidationError(f"parameter {tuple(np.round(psi.as_vector(), 6))} is outside Psi_eps "
                              f"(eps={eps:g})")
    return TermSet(field, mask, p).loglik(psi.sv, psi.tau, psi.a)[0]


# ----------------------------------------------------------------- fitting

@dataclass
class OptimizerConfig:
    restarts: int = 5
    maxfev: int = 600
    xatol: float = 1e-4
    fatol: float = 1e-4
    penalty: float = 1e6


@dataclass
class FitResult:
    psi: ModelParams
    log_pl_spatial: float
    log_pl_spacetime: float
    n_terms_spatial: int
    n_terms_spacetime: int
    eps: float
    r_spatial: float
    r_spacetime: float
    p: int
    n_clipped: int = 0
    boundary: bool = False
    converged: bool = True
    warnings: list = dc_field(default_factory=list)
    trace: list = dc_field(default_factory=list)

    def to_text(self):
        v = self.psi.as_vector()
        lines = [f"{k}={x:.17g}" for k, x in zip(PARAM_NAMES, v)]
        lines += [
            f"log_pl_spatial={self.log_pl_spatial:.17g}",
            f"log_pl_spacetime={self.log_pl_spacetime:.17g}",
            f"n_terms_spatial={self.n_terms_spatial}",
            f"n_terms_spacetime={self.n_terms_spacetime}",
            f"epsilon={self.eps:.17g}",
            f"r_spatial={self.r_spatial:.17g}",
            f"r_spacetime={self.r_spacetime:.17g}",
            f"p={self.p}",
            f"n_clipped={self.n_clipped}",
            f"boundary={str(self.boundary).lower()}",
            f"converged={str(self.converged).lower()}",
            f"warnings={';'.join(self.warnings)}",
        ]
        for i, (stage, start, val, nfev) in enumerate(self.trace):
            lines.append(f"trace.{i}={stage}|{','.join(f'{s:.10g}' for s in start)}|{val:.17g}|{nfev}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
        try:
            psi = ModelParams.from_vector([float(kv[k]) for k in PARAM_NAMES])
            trace = []
            for k in sorted((k for k in kv if k.startswith("trace.")), key=lambda s: int(s.split(".")[1])):
                stage, start, val, nfev = kv[k].split("|")
                trace.append((stage, [float(x) for x in start.split(",")], float(val), int(nfev)))
            return cls(
                psi=psi,
                log_pl_spatial=float(kv.get("log_pl_spatial", "nan")),
                log_pl_spacetime=float(kv.get("log_pl_spacetime", "nan")),
                n_terms_spatial=int(kv.get("n_terms_spatial", 0)),
                n_terms_spacetime=int(kv.get("n_terms_spacetime", 0)),
                eps=float(kv.get("epsilon", "nan")),
                r_spatial=float(kv.get("r_spatial", "nan")),
                r_spacetime=float(kv.get("r_spacetime", "nan")),
                p=int(kv.get("p", 1)),
                n_clipped=int(kv.get("n_clipped", 0)),
                boundary=kv.get("boundary", "false") == "true",
                converged=kv.get("converged", "true") == "true",
                warnings=[w for w in kv.get("warnings", "").split(";") if w],
                trace=trace,
            )
        except KeyError as e:
            raise DataError(f"fit result is missing key {e}")


def _nm(fun, x0, steps, cfg):
    sim = np.vstack([x0] + [x0 + np.eye(len(x0))[i] * steps[i] for i in range(len(x0))])
    res = minimize(fun, x0, method="Nelder-Mead",
                   options=dict(initial_simplex=sim, xatol=cfg.xatol, fatol=cfg.fatol,
                                maxfev=cfg.maxfev))
    return res


class _SpatialObjective:
    """-PL_S over (log kappa, H), clipped to the box with a quadratic penalty."""

    def __init__(self, terms, region, cfg):
        self.terms, self.region, self.cfg = terms, region, cfg
        lo, hi = region.lower, region.upper
        self.lo = np.array([math.log(lo[0]), lo[1]])
        self.hi = np.array([math.log(hi[0]), hi[1]])
        self.nfev = 0

    def feasible(self, x):
        return np.clip(x, self.lo, self.hi)

    def __call__(self, x):
        self.nfev += 1
        y = self.feasible(np.asarray(x, float))
        val, _ = self.terms.loglik(Semivariogram(math.exp(y[0]), y[1]))
        return -val + self.cfg.penalty * float(np.sum((x - y) ** 2))


class _TemporalObjective:
    """-PL over (tau1, tau2, a) with theta fixed; iterates are projected into
    Psi_eps (box clip + radial push out of the excluded balls) and penalised
    by the squared projection distance."""

    def __init__(self, terms, region, sv, cfg):
        self.terms, self.region, self.sv, self.cfg = terms, region, sv, cfg
        self.lo = region.lower[2:]
        self.hi = region.upper[2:]
        self.nfev = 0

    def feasible(self, x):
        y = np.clip(np.asarray(x, float), self.lo, self.hi)
        y[:2] = self.region.project_tau(y[:2])
        return y

    def value(self, y):
        return self.terms.loglik(self.sv, y[:2], y[2])

    def __call__(self, x):
        self.nfev += 1
        y = self.feasible(x)
        val, _ = self.value(y)
        return -val + self.cfg.penalty * float(np.sum((np.asarray(x) - y) ** 2))


def _spatial_starts(mesh, region):
    ks = np.geomspace(max(region.lower[0], mesh / 4), min(region.upper[0], 64 * mesh), 9)
    hs = np.clip([0.2, 0.4, 0.6, 0.8], region.lower[1], region.upper[1])
    return [np.array([math.log(k), h]) for k in ks for h in hs]


def _temporal_starts(mesh, region):
    """Coarse (tau, a) grid: grid-aligned and off-axis directions at several
    multiples of the mesh; infeasible points are projected into Psi_eps."""
    starts = []
    ang = np.deg2rad(np.arange(16) * 22.5 + 11.25)
    dirs = np.column_stack([np.cos(ang), np.sin(ang)])
    axis = np.array([[1, 0], [-1, 0], [0, 1], [0, -1], [1, 1], [1, -1], [-1, 1], [-1, -1]], float)
    axis /= np.hypot(*axis.T)[:, None]
    taus = [mesh * s * d for s in (0.25, 0.5, 1.0) for d in axis]
    taus += [mesh * s * d for s in (0.5, 1.5, 2.5, 4.0) for d in dirs]
    for t in taus:
        t = region.project_tau(t)
        for a in (0.3, 0.6, 0.9):
            starts.append(np.array([t[0], t[1], a]))
    return starts


def fit_spatial(terms, region, cfg=None, start=None, steps=(0.1, 0.05)):
    cfg = cfg or OptimizerConfig()
    obj = _SpatialObjective(terms, region, cfg)
    if start is None:
        cands = _spatial_starts(region.mesh, region)
        vals = [obj(c) for c in cands]
        order = np.argsort(vals)[:2]
        starts = [cands[i] for i in order]
    else:
        starts = [np.array([math.log(start[0]), start[1]])]
    best, trace = None, []
    for x0 in starts:
        res = _nm(obj, x0, np.asarray(steps), cfg)
        trace.append(("spatial", [math.exp(x0[0]), x0[1]], -float(res.fun), int(res.nfev)))
        if best is None or res.fun < best.fun:
            best = res
    y = obj.feasible(best.x)
    val, nclip = terms.loglik(Semivariogram(math.exp(y[0]), y[1]))
    return (math.exp(y[0]), float(y[1])), val, nclip, bool(best.success), trace


def fit_temporal(terms, region, sv, cfg=None, start=None, steps=None):
    cfg = cfg or OptimizerConfig()
    obj = _TemporalObjective(terms, region, sv, cfg)
    mesh = region.mesh
    if steps is None:
        steps = np.array([0.1 * mesh, 0.1 * mesh, 0.05])
    if start is None:
        cands = _temporal_starts(mesh, region)
        vals = np.array([obj(c) for c in cands])
        order = np.argsort(vals, kind="stable")
        starts = []
        for i in order:
            if all(np.max(np.abs(cands[i] - s)) > 1e-12 for s in starts):
                starts.append(cands[i])
            if len(starts) == cfg.restarts:
                break
    else:
        starts = [obj.feasible(np.asarray(start, float))]
    best, trace = None, []
    for x0 in starts:
        res = _nm(obj, x0, steps, cfg)
        trace.append(("temporal", list(x0), -float(res.fun), int(res.nfev)))
        if best is None or res.fun < best.fun:
            best = res
    y = obj.feasible(best.x)
    val, nclip = obj.value(y)
    return (float(y[0]), float(y[1]), float(y[2])), val, nclip, bool(best.success), trace


def _check_masks(mask_s, mask_st):
    if not mask_s.spatial_only:
        raise ValidationError("step-1 mask must be spatial-only (half-plane)")
    if mask_st.spatial_only:
        raise ValidationError("step-2 mask must be a full mask")


def fit_two_step(field, mask_s=None, mask_st=None, p=1, eps=None, config=None):
    """Two-step pairwise likelihood estimate of (kappa, H, tau, a)."""
    if field.scale != "frechet":
        raise ValidationError("fit_two_step expects a Frechet-scale field; fit marginals first")
    mesh = field.grid.mesh
    if mask_s is None:
        m1, m2 = field.grid.shape
        mask_s = build_mask(mesh, max(1.0, math.hypot(m1 - 1, m2 - 1)), 1, True)
    if mask_st is None:
        mask_st = build_mask(mesh, 1.0, p, False)
    _check_masks(mask_s, mask_st)
    eps = default_epsilon(mesh, p) if eps is None else float(eps)
    cfg = config or OptimizerConfig()
    region = PsiEpsilon(eps, mesh, mask_st, p)
    ts = TermSet(field, mask_s, 0)
    tt = TermSet(field, mask_st, p)
    return _fit_with_terms(ts, tt, region, cfg, mask_s, mask_st, p, eps)


def _fit_with_terms(ts, tt, region, cfg, mask_s, mask_st, p, eps, start=None):
    th, pl_s, clip_s, ok_s, tr_s = fit_spatial(ts, region, cfg,
                                               start=None if start is None else start[:2])
    sv = Semivariogram(*th)
    tp, pl_t, clip_t, ok_t, tr_t = fit_temporal(tt, region, sv, cfg,
                                                start=None if start is None else start[2:])
    psi = ModelParams(sv, tp[:2], tp[2])
    vec = psi.as_vector()
    warnings = []
    boundary = region.on_boundary(vec)
    if boundary:
        warnings.append("boundary solution")
    if clip_s + clip_t > 0:
        warnings.append(f"{clip_s + clip_t} log-density terms clipped at {LOG_FLOOR:g}")
    if not (ok_s and ok_t):
        warnings.append("optimizer reached its evaluation budget")
    return FitResult(psi, pl_s, pl_t, len(ts), len(tt), eps, mask_s.r, mask_st.r, p,
                     n_clipped=clip_s + clip_t, boundary=boundary, converged=ok_s and ok_t,
                     warnings=warnings, trace=tr_s + tr_t)


def epsilon_sensitivity(field, mask_s, mask_st, p, eps, config=None, factors=(0.5, 1.0, 2.0)):
    """Refit at eps scaled by `factors` (default a factor-4 range)."""
    upper = min(0.5, field.grid.mesh / p)
    out = []
    for f in factors:
        e = eps * f
        if not 0 < e < upper:
            continue
        out.append((e, fit_two_step(field, mask_s, mask_st, p, e, config)))
    return out


# --------------------------------------------------------------- bootstrap

@dataclass
class BootstrapResult:
    estimates: np.ndarray        # (B_ok, 5)
    lo: np.ndarray
    hi: np.ndarray
    level: float
    B: int
    n_failed: int

    def to_csv(self):
        rows = ["param,lo,hi,level,B"]
        for k, l, h in zip(PARAM_NAMES, self.lo, self.hi):
            rows.append(f"{k},{l:.17g},{h:.17g},{self.level:g},{self.B}")
        return "\n".join(rows) + "\n"

    def covers(self, psi):
        v = psi.as_vector() if isinstance(psi, ModelParams) else np.asarray(psi)
        return (self.lo <= v) & (v <= self.hi)


_BOOT = {}


def _boot_init(ctx):
    _BOOT.clear()
    _BOOT.update(ctx)


def _boot_replicate(b):
    c = _BOOT
    T = c["T"]
    rng = substream(c["seed"], b)
    idx = c["sampler"](rng, T) if c["sampler"] is not None else rng.integers(0, T, T)
    w = np.bincount(idx, minlength=T).astype(float)
    try:
        if c["raw"] is not None:
            marg = fit_marginals(c["raw"], weights=w, start=c["marginals"])
            zb = standardize_field(c["raw"], marg, weights=w).values
            ts = c["ts"]
            ts.set_values(zb)
        else:
            ts = c["ts"]
        tsb = ts.restrict(w)
        ttb = c["tt"].restrict(w)
        psi0 = c["psi0"]
        cfg = c["cfg"]
        th, _, _, ok1, _ = fit_spatial(tsb, c["region"], cfg, start=psi0[:2], steps=(0.05, 0.03))
        sv = Semivariogram(*th)
        mesh = c["region"].mesh
        tp, _, _, ok2, _ = fit_temporal(ttb, c["region"], sv, cfg, start=psi0[2:],
                                        steps=np.array([0.05 * mesh, 0.05 * mesh, 0.02]))
        if not (ok1 and ok2):
            return b, None
        return b, np.array([th[0], th[1], tp[0], tp[1], tp[2]])
    except (NumericalError, DataError, ValidationError):
        return b, None


def bootstrap_ci(field, B=100, level=0.95, seed=0, marginals="fit", mask_s=None, mask_st=None,
                 p=1, eps=None, fit=None, config=None, threads=1, sampler=None):
    """Symmetric percentile intervals from resampling time indices with replacement.

    Each interval is psi_hat +/- the `level` quantile of |psi_b - psi_hat|.

    field: raw field (marginals="fit": GEV refitted on every resample for the
    spatial step, full-data GEV for the temporal step) or a Frechet field
    (marginals=None). Replicates that fail are dropped and counted.
    """
    if B < 50 and sampler is None:
        raise ValidationError("bootstrap needs B >= 50")
    if not 0 < level < 1:
        raise ValidationError("level must lie in (0, 1)")
    mesh = field.grid.mesh
    if mask_s is None:
        m1, m2 = field.grid.shape
        mask_s = build_mask(mesh, max(1.0, math.hypot(m1 - 1, m2 - 1)), 1, True)
    if mask_st is None:
        mask_st = build_mask(mesh, 1.0, p, False)
    _check_masks(mask_s, mask_st)
    eps = default_epsilon(mesh, p) if eps is None else float(eps)
    cfg = config or OptimizerConfig()
    region = PsiEpsilon(eps, mesh, mask_st, p)
    if marginals == "fit":
        if field.scale != "raw":
            raise ValidationError("marginals='fit' needs a raw-scale field")
        full_marg = fit_marginals(field)
        zfield = standardize_field(field, full_marg)
        raw = field
    elif marginals is None:
        if field.scale != "frechet":
            raise ValidationError("a raw field needs marginal fitting")
        zfield, raw, full_marg = field, None, None
    elif isinstance(marginals, MarginalModel):
        zfield = standardize_field(field, marginals)
        raw, full_marg = None, None
    else:
        raise ValidationError("marginals must be 'fit', None or a MarginalModel")
    ts = TermSet(zfield, mask_s, 0)
    tt = TermSet(zfield, mask_st, p)
    if fit is None:
        fit = _fit_with_terms(ts, tt, region, cfg, mask_s, mask_st, p, eps)
    ctx = dict(T=field.T, seed=seed, sampler=sampler, raw=raw, marginals=full_marg, ts=ts, tt=tt,
               psi0=fit.psi.as_vector(), cfg=cfg, region=region)
    if threads > 1:
        with ProcessPoolExecutor(threads, initializer=_boot_init, initargs=(ctx,)) as ex:
            results = list(ex.map(_boot_replicate, range(B), chunksize=max(1, B // (4 * threads))))
    else:
        _boot_init(ctx)
        results = [_boot_replicate(b) for b in range(B)]
        _BOOT.clear()
    results.sort(key=lambda r: r[0])
    est = np.array([r[1] for r in results if r[1] is not None])
    nfail = B - len(est)
    if nfail > 0.2 * B:
        raise NumericalError(f"{nfail} of {B} bootstrap replicates failed (> 20%)")
    centre = fit.psi.as_vector()
    half = np.quantile(np.abs(est - centre), level, axis=0)
    lo, hi = centre - half, centre + half
    return BootstrapResult(est, lo, hi, level, B, nfail)
