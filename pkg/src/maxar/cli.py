"""Command-line pipeline: simulate, fit, forecast, diagnose, score.

Every output gets a ``<output>.meta`` sidecar (key=value) holding the full
resolved configuration, so a run can be repeated with ``--config``.
"""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import (detect_atom, empirical_crosscorr, fmadogram_binned, ratio_field_cdf)
from .errors import DataError, MaxarError, NumericalError, ValidationError
from .forecast import forecast_grid
from .gev import (GevParams, fit_marginals, from_frechet, load_marginals, save_marginals,
                  standardize_field)
from .grid import SpaceTimeField, SpatialGrid, build_mask, load_field, save_field
from .inference import (FitResult, OptimizerConfig, bootstrap_ci, default_epsilon,
                        epsilon_sensitivity, fit_two_step)
from .model import ModelParams, simulate_st, theoretical_crosscorr, StPair
from .rng import substream
from .scoring import evaluate_protocol, score_table_csv

DESK_PSI = "2.19,0.665,0.25,-0.25,0.97"
# provenance keys a sidecar may carry besides flags; ignored when read back
META_ONLY = {"command", "maxar_version", "scale", "scale_in", "bootstrap_failed"}


# ------------------------------------------------------------------ helpers

def read_config(path):
    """Flat key=value file; '#' starts a comment. Keys use flag names."""
    out = {}
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such config file: {p}")
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{p}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def write_meta(output, args, extra=None):
    skip = {"func", "config"}
    lines = [f"maxar_version={__version__}"]
    for k, v in sorted(vars(args).items()):
        if k in skip or v is None:
            continue
        if isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{k}={v}")
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    meta = Path(str(output) + ".meta")
    meta.write_text("\n".join(lines) + "\n")
    return meta


def read_meta(path):
    p = Path(str(path) + ".meta")
    if not p.exists():
        return {}
    return read_config(p)


def _floats(s, n=None, what="value"):
    try:
        v = [float(x) for x in str(s).split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"could not parse {what} {s!r}")
    if n is not None and len(v) != n:
        raise ValidationError(f"{what} needs {n} comma-separated numbers, got {s!r}")
    return v


def _ints(s, what="value"):
    try:
        return [int(x) for x in str(s).split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"could not parse {what} {s!r}")


def _load_input(args, need_frechet=True):
    """Input field plus (raw field, marginal model) when it was raw."""
    scale = args.scale or read_meta(args.input).get("scale", "raw")
    field = load_field(args.input, scale=scale)
    if field.scale == "frechet" or not need_frechet:
        return field, None, None
    if field.scale != "raw":
        raise ValidationError(f"unsupported input scale {field.scale!r}")
    if getattr(args, "marginals", None):
        marg = load_marginals(args.marginals, field.grid)
    else:
        raise ValidationError("raw-scale input needs --marginals (a GEV table from `maxar fit`) "
                              "or --scale frechet")
    return standardize_field(field, marg), field, marg


def _psi_from(args):
    if getattr(args, "fit", None):
        return FitResult.from_text(Path(args.fit).read_text()).psi
    return ModelParams.from_vector(_floats(args.psi, 5, "psi"))


def _opt_config(args):
    c = OptimizerConfig()
    if getattr(args, "restarts", None) is not None:
        c.restarts = int(args.restarts)
    if getattr(args, "maxfev", None) is not None:
        c.maxfev = int(args.maxfev)
    return c


# ----------------------------------------------------------------- commands

def cmd_simulate(args):
    m1, m2 = _ints(args.shape, "shape")
    grid = SpatialGrid(float(args.mesh), (m1, m2), tuple(_floats(args.origin, 2, "origin")))
    psi = ModelParams.from_vector(_floats(args.psi, 5, "psi"))
    hist = None if args.history is None else int(args.history)
    field = simulate_st(grid, int(args.T), psi, substream(args.seed), history=hist)
    scale = "frechet"
    if args.gev:
        g = GevParams(*_floats(args.gev, 3, "gev"))
        field = SpaceTimeField(grid, from_frechet(field.values, g), "raw")
        scale = "raw"
    save_field(field, args.output)
    write_meta(args.output, args, {"scale": scale})
    return 0


def cmd_fit(args):
    scale = args.scale or read_meta(args.input).get("scale", "raw")
    field = load_field(args.input, scale=scale)
    out = Path(args.output)
    marg = None
    if field.scale == "raw":
        marg = fit_marginals(field)
        save_marginals(marg, field.grid, str(out) + ".gev.csv")
        z = standardize_field(field, marg)
    elif field.scale == "frechet":
        z = field
    else:
        raise ValidationError("fit needs a raw or Frechet field")
    mesh = field.grid.mesh
    m1, m2 = field.grid.shape
    r_s = float(args.r) if args.r is not None else max(1.0, math.hypot(m1 - 1, m2 - 1))
    mask_s = build_mask(mesh, r_s, 1, True)
    mask_st = build_mask(mesh, float(args.r_st), int(args.p), False)
    eps = default_epsilon(mesh, int(args.p)) if args.epsilon is None else float(args.epsilon)
    cfg = _opt_config(args)
    res = fit_two_step(z, mask_s, mask_st, int(args.p), eps, cfg)
    out.write_text(res.to_text())
    extra = {"scale_in": field.scale}
    if args.bootstrap:
        bfield, bm = (field, "fit") if field.scale == "raw" else (z, None)
        br = bootstrap_ci(bfield, B=int(args.bootstrap), level=float(args.level), seed=args.seed,
                          marginals=bm, mask_s=mask_s, mask_st=mask_st, p=int(args.p), eps=eps,
                          fit=res, config=cfg, threads=int(args.threads))
        Path(str(out) + ".bootstrap.csv").write_text(br.to_csv())
        extra["bootstrap_failed"] = br.n_failed
    if args.sensitivity:
        rows = ["epsilon,kappa,hurst,tau1,tau2,a,log_pl_spacetime,boundary"]
        for e, r in epsilon_sensitivity(z, mask_s, mask_st, int(args.p), eps, cfg):
            v = r.psi.as_vector()
            rows.append(f"{e:.10g}," + ",".join(f"{x:.10g}" for x in v)
                        + f",{r.log_pl_spacetime:.17g},{str(r.boundary).lower()}")
        Path(str(out) + ".eps.csv").write_text("\n".join(rows) + "\n")
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    write_meta(out, args, extra)
    return 0


def cmd_forecast(args):
    z, raw, marg = _load_input(args)
    psi = _psi_from(args)
    t0 = z.T if args.t0 is None else int(args.t0)
    parts = []
    for u in _ints(args.lead, "lead"):
        gf = forecast_grid(z, t0, u, int(args.ensemble_size), psi, marg, seed=args.seed,
                           threads=int(args.threads))
        text = gf.to_csv(z.grid)
        parts.append(text if not parts else text.split("\n", 1)[1])
    Path(args.output).write_text("".join(parts))
    write_meta(args.output, args)
    return 0


def _parse_lags(s):
    """'h1:h2:u;h1:h2:u' (physical h)."""
    out = []
    for item in str(s).split(";"):
        item = item.strip()
        if not item:
            continue
        f = item.split(":")
        if len(f) != 3:
            raise ValidationError(f"lag {item!r} must be h1:h2:u")
        out.append(((float(f[0]), float(f[1])), int(f[2])))
    return out


def cmd_diagnose(args):
    z, _, _ = _load_input(args)
    out = Path(args.output)
    lags = _parse_lags(args.lags) if args.lags else [((z.grid.mesh, 0.0), 1), ((0.0, z.grid.mesh), 1)]
    psi = _psi_from(args) if (args.fit or args.psi) else None
    ratio_rows, atom_rows = [], ["h1,h2,u,atom_location,atom_mass"]
    for h, u in lags:
        if u < 1:
            continue
        c = ratio_field_cdf(z, h, u)
        ratio_rows.append(c.to_csv() if not ratio_rows else c.to_csv().split("\n", 1)[1])
        a = detect_atom(c, float(args.atom_threshold))
        atom_rows.append(f"{h[0]:.10g},{h[1]:.10g},{u}," + ("nan,0" if a is None else f"{a[0]:.17g},{a[1]:.17g}"))
        if a is not None:
            print(f"warning: atom of mass {a[1]:.3f} at {a[0]:.4g} for h={h}, u={u}: "
                  "tau may coincide with h/u", file=sys.stderr)
    Path(str(out) + ".ratio.csv").write_text("".join(ratio_rows))
    Path(str(out) + ".atoms.csv").write_text("\n".join(atom_rows) + "\n")
    g = z.grid
    dmax = g.mesh * math.hypot(g.shape[0] - 1, g.shape[1] - 1)
    bins = np.linspace(0, dmax + 1e-9, int(args.bins) + 1)
    cen, th, cnt, cl = fmadogram_binned(z, bins, max_pairs=200_000, rng=substream(args.seed, 1))
    rows = ["dist,theta,n_pairs,clipped"]
    rows += [f"{d:.10g},{t:.17g},{n},{str(bool(c)).lower()}" for d, t, n, c in zip(cen, th, cnt, cl)]
    Path(str(out) + ".madogram.csv").write_text("\n".join(rows) + "\n")
    rows = ["h1,h2,u,rho_mean,rho_lo,rho_hi,rho_model"]
    for h, u in lags:
        cc = empirical_crosscorr(z, h, u)
        model = float("nan")
        if psi is not None:
            hh, uu = np.asarray(h, float), u
            if uu < 0:
                hh, uu = -hh, -uu
            model = theoretical_crosscorr(StPair(tuple(hh), uu), psi)
        rows.append(f"{h[0]:.10g},{h[1]:.10g},{u},{cc.mean:.17g},{cc.lo:.17g},{cc.hi:.17g},{model:.17g}")
    Path(str(out) + ".crosscorr.csv").write_text("\n".join(rows) + "\n")
    write_meta(out, args)
    return 0


def cmd_score(args):
    z, raw, marg = _load_input(args)
    psi = _psi_from(args)
    rows, _ = evaluate_protocol(z, psi, _ints(args.lead, "lead"), int(args.n_events),
                                int(args.ensemble_size), args.seed, marginals=marg, raw_field=raw,
                                scale="raw" if args.raw_scale else "gumbel")
    Path(args.output).write_text(score_table_csv(rows))
    write_meta(args.output, args)
    return 0


# ------------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="maxar", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, input_=True):
        sp.add_argument("--config", help="key=value file; flags override it")
        if input_:
            sp.add_argument("--input", required=False)
            sp.add_argument("--scale", choices=("raw", "frechet"),
                            help="scale of --input (default: from its .meta sidecar, else raw)")
        sp.add_argument("--output", required=False)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=1)

    s = sub.add_parser("simulate", help="simulate a space-time field")
    common(s, input_=False)
    s.add_argument("--shape", default="10,10")
    s.add_argument("--mesh", type=float, default=0.25)
    s.add_argument("--origin", default="0,0")
    s.add_argument("--T", type=int, default=50)
    s.add_argument("--psi", default=DESK_PSI, help="kappa,H,tau1,tau2,a")
    s.add_argument("--history", type=int, help="memory truncation in steps (default exact)")
    s.add_argument("--gev", help="mu,sigma,xi: write raw values with this GEV margin")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="GEV margins + two-step pairwise likelihood")
    common(f)
    f.add_argument("--r", type=float, help="step-1 lag radius in cells (default: all pairs)")
    f.add_argument("--r-st", type=float, default=1.0, help="step-2 lag radius in cells")
    f.add_argument("--p", type=int, default=1)
    f.add_argument("--epsilon", type=float)
    f.add_argument("--bootstrap", type=int, default=0, help="bootstrap replicates B (0: none)")
    f.add_argument("--level", type=float, default=0.95)
    f.add_argument("--restarts", type=int)
    f.add_argument("--maxfev", type=int)
    f.add_argument("--sensitivity", action=argparse.BooleanOptionalAction, default=True,
                   help="refit at epsilon x 0.5, 1, 2")
    f.set_defaults(func=cmd_fit)

    for name, func, hlp in (("forecast", cmd_forecast, "ensemble forecasts on the grid"),
                            ("score", cmd_score, "CRPS/RMSE evaluation protocol")):
        c = sub.add_parser(name, help=hlp)
        common(c)
        c.add_argument("--marginals", help="GEV table for a raw input")
        c.add_argument("--fit", help="fit result file (else --psi)")
        c.add_argument("--psi", default=None)
        c.add_argument("--lead", default="1")
        c.add_argument("--ensemble-size", type=int, default=500)
        if name == "forecast":
            c.add_argument("--t0", type=int, help="base time (default: last)")
        else:
            c.add_argument("--n-events", type=int, default=2000)
            c.add_argument("--raw-scale", action="store_true", help="score raw values")
        c.set_defaults(func=func)

    d = sub.add_parser("diagnose", help="ratio field, F-madogram and cross-correlations")
    common(d)
    d.add_argument("--marginals")
    d.add_argument("--fit")
    d.add_argument("--psi", default=None)
    d.add_argument("--lags", help="h1:h2:u;... (physical h)")
    d.add_argument("--bins", type=int, default=15)
    d.add_argument("--atom-threshold", type=float, default=0.05)
    d.set_defaults(func=cmd_diagnose)
    return p


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        conf = read_config(args.config)
        sp = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sp._actions}
        conf = {k: v for k, v in conf.items() if k in known or k not in META_ONLY}
        bad = sorted(set(conf) - known)
        if bad:
            raise ValidationError(f"unknown config key(s): {', '.join(bad)}")
        typed = {}
        for a in sp._actions:
            if a.dest in conf:
                v = conf[a.dest]
                if isinstance(a.default, bool) or a.const is True:
                    typed[a.dest] = v.lower() in ("1", "true", "yes")
                else:
                    typed[a.dest] = a.type(v) if a.type else v
        sp.set_defaults(**typed)
        args = parser.parse_args(argv)
    need_in = args.command != "simulate"
    if need_in and not args.input:
        raise ValidationError("--input is required")
    if not args.output:
        raise ValidationError("--output is required")
    if args.threads < 1:
        raise ValidationError("--threads must be >= 1")
    return args


def main(argv=None):
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        return args.func(args)
    except MaxarError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
