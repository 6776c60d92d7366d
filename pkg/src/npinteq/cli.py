"""Command-line frontend.

Every verb echoes its effective configuration as a ``# key=value`` line on
stdout, followed by one-line text records.  Curves go to ``--out`` as CSV.
Exit status: 0 on success, 1 on numerical failure, 2 on invalid input.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys

import numpy as np

from .core_types import GridFunction, NumericalError, first_moment, moment
from .deconv import (ConvolutionKernel, DeconvSample, bar_phi_matrix, current_status_variance,
                     exponential_closed_forms, exponential_kt_functional, fit_mle_deconv,
                     local_scaling_constant_deconv, solve_phi_deconv, solve_phi_local,
                     theta_and_variance_deconv)
from .functionals import (asymptotic_variance, local_limit_scale, solve_phi_at_step,
                          solve_phi_smooth, variance_record, xi_scaling_constant)
from .icens import IcSample, ObservationModel, fit_current_status, fit_mle_case2, read_current_status_csv
from .msle import (KernelSpec, asymptotic_bias_variance, bias_variance_record, fit_msle,
                   smooth_densities)
from .simulate import (DeconvModel, IcModel, McConfig, append_ledger, gen_deconv,
                       gen_interval_censored, mc_functional_variance)

VERBS = ("fit-ic", "fit-cs", "fit-deconv", "msle", "phi", "theta", "variance", "xi", "simulate")
MODELS = ("ic-triangle", "deconv-elbow", "deconv-exp", "deconv-uniform")
FUNCTIONALS = ("mean", "moment2", "kt")
F0_CHOICES = ("uniform", "quadratic")

DEFAULTS = {
    "model": "ic-triangle", "epsilon": 0.1, "functional": "mean", "f0": "uniform",
    "grid": None, "tol": 1e-10, "t": None, "n": None, "reps": None, "seed": None,
    "bandwidth": None, "out": None, "threads": 1, "dump_system": None, "estimator": "mle",
}
_INT_KEYS = {"grid", "n", "reps", "seed", "threads"}
_FLOAT_KEYS = {"epsilon", "tol", "t", "bandwidth"}
_CHOICES = {"model": MODELS, "functional": FUNCTIONALS, "f0": F0_CHOICES, "estimator": ("mle", "msle")}


class InputError(ValueError):
    pass


def _quadratic_cdf(x):
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    return 1.0 - (1.0 - x) ** 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file; flags take precedence")
    common.add_argument("--model", choices=MODELS)
    common.add_argument("--epsilon", type=float)
    common.add_argument("--f0", choices=F0_CHOICES, help="true distribution for model-based verbs")
    common.add_argument("--functional", choices=FUNCTIONALS)
    common.add_argument("--t", type=float, help="evaluation point")
    common.add_argument("--grid", type=int, help="quadrature or tabulation size")
    common.add_argument("--tol", type=float)
    common.add_argument("--n", type=int, help="sample size for generated data")
    common.add_argument("--reps", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--bandwidth", type=float)
    common.add_argument("--estimator", choices=("mle", "msle"))
    common.add_argument("--threads", type=int)
    common.add_argument("--dump-system", dest="dump_system", metavar="PREFIX")
    common.add_argument("--out", help="output CSV path")
    parser = argparse.ArgumentParser(prog="npinteq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")
    helps = {
        "fit-ic": "NPMLE for case 2 interval-censored data (CSV t,u,d1,d2)",
        "fit-cs": "NPMLE for current status data (CSV z,delta)",
        "fit-deconv": "deconvolution NPMLE (CSV z)",
        "msle": "smoothed likelihood estimate with the MLE overlaid",
        "phi": "solve the integral equation for phi",
        "theta": "efficient influence function in the observation space",
        "variance": "asymptotic variance of the functional",
        "xi": "local limit scale constants at --t",
        "simulate": "Monte Carlo variance of the root-n plug-in error",
    }
    for verb in VERBS:
        p = sub.add_parser(verb, parents=[common], help=helps[verb])
        if verb in ("fit-ic", "fit-cs", "fit-deconv", "msle"):
            p.add_argument("data", nargs="?" if verb != "fit-cs" else None,
                           help="input CSV (omit to generate from --model with --n and --seed)"
                           if verb != "fit-cs" else "input CSV")
    return parser


def _read_config(path) -> dict:
    out = {}
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}: line {line_no}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise InputError(f"{path}: line {line_no}: unknown key {key!r}")
            out[key] = value
    return out


def _coerce(key, value):
    if value is None:
        return None
    try:
        if key in _INT_KEYS:
            value = int(value)
        elif key in _FLOAT_KEYS:
            value = float(value)
    except (TypeError, ValueError):
        raise InputError(f"{key}: cannot parse {value!r}") from None
    if key in _CHOICES and value not in _CHOICES[key]:
        raise InputError(f"{key}: expected one of {', '.join(_CHOICES[key])}, got {value!r}")
    return value


def effective_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(_read_config(args.config))
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return {k: _coerce(k, v) for k, v in cfg.items()}


def _echo(verb, cfg, out):
    items = " ".join(f"{k}={v}" for k, v in cfg.items() if v is not None)
    print(f"# {verb} {items}", file=out)


def _ic_model(cfg):
    return ObservationModel.uniform_triangle(cfg["epsilon"])


def _kernel(cfg):
    name = cfg["model"]
    if not name.startswith("deconv-"):
        raise InputError(f"model {name!r} is not a deconvolution model")
    return {"deconv-elbow": ConvolutionKernel.elbow, "deconv-exp": ConvolutionKernel.exponential,
            "deconv-uniform": ConvolutionKernel.uniform}[name]()


def _F0(cfg):
    return None if cfg["f0"] == "uniform" else _quadratic_cdf


def _cdf(cfg):
    return (lambda x: np.clip(np.asarray(x, dtype=float), 0.0, 1.0)) if cfg["f0"] == "uniform" \
        else _quadratic_cdf


def _spec(cfg):
    name = cfg["functional"]
    if name == "mean":
        return first_moment()
    if name == "moment2":
        return moment(2)
    if cfg["t"] is None:
        raise InputError("functional kt needs --t")
    return exponential_kt_functional(cfg["t"])


def _require(cfg, *keys):
    missing = [k for k in keys if cfg[k] is None]
    if missing:
        raise InputError("missing required " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _grid(cfg, default):
    g = cfg["grid"] or default
    if g < 16:
        raise InputError("--grid must be at least 16")
    return g


def _write_curve(path, columns, rows):
    if path is None:
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def _curve_rows(gf: GridFunction):
    """Plot-ready (x, value) pairs; a jump node appears twice, left value first."""
    rows = []
    for x, v in zip(gf.grid, gf.values):
        if gf.jump_point is not None and x == gf.jump_point:
            rows.append((x, gf.value_left))
        rows.append((x, v))
    return rows


def _ic_sample(cfg, data):
    if data is not None:
        return IcSample.from_csv(data)
    _require(cfg, "n", "seed")
    return gen_interval_censored(cfg["n"], _F0(cfg), _ic_model(cfg), cfg["seed"])


def _deconv_sample(cfg, data):
    if data is not None:
        return DeconvSample.from_csv(data)
    _require(cfg, "n", "seed")
    return gen_deconv(cfg["n"], _F0(cfg), _kernel(cfg), cfg["seed"])


# --------------------------------------------------------------------------- verbs

def cmd_fit_ic(cfg, args, out):
    sample = _ic_sample(cfg, args.data)
    fit = fit_mle_case2(sample, tol=cfg["tol"], full_output=True)
    if cfg["out"]:
        fit.F.to_csv(cfg["out"])
    print(fit.summary(), file=out)


def cmd_fit_cs(cfg, args, out):
    pairs = read_current_status_csv(args.data)
    F = fit_current_status(pairs)
    if cfg["out"]:
        F.to_csv(cfg["out"])
    print(f"jumps={F.jump_points.size},total_mass={F.total_mass!r}", file=out)


def cmd_fit_deconv(cfg, args, out):
    g = _kernel(cfg)
    sample = _deconv_sample(cfg, args.data)
    fit = fit_mle_deconv(sample, g, tol=cfg["tol"])
    if cfg["out"]:
        fit.F.to_csv(cfg["out"])
    line = (f"loglik={fit.loglik!r},jumps={fit.F.jump_points.size},"
            f"support_residual={fit.prop21_residual!r},max_violation={fit.max_violation!r}")
    if g.differentiable:
        bar_phi, _ = bar_phi_matrix(fit, sample, _spec(cfg))
        line += f",orthogonality={bar_phi.residual_sup!r}"
    print(line, file=out)


def cmd_msle(cfg, args, out):
    model = _ic_model(cfg)
    sample = _ic_sample(cfg, args.data)
    kernel = (KernelSpec.default(sample.n) if cfg["bandwidth"] is None
              else KernelSpec(cfg["bandwidth"]))
    sm = smooth_densities(sample, kernel, model, _grid(cfg, 200))
    Ft, info = fit_msle(sm, tol=cfg["tol"], full_output=True)
    mle = fit_mle_case2(sample, tol=min(cfg["tol"], 1e-8))
    truth = _cdf(cfg)
    x = Ft.grid
    _write_curve(cfg["out"], ["x", "msle", "mle", "F0"],
                 zip(x, Ft.values, mle(x), truth(x)))
    print(f"bandwidth={kernel.bandwidth!r},residual={info.residual!r},iterations={info.iterations},"
          f"monotone_violations={info.monotone_violations}", file=out)
    if cfg["t"] is not None:
        beta, s1, var = asymptotic_bias_variance(cfg["t"], model, _F0(cfg))
        print(bias_variance_record(cfg["t"], beta, s1, var), file=out)


def _phi_curve(cfg):
    """(GridFunction phi, residual, grid size) for the configured model."""
    grid = _grid(cfg, 2000)
    dump = cfg["dump_system"]
    if cfg["model"] == "ic-triangle":
        model = _ic_model(cfg)
        if cfg["t"] is None:
            phi = solve_phi_smooth(model, _cdf(cfg), _spec(cfg), grid, dump_system=dump)
            gf = phi.to_grid_function()
        else:
            phi = solve_phi_at_step(model, _cdf(cfg), _spec(cfg), grid, local_t=cfg["t"],
                                    dump_system=dump)
            g = phi.smooth_part.grid
            gf = GridFunction(g, phi(g), jump_point=cfg["t"], value_left=float(phi(cfg["t"], left=True)))
        return gf, phi.residual_sup, grid
    g = _kernel(cfg)
    if g.family == "uniform":
        raise InputError("the uniform kernel has no phi-equation; use the current status verbs")
    if cfg["t"] is None:
        gf, sol = solve_phi_deconv(_F0(cfg), g, _spec(cfg), grid, dump_system=dump, full_output=True)
    else:
        gf, sol = solve_phi_local(cfg["t"], _F0(cfg), g, grid, dump_system=dump, full_output=True)
    return gf, sol.residual_sup, grid


def cmd_phi(cfg, args, out):
    gf, resid, grid = _phi_curve(cfg)
    _write_curve(cfg["out"], ["x", "phi"], _curve_rows(gf))
    jump = "" if gf.jump_point is None else f",jump_at={gf.jump_point!r}"
    print(f"phi,nodes={gf.grid.size},grid_size={grid},residual={resid!r}{jump}", file=out)


def cmd_theta(cfg, args, out):
    if cfg["model"] == "ic-triangle":
        gf, resid, grid = _phi_curve(cfg)
        F = _cdf(cfg)
        x = gf.grid
        Fx = np.asarray(F(x))
        inner = (Fx > 0) & (Fx < 1)
        x, p, Fx = x[inner], gf(x[inner]), Fx[inner]
        # theta at delta1 = 1 as a function of t, and at delta3 = 1 as a function of u
        _write_curve(cfg["out"], ["x", "theta_below", "theta_above"], zip(x, -p / Fx, p / (1 - Fx)))
        print(f"theta,grid_size={grid},residual={resid!r}", file=out)
        return
    g = _kernel(cfg)
    if g.family == "exponential" and cfg["t"] is not None:
        K, theta, _, s2 = exponential_closed_forms(cfg["t"], _F0(cfg))
        z = np.array([0.0, cfg["t"], cfg["t"], 1.0 + 30.0])
        _write_curve(cfg["out"], ["z", "theta"], zip(z, [theta.below, theta.below, theta.above, theta.above]))
        print(f"theta,K={K!r},variance={s2!r}", file=out)
        return
    gf, resid, grid = _phi_curve(cfg)
    theta, var = theta_and_variance_deconv(gf, _F0(cfg), g, grid_size=2 * grid)
    _write_curve(cfg["out"], ["z", "theta"], _curve_rows(theta))
    print(variance_record(cfg["functional"], var, grid, resid), file=out)


def cmd_variance(cfg, args, out):
    model = cfg["model"]
    grid = _grid(cfg, 2000)
    if model == "deconv-uniform":
        F0 = _F0(cfg)
        print(variance_record("current_status", current_status_variance(F0), grid, 0.0), file=out)
        return
    if model == "ic-triangle":
        if cfg["t"] is not None:
            raise InputError("--t is not used by the ic-triangle variance; use xi")
        phi = solve_phi_smooth(_ic_model(cfg), _cdf(cfg), _spec(cfg), grid,
                               dump_system=cfg["dump_system"])
        var = asymptotic_variance(phi, _ic_model(cfg), _cdf(cfg))
        print(variance_record(cfg["functional"], var, grid, phi.residual_sup), file=out)
        return
    gf, resid, grid = _phi_curve(cfg)
    _, var = theta_and_variance_deconv(gf, _F0(cfg), _kernel(cfg), grid_size=2 * grid)
    label = cfg["functional"] if cfg["t"] is None else f"local@{cfg['t']!r}"
    print(variance_record(label, var, grid, resid), file=out)
    if model == "deconv-exp" and cfg["t"] is not None:
        _, _, _, s2 = exponential_closed_forms(cfg["t"], _F0(cfg))
        print(variance_record(f"closed_form@{cfg['t']!r}", s2, 0, 0.0), file=out)


def cmd_xi(cfg, args, out):
    _require(cfg, "t")
    t = cfg["t"]
    if cfg["model"] == "ic-triangle":
        model = _ic_model(cfg)
        F0 = _F0(cfg)
        xi = xi_scaling_constant(t, model, F0, _grid(cfg, 2000))
        scale, rate = local_limit_scale(t, model, F0)
        print(f"t={t!r},xi={xi!r},scale={scale!r},rate={rate}", file=out)
        return
    g = _kernel(cfg)
    case = "smooth_decreasing" if g.family == "elbow" else "discontinuity_set"
    c = local_scaling_constant_deconv(t, _F0(cfg), g, case)
    print(f"t={t!r},case={case},standardizing_factor={c!r}", file=out)


def cmd_simulate(cfg, args, out):
    _require(cfg, "seed", "n", "reps")
    if cfg["model"] == "ic-triangle":
        model = IcModel(_F0(cfg), _ic_model(cfg), cfg["f0"])
    else:
        model = DeconvModel(_F0(cfg), _kernel(cfg), cfg["f0"])
    config = McConfig(model, cfg["n"], cfg["reps"], cfg["seed"], _spec(cfg), cfg["estimator"],
                      tol=cfg["tol"], bandwidth=cfg["bandwidth"], grid_size=cfg["grid"] or 200)
    var, se = mc_functional_variance(config, threads=cfg["threads"])
    if cfg["out"]:
        append_ledger(cfg["out"], config, var, se)
    print(f"{config.config_hash},{var!r},{se!r},{config.reps},{config.n},{config.seed}", file=out)


COMMANDS = {"fit-ic": cmd_fit_ic, "fit-cs": cmd_fit_cs, "fit-deconv": cmd_fit_deconv,
            "msle": cmd_msle, "phi": cmd_phi, "theta": cmd_theta, "variance": cmd_variance,
            "xi": cmd_xi, "simulate": cmd_simulate}


def run(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    args = build_parser().parse_args(argv)
    try:
        cfg = effective_config(args)
        _echo(args.verb, cfg, out)
        COMMANDS[args.verb](cfg, args, out)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv=None) -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run(argv))
