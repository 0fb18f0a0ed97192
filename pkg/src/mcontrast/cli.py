"""Command-line interface.

Subcommands
-----------
simulate    one path (optional fine-grid dump), observations to JSON
estimate    fit an observation file with one or both estimators
variance    finite-n and limiting covariances plus theoretical SDs
experiment  run a config file or a named desk-scaled preset
validate    structural model checks

Exit codes: 0 success; 1 configuration or validation error; 2 numerical
failure; 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from . import __version__
from .errors import (
    CenteringViolation,
    ConfigError,
    EvaluationFailure,
    McontrastError,
)
from .averaging import build_averaged_model
from .estimators import estimate
from .experiment import (
    ExperimentConfig,
    PRESETS,
    emit_report,
    preset_config,
    resolve_delta,
    run_experiment,
)
from .model import ScalePair
from .registry import available_models, get_bundle
from .simulate import ObservationSet, simulate_path, subsample
from .variance import (
    limit_variance,
    mce_variance,
    psd_gap,
    smce_variance,
    theoretical_sd,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


def _print_json(obj, path=None):
    text = json.dumps(obj, indent=2, default=lambda o: np.asarray(o).tolist())
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _add_model_arg(p, preset_alias=False):
    p.add_argument("--model", help="registry model name (%s)"
                   % ", ".join(available_models()))
    if preset_alias:
        p.add_argument("--preset", help="alias for --model")


def _resolve_model_name(args) -> str:
    name = getattr(args, "model", None) or getattr(args, "preset", None)
    if not name:
        raise ConfigError("a --model (or --preset) name is required")
    return name


def cmd_simulate(args) -> int:
    bundle = get_bundle(_resolve_model_name(args))
    model = bundle.build(math.inf)
    T = model.horizon
    delta = (args.delta if args.delta
             else resolve_delta(args.delta_rule, args.eps, T, args.steps))
    scales = ScalePair(args.eps, delta)
    traj = simulate_path(model, [args.theta], scales, args.seed, args.steps)
    obs = subsample(traj, args.n_obs)
    if args.dump:
        with open(args.dump, "w", encoding="utf-8") as fh:
            fh.write("time," + ",".join("x%d" % j for j in range(model.slow_dim))
                     + ",y\n")
            for i in range(traj.times.size):
                fh.write("%.10g,%s,%.10g\n"
                         % (traj.times[i],
                            ",".join("%.10g" % v for v in traj.slow[i]),
                            traj.fast[i]))
    _print_json({
        "model": bundle.name, "theta": args.theta, "eps": args.eps,
        "delta": delta, "seed": args.seed, "steps": args.steps,
        "x0": obs.x0.tolist(), "T": obs.T,
        "samples": obs.samples.tolist(),
    }, args.out)
    return EXIT_OK


def cmd_estimate(args) -> int:
    bundle = get_bundle(_resolve_model_name(args))
    with open(args.obs, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    obs = ObservationSet(x0=np.asarray(payload["x0"], float),
                         samples=np.asarray(payload["samples"], float),
                         T=float(payload["T"]))
    ell = args.ell if args.ell is not None else math.inf
    model = bundle.build(ell)
    avg = build_averaged_model(model, bundle.space)
    kinds = ("mce", "smce") if args.estimator == "both" else (args.estimator,)
    out = {}
    for kind in kinds:
        res = estimate(obs, avg, bundle.space, kind=kind, eps=args.eps)
        entry = {
            "theta_hat": res.theta_hat.tolist(),
            "contrast_at_min": res.contrast_at_min,
            "converged": res.converged,
            "boundary_hit": res.boundary_hit,
            "n_evaluations": res.n_evaluations,
        }
        if args.eps > 0:
            lv = limit_variance(avg, res.theta_hat, model.x0, model.horizon,
                                kind=kind)
            entry["theoretical_sd"] = theoretical_sd(lv, args.eps).tolist()
        out[kind] = entry
    _print_json(out, args.out)
    return EXIT_OK


def cmd_variance(args) -> int:
    bundle = get_bundle(_resolve_model_name(args))
    model = bundle.build(math.inf)
    avg = build_averaged_model(model, bundle.space)
    theta = np.array([args.theta])
    T = args.T if args.T else model.horizon
    out = {"model": bundle.name, "theta": args.theta, "eps": args.eps,
           "n": args.n, "T": T}
    m_lim = limit_variance(avg, theta, model.x0, T, kind="mce")
    s_lim = limit_variance(avg, theta, model.x0, T, kind="smce")
    out["mce_limit"] = m_lim.matrix.tolist()
    out["smce_limit"] = s_lim.matrix.tolist()
    out["theoretical_sd_mce"] = theoretical_sd(m_lim, args.eps).tolist()
    out["theoretical_sd_smce"] = theoretical_sd(s_lim, args.eps).tolist()
    if args.n:
        m_n = mce_variance(avg, theta, model.x0, args.n, T)
        s_n = smce_variance(avg, theta, model.x0, args.n, T)
        gap, mineig = psd_gap(s_n, m_n)
        out["mce_finite_n"] = m_n.matrix.tolist()
        out["smce_finite_n"] = s_n.matrix.tolist()
        out["smce_minus_mce_min_eigenvalue"] = mineig
    _print_json(out, args.out)
    print("theoretical SD (mce, eps=%g): %s"
          % (args.eps, np.round(out["theoretical_sd_mce"], 4).tolist()),
          file=sys.stderr)
    return EXIT_OK


def cmd_experiment(args) -> int:
    import os
    if bool(args.config) == bool(args.preset):
        raise ConfigError("provide exactly one of --config or --preset")
    if args.preset:
        cfg = preset_config(args.preset)
    else:
        cfg = ExperimentConfig.from_json(args.config)
    if args.out:
        cfg.output_dir = args.out
    elif cfg.output_dir is None:
        cfg.output_dir = os.environ.get("MCONTRAST_OUTPUT_DIR")
    if args.replicates:
        cfg.replicates = args.replicates
    report = run_experiment(cfg)
    for w in report.derived["warnings"]:
        print("warning: %s" % w, file=sys.stderr)
    for kind, s in report.summaries.items():
        print("%s: mean=%s empirical_sd=%s theoretical_sd=%s "
              "successes=%d failures=%d"
              % (kind, np.round(s.mean, 4).tolist(),
                 np.round(s.empirical_sd, 4).tolist(),
                 np.round(s.theoretical_sd, 4).tolist(),
                 s.successes, s.failures))
    if cfg.output_dir:
        written = emit_report(report, cfg.output_dir)
        for key, path in written.items():
            print("wrote %s: %s" % (key, path), file=sys.stderr)
    return EXIT_OK


def cmd_validate(args) -> int:
    from .model import validate_model
    bundle = get_bundle(_resolve_model_name(args))
    model = bundle.build(math.inf)
    report = validate_model(model, [args.theta])
    for item in report.items:
        print("%-38s %-5s residual=%.3g  %s"
              % (item.name, item.status, item.residual, item.detail))
    print("overall: %s" % ("ok" if report.ok else "FAILED"))
    return EXIT_OK if report.ok else EXIT_CONFIG


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mcontrast",
        description="Minimum contrast estimation for small-noise slow-fast "
                    "diffusions observed discretely.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="simulate one path")
    _add_model_arg(ps, preset_alias=True)
    ps.add_argument("--theta", type=float, required=True)
    ps.add_argument("--eps", type=float, required=True)
    ps.add_argument("--delta", type=float, default=None)
    ps.add_argument("--delta-rule", default="auto")
    ps.add_argument("--steps", type=int, default=10 ** 6)
    ps.add_argument("--n-obs", type=int, default=10)
    ps.add_argument("--seed", type=int, default=1)
    ps.add_argument("--dump", help="CSV dump of the fine path (large)")
    ps.add_argument("--out", help="observation JSON output path")
    ps.set_defaults(fn=cmd_simulate)

    pe = sub.add_parser("estimate", help="estimate from an observation file")
    _add_model_arg(pe, preset_alias=True)
    pe.add_argument("--obs", required=True, help="observation JSON file")
    pe.add_argument("--estimator", choices=("mce", "smce", "both"),
                    default="both")
    pe.add_argument("--eps", type=float, default=0.0)
    pe.add_argument("--ell", type=float, default=None,
                    help="second-order rate constant (default: inf)")
    pe.add_argument("--out")
    pe.set_defaults(fn=cmd_estimate)

    pv = sub.add_parser("variance", help="asymptotic covariances and SDs")
    _add_model_arg(pv, preset_alias=True)
    pv.add_argument("--theta", type=float, required=True)
    pv.add_argument("--eps", type=float, required=True)
    pv.add_argument("--n", type=int, default=None)
    pv.add_argument("--T", type=float, default=None)
    pv.add_argument("--out")
    pv.set_defaults(fn=cmd_variance)

    px = sub.add_parser("experiment", help="run a Monte Carlo study")
    px.add_argument("--config", help="JSON config file")
    px.add_argument("--preset", choices=sorted(PRESETS),
                    help="desk-scaled preset")
    px.add_argument("--out", help="output directory")
    px.add_argument("--replicates", type=int, default=None,
                    help="override the replicate count")
    px.set_defaults(fn=cmd_experiment)

    pl = sub.add_parser("validate", help="structural model checks")
    _add_model_arg(pl, preset_alias=True)
    pl.add_argument("--theta", type=float, required=True)
    pl.set_defaults(fn=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CenteringViolation, EvaluationFailure, KeyError,
            ValueError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except McontrastError as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print("i/o error: %s" % exc, file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
