"""Configuration-driven Monte Carlo experiment runner.

A run simulates R replicate paths (replicate i seeded by
replicate_seed(master_seed, i)), subsamples each to n observations,
estimates theta with the requested estimators, and aggregates means,
empirical SDs, normal-based confidence intervals (z = 1 and z = 1.96),
the theoretical SD sqrt(eps * limit variance), and histogram data with a
normal overlay centered at theta0.  Output is deterministic for a fixed
configuration; replicates that fail numerically are excluded and counted,
and the run aborts if more than 5% fail.

The time-scale separation is specified as a rule in eps rather than a
free number.  Besides fixed powers ("eps**1.5"), the rule "auto" picks
delta = max(eps^{3/2}, sqrt(20 * eps * T / N)): the eps^{3/2} power law
floored at the coarsest separation the Euler step count still resolves
(eps * dt / delta^2 <= 0.05).  At desk-scale step counts the unfloored
power law can leave the fast chain unresolved and biases every estimate;
see the acceptance suite for the calibration.
"""

from __future__ import annotations

import dataclasses
import json
import math
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, McontrastError, TooManyFailures
from .averaging import build_averaged_model
from .estimators import OptimizerSettings, estimate
from .flow import FlowEngine, FlowSettings
from .model import ParameterSpace, ScalePair
from .registry import get_bundle
from .simulate import (
    ObservationSet,
    replicate_seed,
    simulate_observations,
    step_size_warnings,
)
from .variance import limit_variance, theoretical_sd

_Z_LEVELS = ((68, 1.0), (95, 1.96))


def resolve_delta(rule, eps: float, T: float, n_steps: int) -> float:
    """Evaluate the delta rule: a float literal, "eps**p", or "auto"."""
    if isinstance(rule, (int, float)):
        if rule <= 0:
            raise ConfigError("delta must be positive")
        return float(rule)
    text = str(rule).strip().lower()
    if text == "auto":
        return max(eps ** 1.5, math.sqrt(20.0 * eps * T / n_steps))
    m = re.fullmatch(r"eps\s*\*\*\s*([0-9.]+)", text)
    if m:
        return eps ** float(m.group(1))
    try:
        return float(text)
    except ValueError:
        raise ConfigError("cannot parse delta rule %r" % (rule,))


@dataclass
class ExperimentConfig:
    model: str
    theta0: Sequence[float]
    eps: float
    n_obs: int
    euler_steps: int
    replicates: int
    estimators: Sequence[str] = ("smce",)
    delta_rule: object = "auto"
    ell: object = "auto"            # "auto" derives eps^{3/2}/delta; float fixes it
    theta_box: Optional[Sequence[Sequence[float]]] = None
    master_seed: int = 20260809
    histogram_bins: int = 30
    flow_refine: int = 64
    output_dir: Optional[str] = None

    def validated(self) -> "ExperimentConfig":
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if self.n_obs < 1 or self.euler_steps % self.n_obs != 0:
            raise ConfigError("euler_steps must be a positive multiple of n_obs")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        kinds = tuple(k.lower() for k in self.estimators)
        if not kinds or any(k not in ("mce", "smce") for k in kinds):
            raise ConfigError("estimators must be a subset of {mce, smce}")
        self.estimators = kinds
        return self

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(ExperimentConfig)}
        extra = set(d) - known
        if extra:
            raise ConfigError("unknown config keys: %s" % ", ".join(sorted(extra)))
        try:
            return ExperimentConfig(**d).validated()
        except TypeError as exc:
            raise ConfigError(str(exc))

    @staticmethod
    def from_json(path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return ExperimentConfig.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["theta0"] = list(np.atleast_1d(np.asarray(self.theta0, float)))
        d["estimators"] = list(self.estimators)
        return d


@dataclass
class EstimatorSummary:
    kind: str
    mean: np.ndarray
    empirical_sd: np.ndarray
    ci68: list
    ci95: list
    theoretical_sd: np.ndarray
    successes: int
    failures: int
    values: np.ndarray              # (successes, k)
    histograms: list                # per component: dict of arrays


@dataclass
class ExperimentReport:
    config: dict
    derived: dict                   # delta, ell, warnings, timing
    summaries: dict                 # kind -> EstimatorSummary
    replicate_rows: list            # flat per-replicate records

    def to_dict(self) -> dict:
        out = {
            "config": self.config,
            "derived": self.derived,
            "estimators": {},
        }
        for kind, s in self.summaries.items():
            out["estimators"][kind] = {
                "mean": s.mean.tolist(),
                "empirical_sd": s.empirical_sd.tolist(),
                "ci68": s.ci68,
                "ci95": s.ci95,
                "theoretical_sd": s.theoretical_sd.tolist(),
                "successes": s.successes,
                "failures": s.failures,
                "histograms": s.histograms,
            }
        return out


def _histograms(values, theta0, theo_sd, bins):
    """Per-component histogram with a normal overlay centered at theta0."""
    out = []
    k = values.shape[1]
    for j in range(k):
        sd = max(float(theo_sd[j]), 1e-300)
        center = float(np.mean(values[:, j]))
        lo, hi = center - 4.0 * sd, center + 4.0 * sd
        counts, edges = np.histogram(values[:, j], bins=bins, range=(lo, hi))
        width = edges[1] - edges[0]
        total = values.shape[0]
        density = counts / (total * width) if total else counts * 0.0
        mid = 0.5 * (edges[:-1] + edges[1:])
        overlay = (np.exp(-0.5 * ((mid - theta0[j]) / sd) ** 2)
                   / (sd * math.sqrt(2 * math.pi)))
        out.append({
            "component": j,
            "bin_left": edges[:-1].tolist(),
            "bin_right": edges[1:].tolist(),
            "count": counts.tolist(),
            "density": density.tolist(),
            "overlay_density": overlay.tolist(),
            "overlay_center": float(theta0[j]),
            "overlay_scale": sd,
        })
    return out


def _build_problem(cfg: ExperimentConfig):
    bundle = get_bundle(cfg.model)
    eps = float(cfg.eps)
    T = bundle.build(math.inf).horizon
    delta = resolve_delta(cfg.delta_rule, eps, T, cfg.euler_steps)
    scales = ScalePair(eps, delta)
    if cfg.ell == "auto":
        ell = eps ** 1.5 / delta
    else:
        ell = float(cfg.ell)
    model = bundle.build(ell)
    if cfg.theta_box is not None:
        lo, hi = cfg.theta_box
        space = ParameterSpace(np.asarray(lo, float), np.asarray(hi, float))
    else:
        space = bundle.space
    theta0 = np.atleast_1d(np.asarray(cfg.theta0, float))
    if not space.contains(theta0):
        raise ConfigError("theta0 lies outside the parameter box")
    warnings = []
    warnings += scales.consistency_warnings(model.regime)
    warnings += step_size_warnings(model, scales, cfg.euler_steps)
    if eps * cfg.n_obs > T:
        warnings.append(
            "high-frequency advisory: eps*n = %.3g exceeds T = %g (the "
            "eps = o(Delta) sampling condition is violated at this "
            "configuration)" % (eps * cfg.n_obs, T))
    return model, space, scales, theta0, warnings


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Simulate, estimate, and aggregate one configured Monte Carlo study."""
    cfg = cfg.validated()
    t_start = time.time()
    model, space, scales, theta0, warnings = _build_problem(cfg)
    R = cfg.replicates
    seeds = [replicate_seed(cfg.master_seed, i) for i in range(R)]

    avg = build_averaged_model(model, space)
    flow_settings = FlowSettings(refine=cfg.flow_refine)
    engine = FlowEngine(avg, model.x0, model.horizon, cfg.n_obs, flow_settings)

    # simulate (batched; on a blow-up fall back to per-replicate isolation)
    sim_failures = {}
    try:
        batch = simulate_observations(model, theta0, scales, seeds,
                                      cfg.euler_steps, cfg.n_obs)
    except McontrastError:
        rows = []
        for i, s in enumerate(seeds):
            try:
                rows.append(simulate_observations(model, theta0, scales, [s],
                                                  cfg.euler_steps, cfg.n_obs)[0])
            except McontrastError as exc:
                sim_failures[i] = str(exc)
                rows.append(None)
        batch = rows
    else:
        batch = list(batch)

    theo = {}
    for kind in cfg.estimators:
        lv = limit_variance(avg, theta0, model.x0, model.horizon, kind=kind,
                            settings=flow_settings)
        theo[kind] = theoretical_sd(lv, scales.epsilon)

    rows = []
    collected = {kind: [] for kind in cfg.estimators}
    failures = {kind: len(sim_failures) for kind in cfg.estimators}
    opt = OptimizerSettings()
    for i, seed in enumerate(seeds):
        if batch[i] is None:
            for kind in cfg.estimators:
                rows.append({"replicate": i, "seed": seed, "estimator": kind,
                             "failed": True, "error": sim_failures[i]})
            continue
        obs = ObservationSet(x0=model.x0, samples=batch[i], T=model.horizon)
        for kind in cfg.estimators:
            try:
                res = estimate(obs, avg, space, kind=kind, eps=scales.epsilon,
                               opt=opt, engine=engine)
            except McontrastError as exc:
                failures[kind] += 1
                rows.append({"replicate": i, "seed": seed, "estimator": kind,
                             "failed": True, "error": str(exc)})
                continue
            collected[kind].append(res.theta_hat)
            rows.append({"replicate": i, "seed": seed, "estimator": kind,
                         "failed": False,
                         "theta_hat": res.theta_hat.tolist(),
                         "contrast": res.contrast_at_min,
                         "converged": res.converged,
                         "boundary_hit": res.boundary_hit})

    summaries = {}
    for kind in cfg.estimators:
        vals = np.array(collected[kind]) if collected[kind] else \
            np.empty((0, space.dim))
        nfail = failures[kind]
        if nfail > 0.05 * R:
            raise TooManyFailures(
                "%s: %d of %d replicates failed (threshold 5%%)"
                % (kind, nfail, R))
        mean = vals.mean(axis=0) if len(vals) else np.full(space.dim, np.nan)
        sd = (vals.std(axis=0, ddof=1) if len(vals) > 1
              else np.zeros(space.dim))
        cis = {}
        for level, z in _Z_LEVELS:
            cis[level] = [[float(mean[j] - z * sd[j]), float(mean[j] + z * sd[j])]
                          for j in range(space.dim)]
        summaries[kind] = EstimatorSummary(
            kind=kind, mean=mean, empirical_sd=sd,
            ci68=cis[68], ci95=cis[95],
            theoretical_sd=theo[kind], successes=len(vals), failures=nfail,
            values=vals,
            histograms=_histograms(vals, theta0, theo[kind],
                                   cfg.histogram_bins) if len(vals) else [])

    derived = {
        "delta": scales.delta,
        "eps_over_delta": scales.epsilon / scales.delta,
        "ell": model.regime.effective_ell(scales),
        "warnings": warnings,
        "seed_derivation": "splitmix64(master + (i+1)*golden64)",
    }
    report = ExperimentReport(config=cfg.to_dict(), derived=derived,
                              summaries=summaries, replicate_rows=rows)
    report.runtime_seconds = round(time.time() - t_start, 3)
    return report


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)


def _format_floats(obj):
    """17-significant-digit float serialization (exact round trip)."""
    if isinstance(obj, float):
        return float("%.17g" % obj)
    if isinstance(obj, dict):
        return {k: _format_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_format_floats(v) for v in obj]
    return obj


def emit_report(report: ExperimentReport, out_dir,
                formats=("json", "csv", "hist"),
                timestamp: Optional[str] = None) -> dict:
    """Write the report files; returns {format: path}.

    report.json: the full report (plus a generated_at stamp).
    replicates.csv: one row per (replicate, estimator).
    hist_<kind>_<component>.csv: bin edges, counts, densities, overlay.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    if "json" in formats:
        payload = _format_floats(report.to_dict())
        payload["generated_at"] = timestamp if timestamp is not None else \
            time.strftime("%Y-%m-%dT%H:%M:%S")
        payload["runtime_seconds"] = getattr(report, "runtime_seconds", None)
        path = out / "report.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, default=_json_default)
            fh.write("\n")
        written["json"] = str(path)
    if "csv" in formats:
        path = out / "replicates.csv"
        k = len(report.config["theta0"])
        cols = (["replicate", "seed", "estimator"]
                + ["theta_hat_%d" % j for j in range(k)]
                + ["contrast", "converged", "boundary_hit", "failed", "error"])
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for row in report.replicate_rows:
                cells = [str(row["replicate"]), str(row["seed"]),
                         row["estimator"]]
                if row.get("failed"):
                    cells += [""] * k + ["", "", "", "1",
                                         '"%s"' % row["error"].replace('"', "'")]
                else:
                    cells += ["%.10g" % v for v in row["theta_hat"]]
                    cells += ["%.10g" % row["contrast"],
                              str(int(row["converged"])),
                              str(int(row["boundary_hit"])), "0", ""]
                fh.write(",".join(cells) + "\n")
        written["csv"] = str(path)
    if "hist" in formats:
        for kind, s in report.summaries.items():
            for hist in s.histograms:
                j = hist["component"]
                path = out / ("hist_%s_%d.csv" % (kind, j))
                with open(path, "w", encoding="utf-8") as fh:
                    fh.write("bin_left,bin_right,count,density,overlay_density\n")
                    for row in zip(hist["bin_left"], hist["bin_right"],
                                   hist["count"], hist["density"],
                                   hist["overlay_density"]):
                        fh.write("%.10g,%.10g,%d,%.10g,%.10g\n" % row)
                written["hist_%s_%d" % (kind, j)] = str(path)
    return written


# ---------------------------------------------------------------------------
# desk-scaled presets of the published study
# ---------------------------------------------------------------------------

PRESETS = {
    # fixed-n studies (one representative row per table: eps = 1e-3, n = 10)
    "table1": ExperimentConfig(model="example1-periodic", theta0=[1.0],
                               eps=1e-3, n_obs=10, euler_steps=10 ** 6,
                               replicates=200, estimators=("mce",)),
    "table2": ExperimentConfig(model="example1-periodic", theta0=[1.0],
                               eps=1e-3, n_obs=10, euler_steps=10 ** 6,
                               replicates=200, estimators=("smce",)),
    "table3": ExperimentConfig(model="example2-ou", theta0=[1.0],
                               eps=1e-3, n_obs=10, euler_steps=10 ** 6,
                               replicates=200, estimators=("smce",)),
    "table4": ExperimentConfig(model="example2-ou", theta0=[1.0],
                               eps=1e-3, n_obs=10, euler_steps=10 ** 6,
                               replicates=200, estimators=("mce",)),
    # high-frequency studies (n desk-scaled to 1e4; eps*n > T on purpose)
    "table5": ExperimentConfig(model="example1-periodic", theta0=[1.0],
                               eps=1e-2, n_obs=10 ** 4, euler_steps=10 ** 6,
                               replicates=100, estimators=("mce", "smce")),
    "table6": ExperimentConfig(model="example2-ou", theta0=[1.0],
                               eps=1e-2, n_obs=10 ** 4, euler_steps=10 ** 6,
                               replicates=100, estimators=("smce",)),
    # the weighted estimator on example 2 at high frequency is known to
    # develop a positive bias; kept as a separate completion-only preset
    "table6-mce": ExperimentConfig(model="example2-ou", theta0=[1.0],
                                   eps=1e-2, n_obs=10 ** 4,
                                   euler_steps=10 ** 6,
                                   replicates=100, estimators=("mce",)),
}


def preset_config(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError("unknown preset %r (available: %s)"
                          % (name, ", ".join(sorted(PRESETS))))
    return dataclasses.replace(PRESETS[name])
