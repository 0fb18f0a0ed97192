"""Contrast functions and their minimizers.

Two estimators act on the same per-interval residual structure.  The
simplified residual is

    F~_k = [x_{t_k} - Xbar_{t_k}] - Z(t_k, t_{k-1}) [x_{t_{k-1}} - Xbar_{t_{k-1}}]

with x_{t_0} = x0 known; the full residual subtracts the sqrt(eps)-scaled
drift-correction integral.  The simplified contrast is the plain sum of
squares (no eps, no diffusion knowledge needed); the weighted contrast
whitens each residual with the interval covariance Q_k.

Scalar parameters are minimized by a coarse scan followed by golden
section; vector parameters by multi-start Nelder-Mead with box clipping.
Both are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize as _nm_minimize

from .errors import GridMismatch, NoDescent
from .averaging import AveragedModel
from .flow import FlowCache, FlowEngine, FlowSettings, solve_spd
from .model import ParameterSpace
from .simulate import ObservationSet

_GOLDEN_RATIO = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class OptimizerSettings:
    tolerance: float = 1e-6
    max_evaluations: int = 2000
    scan_points: int = 33
    multistart_cap: int = 27
    boundary_rel_tol: float = 1e-6


@dataclass
class ContrastEvaluation:
    theta: np.ndarray
    value: float
    residuals: np.ndarray        # (n, m)
    terms: np.ndarray            # (n,)
    weights_used: bool


@dataclass
class EstimationResult:
    theta_hat: np.ndarray
    contrast_at_min: float
    estimator_kind: str          # "mce" | "smce"
    converged: bool
    boundary_hit: bool
    n_evaluations: int
    optimizer_trace: list = field(default_factory=list)
    theoretical_sd: Optional[np.ndarray] = None


def _check_alignment(obs: ObservationSet, flow: FlowCache):
    if obs.n != flow.n or abs(obs.T - flow.T) > 1e-12 * max(1.0, flow.T):
        raise GridMismatch(
            "observation grid (n=%d, T=%g) does not match flow grid "
            "(n=%d, T=%g)" % (obs.n, obs.T, flow.n, flow.T))
    if obs.x0.shape != flow.x0.shape or not np.allclose(obs.x0, flow.x0):
        raise GridMismatch("observation x0 differs from flow x0")


def residuals_simplified(obs: ObservationSet, flow: FlowCache) -> np.ndarray:
    """F~_k for k = 1..n, shape (n, m)."""
    _check_alignment(obs, flow)
    flow.ensure_prop()
    x = np.vstack([obs.x0[None, :], obs.samples])        # (n+1, m)
    dev = x - flow.xbar_obs                              # deviations from Xbar
    carried = np.einsum("nab,nb->na", flow.step_propagators, dev[:-1])
    return dev[1:] - carried


def residuals_full(obs: ObservationSet, flow: FlowCache, eps: float) -> np.ndarray:
    """F_k = F~_k - sqrt(eps) * int Z Jbar ds, shape (n, m)."""
    ft = residuals_simplified(obs, flow)
    if eps == 0.0:
        return ft
    return ft - flow.drift_corrections(eps)


def contrast_smce(obs: ObservationSet, theta, avg: AveragedModel = None,
                  flow: FlowCache = None,
                  settings: FlowSettings | None = None) -> ContrastEvaluation:
    """Simplified contrast: sum of |F~_k|^2.  Never reads eps or q."""
    if flow is None:
        flow = FlowCache(avg, theta, obs.x0, obs.T, obs.n, settings)
    ft = residuals_simplified(obs, flow)
    terms = np.sum(ft * ft, axis=-1)
    return ContrastEvaluation(theta=np.atleast_1d(np.asarray(theta, float)),
                              value=float(np.sum(terms)), residuals=ft,
                              terms=terms, weights_used=False)


def contrast_mce(obs: ObservationSet, eps: float, theta,
                 avg: AveragedModel = None, flow: FlowCache = None,
                 settings: FlowSettings | None = None) -> ContrastEvaluation:
    """Weighted contrast: sum of F_k^T Q_k^{-1} F_k."""
    if flow is None:
        flow = FlowCache(avg, theta, obs.x0, obs.T, obs.n, settings)
    fe = residuals_full(obs, flow, eps)
    flow.ensure_weights()
    sol = solve_spd(flow.weights, fe[..., None])[..., 0]
    terms = np.sum(fe * sol, axis=-1)
    return ContrastEvaluation(theta=np.atleast_1d(np.asarray(theta, float)),
                              value=float(np.sum(terms)), residuals=fe,
                              terms=terms, weights_used=True)


# ---------------------------------------------------------------------------
# minimization
# ---------------------------------------------------------------------------

def _golden_section(fn, lo, hi, tol, trace, budget):
    a, b = lo, hi
    c = b - _GOLDEN_RATIO * (b - a)
    d = a + _GOLDEN_RATIO * (b - a)
    fc, fd = fn(c), fn(d)
    while b - a > tol and len(trace) < budget:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN_RATIO * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN_RATIO * (b - a)
            fd = fn(d)
    return 0.5 * (a + b)


def minimize_contrast(contrast: Callable, space: ParameterSpace,
                      opt: OptimizerSettings | None = None,
                      kind: str = "contrast") -> EstimationResult:
    """Minimize a contrast callable theta -> value over the box.

    Scalar boxes: a coarse equispaced scan brackets the minimum, golden
    section refines it.  Vector boxes: Nelder-Mead restarted from a 3^k
    lattice (capped), iterates clipped to the box, ties broken by
    distance to the box center.  Raises NoDescent for flat or degenerate
    contrasts rather than returning an arbitrary interior point.
    """
    opt = opt or OptimizerSettings()
    trace: list = []

    def fn(theta):
        th = np.atleast_1d(np.asarray(theta, dtype=float))
        val = float(contrast(th))
        trace.append((th.copy(), val))
        return val

    if space.dim == 1:
        lo, hi = float(space.lower[0]), float(space.upper[0])
        xs = np.linspace(lo, hi, opt.scan_points)
        vals = np.array([fn(x) for x in xs])
        spread = float(np.max(vals) - np.min(vals))
        if not np.isfinite(spread) or spread <= 1e-12 * (1.0 + abs(float(np.max(vals)))):
            raise NoDescent("contrast is flat across the scan grid")
        i = int(np.argmin(vals))
        a = xs[max(0, i - 1)]
        b = xs[min(len(xs) - 1, i + 1)]
        xstar = _golden_section(fn, a, b, opt.tolerance, trace,
                                opt.max_evaluations)
        theta_hat = np.array([xstar])
    else:
        fracs = np.array([0.25, 0.5, 0.75])
        axes = [space.lower[j] + fracs * space.width[j]
                for j in range(space.dim)]
        grids = np.meshgrid(*axes, indexing="ij")
        starts = np.stack([g.reshape(-1) for g in grids], axis=-1)
        starts = starts[:opt.multistart_cap]

        def clipped(theta):
            return fn(space.clip(theta))

        best = None
        improved = False
        per_start = max(50, opt.max_evaluations // max(len(starts), 1))
        for s0 in starts:
            v0 = fn(s0)
            res = _nm_minimize(clipped, s0, method="Nelder-Mead",
                               options={"xatol": opt.tolerance,
                                        "fatol": 1e-14,
                                        "maxfev": per_start,
                                        "disp": False})
            th = space.clip(res.x)
            v = fn(th)
            if v < v0 - 1e-14 * (1.0 + abs(v0)):
                improved = True
            cand = (v, float(np.linalg.norm(th - space.center)), th)
            if best is None or cand[:2] < best[:2]:
                best = cand
        if not improved:
            raise NoDescent("no Nelder-Mead start improved on its initial value")
        theta_hat = best[2]

    values = [v for _, v in trace]
    vmin = float(np.min(values))
    boundary = bool(np.any(
        np.minimum(theta_hat - space.lower, space.upper - theta_hat)
        <= opt.boundary_rel_tol * space.width))
    return EstimationResult(theta_hat=theta_hat, contrast_at_min=vmin,
                            estimator_kind=kind, converged=True,
                            boundary_hit=boundary,
                            n_evaluations=len(trace), optimizer_trace=trace)


def estimate(obs: ObservationSet, avg: AveragedModel, space: ParameterSpace,
             kind: str = "smce", eps: float = 0.0,
             opt: OptimizerSettings | None = None,
             flow_settings: FlowSettings | None = None,
             engine: FlowEngine | None = None) -> EstimationResult:
    """Fit theta to one observation set with the chosen estimator.

    ``engine`` may be shared across calls (replicates) to reuse flow
    caches; it must match (avg, x0, T, n).
    """
    if engine is None:
        engine = FlowEngine(avg, obs.x0, obs.T, obs.n, flow_settings)
    kind = kind.lower()
    if kind == "smce":
        def contrast(theta):
            return contrast_smce(obs, theta, flow=engine.cache(theta)).value
    elif kind == "mce":
        def contrast(theta):
            return contrast_mce(obs, eps, theta, flow=engine.cache(theta)).value
    else:
        raise ValueError("estimator kind must be 'mce' or 'smce'")
    return minimize_contrast(contrast, space, opt, kind=kind)
