"""Slow-fast SDE model definition, scaling regimes, and structural checks.

The model is the coupled system

    dX = (eps/delta) b(th,X,Y) dt + c(th,X,Y) dt + sqrt(eps) sigma(X,Y) dW
    dY = (eps/delta^2) f(th,X,Y) dt + (1/delta) g(th,X,Y) dt
         + (sqrt(eps)/delta) tau1(X,Y) dW + (sqrt(eps)/delta) tau2(X,Y) dB

with a slow state in R^m and a scalar fast state (the numerics toolkit is
restricted to one fast dimension).  Coefficients are plain callables that
must broadcast over numpy arrays; for m == 1 the slow argument is passed as
a bare array, for m > 1 it carries a trailing length-m axis.

Structural hypotheses of the theory that can be probed numerically
(centering of b under the frozen invariant measure, recurrence of the fast
drift at the truncation boundary, periodicity, diffusion nondegeneracy) are
checked by ``validate_model``; they are spot checks on grids, not proofs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .errors import CenteringViolation, EvaluationFailure
from .quadrature import QuadratureSettings


class RegimeKind(Enum):
    HOMOGENIZATION = "homogenization"   # eps/delta -> infinity
    AVERAGING = "averaging"             # eps/delta -> gamma in (0, inf)


@dataclass(frozen=True)
class Regime:
    """Scaling regime and the second-order rate constant ell.

    ``ell`` is the limit of eps^{3/2}/delta (homogenization) or of
    sqrt(eps)/(eps/delta - gamma) (averaging).  ``None`` means "derive it
    from the scale pair in use"; ``math.inf`` switches the second-order
    drift correction off exactly.
    """

    kind: RegimeKind
    gamma: Optional[float] = None
    ell: Optional[float] = math.inf

    def __post_init__(self):
        if self.kind is RegimeKind.AVERAGING:
            if self.gamma is None or not (self.gamma > 0):
                raise ValueError("averaging regime requires finite gamma > 0")
        elif self.gamma is not None:
            raise ValueError("gamma is only meaningful in the averaging regime")
        if self.ell is not None and not (self.ell > 0):
            raise ValueError("ell must lie in (0, inf]")

    def effective_ell(self, scales: Optional["ScalePair"]) -> float:
        """Resolve ell, deriving it from concrete (eps, delta) if unset."""
        if self.ell is not None:
            return self.ell
        if scales is None:
            return math.inf
        if self.kind is RegimeKind.HOMOGENIZATION:
            return scales.epsilon ** 1.5 / scales.delta
        denom = scales.epsilon / scales.delta - self.gamma
        if abs(denom) < 1e-14:
            return math.inf
        return math.sqrt(scales.epsilon) / denom


@dataclass(frozen=True)
class ScalePair:
    """Concrete noise size eps and time-scale separation delta."""

    epsilon: float
    delta: float

    def __post_init__(self):
        if not (self.epsilon > 0 and self.delta > 0):
            raise ValueError("epsilon and delta must be positive")

    def consistency_warnings(self, regime: Regime) -> list[str]:
        """Advisories only: the theory is asymptotic, so a finite scale
        pair can never contradict a regime, merely sit far from it."""
        out = []
        ratio = self.epsilon / self.delta
        if regime.kind is RegimeKind.HOMOGENIZATION:
            if ratio < 10.0:
                out.append(
                    "eps/delta = %.3g < 10: weak scale separation for the "
                    "homogenization regime" % ratio
                )
        else:
            rel = abs(ratio - regime.gamma) / regime.gamma
            if rel > 0.5:
                out.append(
                    "eps/delta = %.3g deviates from gamma = %.3g by %.0f%%"
                    % (ratio, regime.gamma, 100 * rel)
                )
        return out


@dataclass(frozen=True)
class ParameterSpace:
    """Compact box the contrast is minimized over."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower/upper must be 1-D arrays of equal length")
        if not np.all(lo < hi):
            raise ValueError("need lower < upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, theta, tol: float = 0.0) -> bool:
        th = np.atleast_1d(np.asarray(theta, dtype=float))
        pad = tol * self.width
        return bool(np.all(th >= self.lower - pad) and np.all(th <= self.upper + pad))

    def clip(self, theta) -> np.ndarray:
        return np.clip(np.atleast_1d(np.asarray(theta, dtype=float)),
                       self.lower, self.upper)


class FastDomain:
    """Domain of the scalar fast variable."""


@dataclass(frozen=True)
class Periodic(FastDomain):
    period: float = 2.0 * math.pi


@dataclass(frozen=True)
class Line(FastDomain):
    """Unbounded fast variable, truncated at ``radius`` standardized units
    for quadrature (the radius can be overridden in QuadratureSettings)."""
    radius: float = 8.0


@dataclass(frozen=True)
class MultiscaleModel:
    """Coefficient set of the slow-fast system plus structural metadata.

    ``slaved_fast`` marks models where the fast variable is the exact
    constraint Y = X/delta (then m must be 1, the B-noise is unused, and
    simulation advances X only).  ``nu_tau2`` is the declared lower bound
    on tau2^2; a zero declaration is allowed for slaved models whose
    generator ellipticity comes through tau1, and is reported as a warning
    by validation.
    """

    slow_dim: int
    b: Callable
    c: Callable
    sigma: Callable
    f: Callable
    g: Callable
    tau1: Callable
    tau2: Callable
    fast_domain: FastDomain
    x0: np.ndarray
    y0: float
    horizon: float
    regime: Regime
    noise_dim: int = 1
    slaved_fast: bool = False
    nu_tau2: float = 0.0
    name: str = "custom"

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.size != self.slow_dim:
            raise ValueError("x0 must have length slow_dim")
        object.__setattr__(self, "x0", x0)
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.slaved_fast and self.slow_dim != 1:
            raise ValueError("slaved fast variable requires slow_dim == 1")

    # Coefficient call convention: squeeze the slow argument for m == 1 so
    # scalar models read naturally.
    def _x_arg(self, x):
        x = np.asarray(x, dtype=float)
        return x[..., 0] if self.slow_dim == 1 else x


@dataclass
class ValidationItem:
    name: str
    status: str          # "pass" | "warn" | "fail"
    residual: float
    detail: str = ""


@dataclass
class ValidationReport:
    model: str
    theta: np.ndarray
    items: list[ValidationItem] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(i.status != "fail" for i in self.items)

    @property
    def warnings(self) -> list[str]:
        return ["%s: %s" % (i.name, i.detail or i.status)
                for i in self.items if i.status == "warn"]

    def add(self, name, status, residual, detail=""):
        self.items.append(ValidationItem(name, status, float(residual), detail))


def _probe_points(model: MultiscaleModel):
    """Small (x, y) probe set spanning the fast domain and a neighborhood
    of the initial slow state."""
    if isinstance(model.fast_domain, Periodic):
        ys = np.linspace(0.0, model.fast_domain.period, 9)[:-1]
    else:
        ys = np.linspace(-model.fast_domain.radius, model.fast_domain.radius, 9)
    scale = 1.0 + np.abs(model.x0)
    offs = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
    xs = model.x0[None, :] + offs[:, None] * scale[None, :]
    return xs, ys


def validate_model(model: MultiscaleModel, theta,
                   quad: QuadratureSettings | None = None) -> ValidationReport:
    """Numerically probe the structural conditions the estimators rely on.

    Deterministic, side-effect free.  Raising behavior: non-finite
    coefficient values raise EvaluationFailure; a violated centering
    condition in the homogenization regime raises CenteringViolation
    (the estimator formulas presuppose it).  Everything else is reported
    as pass/warn items with measured residuals.
    """
    from .averaging import frozen_generator, invariant_density

    quad = quad or QuadratureSettings()
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    report = ValidationReport(model.name, theta)
    xs, ys = _probe_points(model)

    # -- finiteness of every coefficient on the probe grid
    worst = 0.0
    for xrow in xs:
        xa = model._x_arg(xrow)
        vals = [
            np.asarray(model.b(theta, xa, ys), dtype=float),
            np.asarray(model.c(theta, xa, ys), dtype=float),
            np.asarray(model.sigma(xa, ys), dtype=float),
            np.asarray(model.f(theta, xa, ys), dtype=float),
            np.asarray(model.g(theta, xa, ys), dtype=float),
            np.asarray(model.tau1(xa, ys), dtype=float),
            np.asarray(model.tau2(xa, ys), dtype=float),
        ]
        for v in vals:
            if not np.all(np.isfinite(v)):
                raise EvaluationFailure(
                    "non-finite coefficient value at x=%s" % (xrow,))
            worst = max(worst, float(np.max(np.abs(v))))
    report.add("finiteness", "pass", worst, "max |coefficient| on probe grid")

    # -- periodicity of all coefficients in y
    if isinstance(model.fast_domain, Periodic):
        P = model.fast_domain.period
        res = 0.0
        for xrow in xs:
            xa = model._x_arg(xrow)
            for h in (model.b, model.c, model.f, model.g):
                d = np.asarray(h(theta, xa, ys + P)) - np.asarray(h(theta, xa, ys))
                res = max(res, float(np.max(np.abs(d))))
            for h in (model.sigma, model.tau1, model.tau2):
                d = np.asarray(h(xa, ys + P)) - np.asarray(h(xa, ys))
                res = max(res, float(np.max(np.abs(d))))
        report.add("periodicity", "pass" if res <= 1e-10 else "fail", res,
                   "max |h(x, y+P) - h(x, y)|")

    # -- diffusion nondegeneracy of the frozen generator
    min_tau2sq = math.inf
    min_diff = math.inf
    for xrow in xs:
        xa = model._x_arg(xrow)
        t2 = np.asarray(model.tau2(xa, ys), dtype=float) ** 2
        min_tau2sq = min(min_tau2sq, float(np.min(t2)))
        gen = frozen_generator(model, theta, xrow)
        min_diff = min(min_diff, float(np.min(gen.diffusion_half(ys))))
    if model.nu_tau2 > 0:
        report.add("tau2 nondegeneracy",
                   "pass" if min_tau2sq >= model.nu_tau2 else "fail",
                   min_tau2sq, "min tau2^2 vs declared nu=%g" % model.nu_tau2)
    else:
        report.add("tau2 nondegeneracy", "warn", min_tau2sq,
                   "no positive nu declared; ellipticity must come via tau1")
    report.add("generator diffusion", "pass" if min_diff > 1e-12 else "fail",
               min_diff, "min of the frozen generator's diffusion coefficient")

    # -- recurrence heuristic: inward drift at the truncation boundary
    if isinstance(model.fast_domain, Line):
        R = model.fast_domain.radius
        worst_sign = -math.inf
        for xrow in xs:
            gen = frozen_generator(model, theta, xrow)
            for yb in (-R, R):
                worst_sign = max(worst_sign, float(gen.drift(yb) * yb))
        status = "pass" if worst_sign < 0 else "warn"
        report.add("recurrence (boundary sign heuristic)", status, worst_sign,
                   "max of drift(y)*y at the truncation boundary; this sign "
                   "check is a heuristic, not a certificate")

    # -- centering of b under the frozen invariant measure (homogenization)
    if model.regime.kind is RegimeKind.HOMOGENIZATION:
        worst_res = 0.0
        for xrow in xs:
            gen = frozen_generator(model, theta, xrow)
            dens = invariant_density(gen, quad)
            raw = np.asarray(model.b(theta, model._x_arg(xrow), dens.nodes),
                             dtype=float)
            if model.slow_dim == 1:
                bfield = np.broadcast_to(raw, dens.nodes.shape)[None, :]
            else:
                bfield = np.moveaxis(
                    np.broadcast_to(raw, dens.nodes.shape + (model.slow_dim,)),
                    -1, 0)
            res = float(np.max(np.abs(dens.average(bfield))))
            tol = 1e-6 * (1.0 + float(np.linalg.norm(xrow)))
            if res > tol:
                raise CenteringViolation(
                    "fast average of b is %.3g at x=%s (tolerance %.3g)"
                    % (res, xrow, tol))
            worst_res = max(worst_res, res)
        report.add("centering", "pass", worst_res,
                   "max |int b dmu| over probe x")

    return report
