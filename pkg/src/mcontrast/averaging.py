"""Frozen-fast-process averaging: invariant densities, cell problems, and
the averaged model (effective drift, its gradients, effective diffusion,
and the second-order drift correction).

For a frozen slow state x and parameter theta the fast variable is a 1-D
diffusion with generator  L = a(y) d/dy + s(y) d^2/dy^2.  Everything here
reduces to quadrature on a y-grid:

* the stationary density comes from the explicit 1-D Fokker-Planck
  solution (zero-flux on the line, flux-carrying on the circle when the
  log-potential is not periodic);
* Poisson equations L u = -rhs are solved through the stationary-measure
  representation  s(y) rho(y) u'(y) = -int_{-inf}^{y} rho rhs, evaluated
  as cumulative quadrature with asymptotic tail corrections on truncated
  domains, followed by one more cumulative pass and centering.

The averaged model evaluates all of its outputs for batched slow states
(trailing slow axis); one call covers a whole time grid, which is what
makes the downstream flow integration affordable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import (
    EvaluationFailure,
    GradientInconsistency,
    NonErgodic,
    NormalizationFailure,
    ResidualTooLarge,
    SolvabilityViolation,
)
from .model import Line, MultiscaleModel, ParameterSpace, Periodic, RegimeKind
from .quadrature import (
    QuadratureSettings,
    cumulative_integral,
    derivative,
    trapezoid_weights,
)


def _theta_key(theta) -> tuple:
    th = np.atleast_1d(np.asarray(theta, dtype=float))
    return tuple(float("%.12e" % t) for t in th)


def _noise_sumsq(raw, y, w):
    """tau tau^T as a scalar field; the callable may return a trailing
    noise axis of length w or a plain broadcastable array."""
    raw = np.asarray(raw, dtype=float)
    if raw.ndim == np.ndim(y) + 1 and raw.shape[-1] == w:
        return np.sum(raw * raw, axis=-1)
    return raw * raw


# ---------------------------------------------------------------------------
# generator and density
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Generator1D:
    """Frozen fast-process generator a(y) d/dy + s(y) d^2/dy^2."""

    drift: Callable
    diffusion_half: Callable
    domain: object  # Periodic or Line


def frozen_generator(model: MultiscaleModel, theta, x) -> Generator1D:
    """Generator of the fast process with the slow state frozen at x.

    Homogenization regime: drift f, diffusion (tau1 tau1^T + tau2^2)/2.
    Averaging regime: drift gamma*f + g, diffusion gamma/2 * (same).
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xa = model._x_arg(x)
    regime = model.regime
    w = model.noise_dim
    homog = regime.kind is RegimeKind.HOMOGENIZATION
    gam = 1.0 if homog else regime.gamma

    def drift(y):
        fv = np.asarray(model.f(theta, xa, y), dtype=float)
        if homog:
            return np.broadcast_to(fv, np.shape(y)).astype(float)
        gv = np.asarray(model.g(theta, xa, y), dtype=float)
        return np.broadcast_to(gam * fv + gv, np.shape(y)).astype(float)

    def diffusion_half(y):
        t1 = _noise_sumsq(model.tau1(xa, y), y, w)
        t2 = np.asarray(model.tau2(xa, y), dtype=float) ** 2
        return np.broadcast_to(0.5 * gam * (t1 + t2), np.shape(y)).astype(float)

    return Generator1D(drift=drift, diffusion_half=diffusion_half,
                       domain=model.fast_domain)


@dataclass
class DensityGrid:
    """Stationary density sampled on a uniform node grid.

    ``gaussian`` carries (mean, variance) when the density was recognized
    as exactly Gaussian (linear confining drift, constant diffusion); the
    grid, weights, and density may carry leading batch axes when built for
    a batch of frozen slow states.
    """

    nodes: np.ndarray
    weights: np.ndarray
    density: np.ndarray
    h: float
    periodic: bool
    gaussian: Optional[tuple] = None

    def average(self, values: np.ndarray) -> np.ndarray:
        """Integrate values (last axis = grid) against the density."""
        return np.sum(self.weights * self.density * values, axis=-1)

    @property
    def mass(self) -> float:
        return float(np.max(np.sum(self.weights * self.density, axis=-1)))

    def with_component_axis(self) -> "DensityGrid":
        """View with an extra axis before the grid axis, for aligning with
        (..., m, Ny)-shaped fields."""
        if self.nodes.ndim == 1:
            return self
        return DensityGrid(self.nodes[..., None, :], self.weights[..., None, :],
                           self.density[..., None, :], self.h, self.periodic,
                           self.gaussian)


def _detect_gaussian(drift, diff_half, probes):
    """Return (mean, variance) if the generator is an OU process on the
    probe set (linear drift with negative slope, constant diffusion)."""
    y = np.asarray(probes, dtype=float)
    a = np.asarray(drift(y), dtype=float)
    s = np.asarray(diff_half(y), dtype=float)
    scale = max(1e-12, float(np.max(np.abs(a))))
    if np.max(np.abs(s - s[0])) > 1e-12 * max(1.0, abs(float(s[0]))):
        return None
    if np.max(np.abs(np.diff(a, 2))) > 1e-10 * scale:
        return None
    slope = (a[-1] - a[0]) / (y[-1] - y[0])
    if slope >= -1e-12:
        return None
    mean = y[0] - a[0] / slope
    var = -float(s[0]) / slope
    return float(mean), float(var)


def _line_window(drift, diff_half, radius):
    """Center and half-width of the truncated line grid, standardized by
    the local stationary scale at the drift's zero."""
    grid = np.linspace(-32.0, 32.0, 257)
    a = np.asarray(drift(grid), dtype=float)
    sign_change = np.nonzero(np.diff(np.sign(a)) != 0)[0]
    if sign_change.size:
        lo, hi = grid[sign_change[0]], grid[sign_change[0] + 1]
        flo = float(drift(np.array(lo)))
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if float(drift(np.array(mid))) * flo > 0:
                lo = mid
            else:
                hi = mid
        center = 0.5 * (lo + hi)
    else:
        center = 0.0
    h = 1e-5 * (1.0 + abs(center))
    slope = (float(drift(np.array(center + h)))
             - float(drift(np.array(center - h)))) / (2 * h)
    s0 = float(diff_half(np.array(center)))
    var = -s0 / slope if slope < -1e-12 else 1.0
    return center, radius * math.sqrt(max(var, 1e-12))


def _density_values(a, s, h, periodic):
    """Unnormalized stationary density on the grid, batched over leading
    axes.  Also returns the log-potential G = int a/s and its increment
    over the domain (the flux indicator on the circle)."""
    G = cumulative_integral(a / s, h)
    GP = G[..., -1:]
    shift = np.max(G, axis=-1, keepdims=True)
    Es = np.exp(G - shift)
    if periodic and np.any(np.abs(GP) > 1e-10):
        Ir = cumulative_integral(np.exp(-(G - shift)), h)
        lam = -np.expm1(-GP) / Ir[..., -1:]
        u = np.where(np.abs(GP) > 1e-10, Es * (1.0 - lam * Ir), Es)
    else:
        u = Es
    return u / s, G, GP


def _grid_for(gen: Generator1D, quad: QuadratureSettings):
    if isinstance(gen.domain, Periodic):
        n = quad.periodic_intervals
        nodes = np.linspace(0.0, gen.domain.period, n + 1)
        return nodes, gen.domain.period / n, True
    radius = quad.truncation_radius or gen.domain.radius
    center, half = _line_window(gen.drift, gen.diffusion_half, radius)
    n = quad.line_intervals
    nodes = np.linspace(center - half, center + half, n + 1)
    return nodes, 2 * half / n, False


def invariant_density(gen: Generator1D, quad: QuadratureSettings | None = None
                      ) -> DensityGrid:
    """Stationary density of the frozen fast generator.

    On the circle the flux constant is chosen to make the solution
    periodic (it vanishes when the log-potential is itself periodic); on
    the truncated line the zero-flux solution exp(int a/s)/s is used, or
    the exact Gaussian when the generator is recognized as an OU process.
    """
    quad = quad or QuadratureSettings()
    nodes, h, periodic = _grid_for(gen, quad)
    a = np.asarray(gen.drift(nodes), dtype=float)
    s = np.asarray(gen.diffusion_half(nodes), dtype=float)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(s))):
        raise EvaluationFailure("generator coefficients non-finite on the grid")
    if np.min(s) <= 0:
        raise EvaluationFailure("generator diffusion is not positive on the grid")

    gaussian = None
    if not periodic and quad.detect_gaussian:
        gaussian = _detect_gaussian(gen.drift, gen.diffusion_half,
                                    np.linspace(nodes[0], nodes[-1], 7))
    if gaussian is not None:
        mean, var = gaussian
        dens = np.exp(-0.5 * (nodes - mean) ** 2 / var) / math.sqrt(2 * math.pi * var)
    else:
        dens, _, _ = _density_values(a, s, h, periodic)

    w = trapezoid_weights(nodes.size, h)
    mass = float(np.sum(w * dens))
    if not (mass > 1e-12 and np.isfinite(mass)):
        raise NormalizationFailure(
            "stationary density mass %.3g on the truncated domain" % mass)
    dens = dens / mass
    if float(np.min(dens)) < -1e-14:
        raise NormalizationFailure("stationary density has negative values")

    if not periodic:
        k = max(3, nodes.size // 10)
        if np.all(np.diff(dens[-k:]) > 0) or np.all(np.diff(dens[:k]) < 0):
            raise NonErgodic(
                "stationary density increases toward the truncation boundary")

    return DensityGrid(nodes=nodes, weights=w, density=dens, h=h,
                       periodic=periodic, gaussian=gaussian)


# ---------------------------------------------------------------------------
# cell problems
# ---------------------------------------------------------------------------

@dataclass
class CellSolution:
    """Solution of L u = -rhs with zero stationary mean."""

    values: np.ndarray
    derivative: np.ndarray
    centered: bool = True


def _reverse_cumint(q, h):
    return cumulative_integral(q[..., ::-1], h)[..., ::-1]


def _cell_derivative(rhs, a, s, dens: DensityGrid):
    """d/dy of the cell solution, batched over leading axes of ``rhs``.

    Uses (s rho u')' = -rho rhs.  On the truncated line the boundary data
    is the first-order Watson tail  int_{-inf}^{-R} rho rhs ~ (s rho
    rhs/a)(-R), which keeps u' accurate out to the truncation radius.
    Raises SolvabilityViolation when the stationary average of rhs is not
    zero to tolerance; the measured average is then projected out so both
    cumulative branches agree exactly.
    """
    rho = dens.density
    h = dens.h
    srho = s * rho
    scale = np.maximum(np.max(np.abs(rhs), axis=-1, keepdims=True), 1e-300)

    if dens.periodic:
        mean = np.sum(dens.weights * rho * rhs, axis=-1, keepdims=True)
        if np.any(np.abs(mean) > 1e-6 * scale):
            raise SolvabilityViolation(
                "stationary average of rhs is %.3g" % float(np.max(np.abs(mean))))
        rhs0 = rhs - mean
        _, G, GP = _density_values(np.broadcast_to(a, rhs.shape),
                                   np.broadcast_to(s, rhs.shape), h, True)
        if np.any(np.abs(GP) > 1e-10):
            # flux-carrying circle: integrating-factor solve, u' periodic
            shift = np.max(G, axis=-1, keepdims=True)
            Es = np.exp(G - shift)
            H = cumulative_integral(rhs0 / s * Es, h)
            v0 = H[..., -1:] / -np.expm1(GP)
            return (v0 - H) / Es
        C = cumulative_integral(rho * rhs0, h)
        inv = 1.0 / srho
        wt = trapezoid_weights(rhs.shape[-1], h)
        K = (np.sum(wt * C * inv, axis=-1, keepdims=True)
             / np.sum(wt * inv, axis=-1, keepdims=True))
        return (K - C) * inv

    def tails(r):
        tl = srho[..., :1] * r[..., :1] / a[..., :1]
        tr = -srho[..., -1:] * r[..., -1:] / a[..., -1:]
        return tl, tr

    tl, tr = tails(rhs)
    total = tl + cumulative_integral(rho * rhs, h)[..., -1:] + tr
    if np.any(np.abs(total) > 1e-6 * scale):
        raise SolvabilityViolation(
            "stationary average of rhs is %.3g" % float(np.max(np.abs(total))))
    rhs0 = rhs - total
    tl, tr = tails(rhs0)
    cl = tl + cumulative_integral(rho * rhs0, h)
    cr = _reverse_cumint(rho * rhs0, h) + tr
    mass = cumulative_integral(rho, h)
    return np.where(mass <= 0.5, -cl, cr) / srho


def _solve_cell(rhs, a, s, dens: DensityGrid, check_residual: bool = True):
    """Centered cell solution and derivative for batched rhs fields."""
    du = _cell_derivative(rhs, a, s, dens)
    u = cumulative_integral(du, dens.h)
    u = u - np.sum(dens.weights * dens.density * u, axis=-1, keepdims=True)
    if check_residual:
        res = s * derivative(du, dens.h, periodic=dens.periodic) + a * du + rhs
        scale = np.maximum(np.max(np.abs(rhs), axis=-1), 1e-300)
        l2 = np.sqrt(np.sum(dens.weights * dens.density * res * res, axis=-1))
        if np.any(l2 > 1e-6 * scale):
            raise ResidualTooLarge(
                "cell residual %.3g exceeds 1e-6 * max|rhs|"
                % float(np.max(l2 / scale)))
    return u, du


def solve_cell_problem(gen: Generator1D, rhs: Callable,
                       mu: DensityGrid) -> CellSolution:
    """Solve L u = -rhs with int u dmu = 0 on mu's grid."""
    y = mu.nodes
    rv = np.broadcast_to(np.asarray(rhs(y), dtype=float), y.shape).astype(float)
    a = np.broadcast_to(np.asarray(gen.drift(y), dtype=float), y.shape).astype(float)
    s = np.broadcast_to(np.asarray(gen.diffusion_half(y), dtype=float),
                        y.shape).astype(float)
    u, du = _solve_cell(rv, a, s, mu)
    return CellSolution(values=u, derivative=du)


# ---------------------------------------------------------------------------
# averaged model
# ---------------------------------------------------------------------------

class AveragedModel:
    """Interface consumed by the flow/contrast/variance machinery.

    All evaluators accept slow states of shape (..., m) and return arrays
    with matching leading axes.  Gradient defaults are central finite
    differences of the averaged drift map with coordinate-scaled steps.
    """

    m: int
    k: int
    provenance: str

    def lambda_bar(self, theta, x):          # (..., m)
        raise NotImplementedError

    def q_bar(self, theta, x):               # (..., m, m)
        raise NotImplementedError

    def j_bar(self, theta, x):               # (..., m)
        raise NotImplementedError

    def grad_x_lambda_bar(self, theta, x):   # (..., m, m); [i, j] = d lam_i/d x_j
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape[:-1] + (self.m, self.m))
        for j in range(self.m):
            h = 1e-5 * (1.0 + np.abs(x[..., j]))
            e = np.zeros(self.m)
            e[j] = 1.0
            hi = self.lambda_bar(theta, x + h[..., None] * e)
            lo = self.lambda_bar(theta, x - h[..., None] * e)
            out[..., :, j] = (hi - lo) / (2.0 * h[..., None])
        return out

    def grad_theta_lambda_bar(self, theta, x):  # (..., m, k)
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape[:-1] + (self.m, self.k))
        for j in range(self.k):
            h = 1e-5 * (1.0 + abs(float(theta[j])))
            e = np.zeros(self.k)
            e[j] = 1.0
            hi = self.lambda_bar(theta + h * e, x)
            lo = self.lambda_bar(theta - h * e, x)
            out[..., :, j] = (hi - lo) / (2.0 * h)
        return out

    def q_and_j_bar(self, theta, x):
        """(q_bar, j_bar) in one call; subclasses may share work."""
        return self.q_bar(theta, x), self.j_bar(theta, x)


class ClosedFormAveragedModel(AveragedModel):
    """Averaged model supplied directly by the caller (golden tests and
    user models whose averages are known in closed form)."""

    provenance = "closed-form"

    def __init__(self, m, k, lambda_bar, q_bar, j_bar=None,
                 grad_x=None, grad_theta=None):
        self.m = m
        self.k = k
        self._lambda = lambda_bar
        self._q = q_bar
        self._j = j_bar
        self._gx = grad_x
        self._gt = grad_theta

    def _out(self, raw, x, trailing):
        raw = np.asarray(raw, dtype=float)
        shape = np.shape(x)[:-1] + trailing
        return np.broadcast_to(raw, shape).astype(float)

    def lambda_bar(self, theta, x):
        x = np.asarray(x, dtype=float)
        return self._out(self._lambda(np.atleast_1d(theta), x), x, (self.m,))

    def q_bar(self, theta, x):
        x = np.asarray(x, dtype=float)
        return self._out(self._q(np.atleast_1d(theta), x), x, (self.m, self.m))

    def j_bar(self, theta, x):
        x = np.asarray(x, dtype=float)
        if self._j is None:
            return np.zeros(x.shape[:-1] + (self.m,))
        return self._out(self._j(np.atleast_1d(theta), x), x, (self.m,))

    def grad_x_lambda_bar(self, theta, x):
        if self._gx is None:
            return super().grad_x_lambda_bar(theta, x)
        x = np.asarray(x, dtype=float)
        return self._out(self._gx(np.atleast_1d(theta), x), x, (self.m, self.m))

    def grad_theta_lambda_bar(self, theta, x):
        if self._gt is None:
            return super().grad_theta_lambda_bar(theta, x)
        x = np.asarray(x, dtype=float)
        return self._out(self._gt(np.atleast_1d(theta), x), x, (self.m, self.k))


def _probe_xy(model):
    if isinstance(model.fast_domain, Periodic):
        ys = np.linspace(0.1, model.fast_domain.period * 0.97, 5)
    else:
        ys = np.linspace(-3.0, 3.0, 5)
    scale = 1.0 + np.abs(model.x0)
    xs = [np.asarray(model.x0, float), model.x0 + 0.7 * scale,
          model.x0 - 1.3 * scale]
    return xs, ys


class _FastLayer:
    """Everything that depends only on (theta, y): the density grid, the
    generator fields on it, and (when b is x-independent) the corrector
    derivative, shaped (m, Ny).  ``wmu`` is the combined quadrature/density
    weight; ``q_const`` caches an x-independent effective diffusion."""

    __slots__ = ("dens", "a", "s", "chi_prime", "wmu", "q_const")

    def __init__(self, dens, a, s, chi_prime=None):
        self.dens = dens
        self.a = a
        self.s = s
        self.chi_prime = chi_prime
        self.wmu = dens.weights * dens.density
        self.q_const = None


class QuadratureAveragedModel(AveragedModel):
    """Averaged model assembled by fast-variable quadrature.

    Homogenization regime: effective drift is the stationary average of
    (d chi/dy) g + c with chi solving L chi = -b; the effective diffusion
    uses chi, the drift correction uses the second corrector Phi (rhs =
    lambda - lambda_bar) scaled by 1/ell.  Averaging regime: drift is the
    average of gamma b + c, with Phi supplying both the diffusion and the
    correction.  Gradients in x and theta are central differences of the
    averaged map; the fast layer is memoized per theta when the frozen
    generator does not depend on x.
    """

    provenance = "quadrature"

    def __init__(self, model: MultiscaleModel, space: ParameterSpace,
                 quad: QuadratureSettings | None = None):
        self.model = model
        self.space = space
        self.quad = quad or QuadratureSettings()
        self.m = model.slow_dim
        self.k = space.dim
        self._layers: dict = {}
        xs, ys = _probe_xy(model)
        th0 = space.center

        def gen_probe(x):
            g = frozen_generator(model, th0, x)
            return np.concatenate([g.drift(ys), g.diffusion_half(ys)])

        def coeff_probe(fn, with_theta=True):
            def probe(x):
                xa = model._x_arg(np.atleast_1d(x))
                raw = fn(th0, xa, ys) if with_theta else fn(xa, ys)
                return np.ravel(np.asarray(raw, dtype=float))
            return probe

        self._gen_x_indep = self._x_indep(gen_probe, xs)
        self._b_x_indep = self._x_indep(coeff_probe(model.b), xs)
        self._g_zero = all(
            float(np.max(np.abs(np.asarray(
                model.g(th0, model._x_arg(np.atleast_1d(x)), ys), dtype=float)))) == 0.0
            for x in xs)
        noise_x_indep = all(self._x_indep(coeff_probe(fn, with_theta=False), xs)
                            for fn in (model.sigma, model.tau1, model.tau2))
        if model.regime.kind is RegimeKind.HOMOGENIZATION:
            self._q_x_indep = (noise_x_indep and self._b_x_indep
                               and self._gen_x_indep)
        else:
            c_x_indep = self._x_indep(coeff_probe(model.c), xs)
            g_x_indep = self._g_zero or self._x_indep(coeff_probe(model.g), xs)
            self._q_x_indep = (noise_x_indep and self._b_x_indep and c_x_indep
                               and g_x_indep and self._gen_x_indep)

    @staticmethod
    def _x_indep(fn, xs):
        ref = np.asarray(fn(xs[0]), dtype=float)
        return all(np.array_equal(ref, np.asarray(fn(x), dtype=float))
                   for x in xs[1:])

    # -- coefficient canonicalization ---------------------------------------
    # Fields live on (..., Ny) grids; vector coefficients are canonicalized
    # to (..., m, Ny), sigma to (..., m, w, Ny), tau1 to (..., w, Ny).

    def _x_grid_arg(self, x):
        x = np.asarray(x, dtype=float)
        xa = x[..., None, :]
        return xa[..., 0] if self.m == 1 else xa

    def _vec_field(self, raw, fs):
        raw = np.asarray(raw, dtype=float)
        if self.m == 1:
            return np.broadcast_to(raw, fs)[..., None, :]
        return np.moveaxis(np.broadcast_to(raw, fs + (self.m,)), -1, -2)

    def _scal_field(self, raw, fs):
        return np.broadcast_to(np.asarray(raw, dtype=float), fs)

    def _sigma_field(self, raw, fs):
        raw = np.asarray(raw, dtype=float)
        w = self.model.noise_dim
        if self.m == 1 and w == 1 and raw.ndim <= len(fs):
            return np.broadcast_to(raw, fs)[..., None, None, :]
        return np.moveaxis(np.broadcast_to(raw, fs + (self.m, w)),
                           (-2, -1), (-3, -2))

    def _tau1_field(self, raw, fs):
        raw = np.asarray(raw, dtype=float)
        w = self.model.noise_dim
        if w == 1 and raw.ndim <= len(fs):
            return np.broadcast_to(raw, fs)[..., None, :]
        return np.moveaxis(np.broadcast_to(raw, fs + (w,)), -1, -2)

    # -- fast layers ----------------------------------------------------------

    def _shared_layer(self, theta) -> _FastLayer:
        key = _theta_key(theta)
        layer = self._layers.get(key)
        if layer is None:
            theta = np.atleast_1d(np.asarray(theta, dtype=float))
            gen = frozen_generator(self.model, theta, self.model.x0)
            dens = invariant_density(gen, self.quad)
            a = gen.drift(dens.nodes)
            s = gen.diffusion_half(dens.nodes)
            chi_prime = None
            if (self.model.regime.kind is RegimeKind.HOMOGENIZATION
                    and self._b_x_indep):
                raw = self.model.b(theta, self.model._x_arg(self.model.x0),
                                   dens.nodes)
                rhs = self._vec_field(raw, dens.nodes.shape)
                _, chi_prime = _solve_cell(rhs, a, s, dens)
            layer = _FastLayer(dens, a, s, chi_prime)
            if len(self._layers) >= 512:
                self._layers.clear()
            self._layers[key] = layer
        return layer

    def _per_x_layer(self, theta, x) -> _FastLayer:
        x = np.asarray(x, dtype=float)
        batch = x.shape[:-1]
        flat = x.reshape(-1, self.m)
        grids = [invariant_density(frozen_generator(self.model, theta, row),
                                   self.quad) for row in flat]
        nodes = np.stack([d.nodes for d in grids]).reshape(batch + (-1,))
        weights = np.stack([d.weights for d in grids]).reshape(batch + (-1,))
        density = np.stack([d.density for d in grids]).reshape(batch + (-1,))
        avals = np.stack([
            frozen_generator(self.model, theta, row).drift(d.nodes)
            for row, d in zip(flat, grids)]).reshape(batch + (-1,))
        svals = np.stack([
            frozen_generator(self.model, theta, row).diffusion_half(d.nodes)
            for row, d in zip(flat, grids)]).reshape(batch + (-1,))
        dens = DensityGrid(nodes=nodes, weights=weights, density=density,
                           h=grids[0].h, periodic=grids[0].periodic)
        return _FastLayer(dens, avals, svals, None)

    def _layer_for(self, theta, x) -> _FastLayer:
        if self._gen_x_indep:
            return self._shared_layer(theta)
        return self._per_x_layer(np.atleast_1d(np.asarray(theta, float)), x)

    def _field_shape(self, layer, x):
        if layer.dens.nodes.ndim == 1:
            return np.shape(x)[:-1] + layer.dens.nodes.shape
        return layer.dens.nodes.shape

    def _cell_prime(self, layer, rhs):
        """Corrector derivative for an (..., m, Ny) right-hand side."""
        a = layer.a[..., None, :] if layer.a.ndim > 1 else layer.a
        s = layer.s[..., None, :] if layer.s.ndim > 1 else layer.s
        _, du = _solve_cell(rhs, a, s, layer.dens.with_component_axis())
        return du

    def _chi_prime(self, theta, x, layer, fs, xa, y):
        if layer.chi_prime is not None:
            return layer.chi_prime
        rhs = self._vec_field(self.model.b(theta, xa, y), fs)
        return self._cell_prime(layer, rhs)

    def _lambda_field(self, theta, x, layer):
        """lambda on the grid, (..., m, Ny), plus reusable context."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        fs = self._field_shape(layer, x)
        xa = self._x_grid_arg(x)
        y = layer.dens.nodes
        cvals = self._vec_field(self.model.c(theta, xa, y), fs)
        if self.model.regime.kind is RegimeKind.HOMOGENIZATION:
            dchi = self._chi_prime(theta, x, layer, fs, xa, y)
            if self._g_zero:
                lam = cvals
            else:
                gv = self._scal_field(self.model.g(theta, xa, y), fs)
                lam = dchi * gv[..., None, :] + cvals
            return lam, dchi, fs, xa, y
        bvals = self._vec_field(self.model.b(theta, xa, y), fs)
        return self.model.regime.gamma * bvals + cvals, None, fs, xa, y

    def _avg(self, layer, values):
        """Average an (..., [m,[m,]] Ny) field against the density."""
        w = layer.wmu
        if w.ndim == 1:
            return np.matmul(values, w)
        w = w.reshape(w.shape[:-1] + (1,) * (values.ndim - w.ndim) + w.shape[-1:])
        return np.sum(w * values, axis=-1)

    # -- public evaluators ------------------------------------------------------

    def lambda_bar(self, theta, x):
        layer = self._layer_for(theta, x)
        lam, _, _, _, _ = self._lambda_field(theta, x, layer)
        return self._avg(layer, lam)

    def q_bar(self, theta, x):
        x = np.asarray(x, dtype=float)
        if self._q_x_indep:
            layer = self._shared_layer(theta)
            if layer.q_const is None:
                layer.q_const = self._q_bar_at(theta, self.model.x0[None, :],
                                               layer)[0]
            return np.broadcast_to(layer.q_const,
                                   x.shape[:-1] + (self.m, self.m)).copy()
        return self._q_bar_at(theta, x, self._layer_for(theta, x))

    def _q_bar_at(self, theta, x, layer):
        lam, dchi, fs, xa, y = self._lambda_field(theta, x, layer)
        if self.model.regime.kind is RegimeKind.HOMOGENIZATION:
            dpsi = dchi
        else:
            lbar = self._avg(layer, lam)
            dpsi = self._cell_prime(layer, lam - lbar[..., None])
        return self._assemble_q(layer, dpsi, fs, xa, y)

    def _assemble_q(self, layer, dpsi, fs, xa, y):
        sig = self._sigma_field(self.model.sigma(xa, y), fs)
        t1 = self._tau1_field(self.model.tau1(xa, y), fs)
        t2 = self._scal_field(self.model.tau2(xa, y), fs)
        A = sig + dpsi[..., :, None, :] * t1[..., None, :, :]
        q = np.einsum("...iwy,...jwy->...ijy", A, A)
        B = dpsi * t2[..., None, :]
        q = q + np.einsum("...iy,...jy->...ijy", B, B)
        return self._avg(layer, q)

    def _j_bar_from(self, theta, layer, lam, dphi, fs, xa, y, ell):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if self.model.regime.kind is RegimeKind.HOMOGENIZATION:
            gv = self._scal_field(self.model.g(theta, xa, y), fs)
            return self._avg(layer, dphi * gv[..., None, :]) / ell
        gam = self.model.regime.gamma
        bvals = self._vec_field(self.model.b(theta, xa, y), fs)
        integrand = gam * bvals
        if not self._g_zero:
            gv = self._scal_field(self.model.g(theta, xa, y), fs)
            integrand = integrand - dphi * gv[..., None, :]
        return self._avg(layer, integrand) / (ell * gam)

    def _j_shortcut(self, x):
        """Zero correction when ell = inf (or g = 0 under homogenization)."""
        ell = self.model.regime.effective_ell(None)
        homog = self.model.regime.kind is RegimeKind.HOMOGENIZATION
        if not np.isfinite(ell) or (homog and self._g_zero):
            return np.zeros(x.shape[:-1] + (self.m,)), ell
        return None, ell

    def j_bar(self, theta, x):
        """Drift correction; identically zero when ell = inf (and, in the
        homogenization regime, when g = 0)."""
        x = np.asarray(x, dtype=float)
        zero, ell = self._j_shortcut(x)
        if zero is not None:
            return zero
        layer = self._layer_for(theta, x)
        lam, _, fs, xa, y = self._lambda_field(theta, x, layer)
        lbar = self._avg(layer, lam)
        dphi = self._cell_prime(layer, lam - lbar[..., None])
        return self._j_bar_from(theta, layer, lam, dphi, fs, xa, y, ell)

    def q_and_j_bar(self, theta, x):
        """Effective diffusion and drift correction with the corrector
        solve and coefficient fields shared between the two."""
        x = np.asarray(x, dtype=float)
        zero, ell = self._j_shortcut(x)
        if zero is not None:
            return self.q_bar(theta, x), zero
        layer = self._layer_for(theta, x)
        lam, dchi, fs, xa, y = self._lambda_field(theta, x, layer)
        lbar = self._avg(layer, lam)
        dphi = self._cell_prime(layer, lam - lbar[..., None])
        jb = self._j_bar_from(theta, layer, lam, dphi, fs, xa, y, ell)
        homog = self.model.regime.kind is RegimeKind.HOMOGENIZATION
        if self._q_x_indep:
            qb = self.q_bar(theta, x)
        else:
            qb = self._assemble_q(layer, dchi if homog else dphi, fs, xa, y)
        return qb, jb


def build_averaged_model(model: MultiscaleModel, space: ParameterSpace,
                         quad: QuadratureSettings | None = None,
                         validate: bool = True) -> QuadratureAveragedModel:
    """Assemble the quadrature-backed averaged model.

    With ``validate=True`` the structural checks of ``validate_model`` run
    first at the box center (centering violations and non-finite
    coefficients raise there).
    """
    if validate:
        from .model import validate_model
        validate_model(model, space.center, quad)
    return QuadratureAveragedModel(model, space, quad)


def check_gradients(avg: AveragedModel, theta, x, rtol: float = 1e-3):
    """Cross-validate the theta-gradient of the averaged drift at two
    finite-difference step sizes; disagreement raises GradientInconsistency."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))

    def fd(step):
        out = np.empty((avg.m, avg.k))
        for j in range(avg.k):
            h = step * (1.0 + abs(float(theta[j])))
            e = np.zeros(avg.k)
            e[j] = 1.0
            out[:, j] = (avg.lambda_bar(theta + h * e, x)
                         - avg.lambda_bar(theta - h * e, x)) / (2 * h)
        return out

    g1, g2 = fd(1e-5), fd(5e-6)
    scale = max(float(np.max(np.abs(g1))), 1e-12)
    if float(np.max(np.abs(g1 - g2))) > rtol * scale:
        raise GradientInconsistency(
            "theta-gradient differs by %.3g (relative) between step sizes"
            % (float(np.max(np.abs(g1 - g2))) / scale))
    return g1
