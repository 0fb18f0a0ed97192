"""Shared 1-D quadrature machinery for the fast-variable computations.

All averaging work runs on a uniform node grid, because the cell-problem
solver needs cumulative antiderivatives at every node.  Global averages use
trapezoid weights (spectrally accurate for smooth periodic integrands and
for integrands with Gaussian decay); cumulative integrals use a vectorized
fourth-order rule built from overlapping cubic interpolants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class QuadratureSettings:
    """Node counts and truncation controls for fast-variable quadrature.

    ``periodic_intervals`` / ``line_intervals`` count grid intervals (the
    grid has one more node).  ``truncation_radius`` is the half-width of a
    truncated unbounded domain in standardized units (multiples of the
    local stationary standard deviation).  ``detect_gaussian`` enables the
    closed-form stationary density when the frozen generator has linear
    confining drift and constant diffusion.
    """

    periodic_intervals: int = 1024
    line_intervals: int = 2048
    truncation_radius: float = 8.0
    detect_gaussian: bool = True


def trapezoid_weights(n_nodes: int, h: float) -> np.ndarray:
    w = np.full(n_nodes, h)
    w[0] = 0.5 * h
    w[-1] = 0.5 * h
    return w


def simpson_weights(n_nodes: int, h: float) -> np.ndarray:
    """Composite Simpson weights for an odd node count; falls back to
    trapezoid when the panel structure does not fit."""
    if n_nodes < 3 or n_nodes % 2 == 0:
        return trapezoid_weights(n_nodes, h)
    w = np.ones(n_nodes)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (h / 3.0)


# Cumulative integration: per interval [y_i, y_{i+1}] integrate the cubic
# through nodes (i-1, i, i+1, i+2); one-sided cubics at the two edges.
_INTERIOR = np.array([-1.0, 13.0, 13.0, -1.0]) / 24.0
_LEFT = np.array([9.0, 19.0, -5.0, 1.0]) / 24.0
_RIGHT = _LEFT[::-1].copy()


def cumulative_integral(values: np.ndarray, h: float) -> np.ndarray:
    """Antiderivative of sampled values on a uniform grid, zero at the
    first node.  Fourth-order accurate; vectorized over leading axes with
    the grid on the last axis."""
    f = np.asarray(values, dtype=float)
    n = f.shape[-1]
    if n < 2:
        return np.zeros_like(f)
    if n < 4:
        # not enough nodes for cubics; trapezoid
        inc = 0.5 * h * (f[..., 1:] + f[..., :-1])
    else:
        inc = np.empty(f.shape[:-1] + (n - 1,), dtype=float)
        inc[..., 1:-1] = h * (
            _INTERIOR[0] * f[..., :-3]
            + _INTERIOR[1] * f[..., 1:-2]
            + _INTERIOR[2] * f[..., 2:-1]
            + _INTERIOR[3] * f[..., 3:]
        )
        inc[..., 0] = h * (
            _LEFT[0] * f[..., 0] + _LEFT[1] * f[..., 1]
            + _LEFT[2] * f[..., 2] + _LEFT[3] * f[..., 3]
        )
        inc[..., -1] = h * (
            _RIGHT[0] * f[..., -4] + _RIGHT[1] * f[..., -3]
            + _RIGHT[2] * f[..., -2] + _RIGHT[3] * f[..., -1]
        )
    out = np.zeros(f.shape[:-1] + (n,), dtype=float)
    np.cumsum(inc, axis=-1, out=out[..., 1:])
    return out


def derivative(values: np.ndarray, h: float, periodic: bool = False) -> np.ndarray:
    """Fourth-order first derivative on a uniform grid (last axis).

    Periodic grids wrap (the duplicated endpoint is assumed equal); line
    grids use one-sided fourth-order stencils at the four edge nodes.
    """
    f = np.asarray(values, dtype=float)
    n = f.shape[-1]
    out = np.empty_like(f)
    if periodic:
        # drop the duplicate endpoint, differentiate on the circle
        g = f[..., :-1]
        gm2, gm1 = np.roll(g, 2, axis=-1), np.roll(g, 1, axis=-1)
        gp1, gp2 = np.roll(g, -1, axis=-1), np.roll(g, -2, axis=-1)
        d = (gm2 - 8.0 * gm1 + 8.0 * gp1 - gp2) / (12.0 * h)
        out[..., :-1] = d
        out[..., -1] = d[..., 0]
        return out
    if n < 5:
        return np.gradient(f, h, axis=-1)
    out[..., 2:-2] = (
        f[..., :-4] - 8.0 * f[..., 1:-3] + 8.0 * f[..., 3:-1] - f[..., 4:]
    ) / (12.0 * h)
    c = np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0
    for j in (0, 1):
        out[..., j] = sum(c[i] * f[..., j + i] for i in range(5)) / h
    for j in (-1, -2):
        out[..., j] = -sum(c[i] * f[..., j - i] for i in range(5)) / h
    return out
