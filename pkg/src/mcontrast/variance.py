"""Asymptotic covariances of the two estimators and the derived
theoretical standard deviations.

With d_k = Z(t_k, t_{k-1}) S_{t_{k-1}} - S_{t_k} (S the parameter
sensitivity of the averaged path) the finite-n covariances are

    M      = [ sum_k d_k^T Q_k^{-1} d_k ]^{-1}          (weighted)
    M~     = Psi^{-1} Xi Psi^{-1},  Psi = sum d_k^T d_k,
                                    Xi  = sum d_k^T Q_k d_k   (simplified)

and their n -> infinity limits are the time integrals of
(grad_theta lam)^T qbar^{-1} (grad_theta lam) along the averaged path
(weighted; the continuous-data information) and the matching
Psi/Xi integrals (simplified).  The estimator's own standard deviation at
noise size eps is sqrt(eps * diag); the reporting convention uses the
n -> infinity limit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import IdentifiabilityFailure
from .averaging import AveragedModel
from .flow import (
    FlowCache,
    FlowEngine,
    FlowSettings,
    _rk4_backbone,
    _ScalarSurrogate,
    solve_spd,
)
from .quadrature import simpson_weights

_SING_REL = 1e-12


@dataclass
class AsymptoticVariance:
    kind: str                  # "mce" | "smce"
    matrix: np.ndarray         # (k, k), SPD
    theta: np.ndarray
    n: Optional[int]           # None means the n -> infinity limit

    @property
    def is_limit(self) -> bool:
        return self.n is None


def _sym(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _invert_information(info: np.ndarray, what: str) -> np.ndarray:
    k = info.shape[-1]
    info = _sym(info)
    eigs = np.linalg.eigvalsh(info)
    if eigs.min() < _SING_REL * max(np.trace(info) / k, 1e-300):
        raise IdentifiabilityFailure(
            "%s information matrix is singular (min eigenvalue %.3g)"
            % (what, float(eigs.min())))
    return _sym(np.linalg.inv(info))


def _differences(avg, theta, x0, n, T, settings, engine):
    if engine is not None:
        fc = engine.cache(theta)
    else:
        fc = FlowCache(avg, theta, x0, T, n, settings)
    d = fc.weighted_differences()          # (n, m, k)
    if float(np.max(np.abs(d))) <= 1e-12:
        raise IdentifiabilityFailure(
            "weighted sensitivity differences vanish for every interval")
    fc.ensure_weights()
    return d, fc.weights


def mce_variance(avg: AveragedModel, theta, x0, n: int, T: float,
                 settings: FlowSettings | None = None,
                 engine: FlowEngine | None = None) -> AsymptoticVariance:
    """Finite-n covariance of the weighted estimator."""
    d, Q = _differences(avg, theta, x0, n, T, settings, engine)
    sol = solve_spd(Q, d)                                  # Q^{-1} d
    info = np.einsum("nmk,nml->nkl", d, sol).sum(axis=0)
    return AsymptoticVariance("mce", _invert_information(info, "weighted"),
                              np.atleast_1d(np.asarray(theta, float)), int(n))


def smce_variance(avg: AveragedModel, theta, x0, n: int, T: float,
                  settings: FlowSettings | None = None,
                  engine: FlowEngine | None = None) -> AsymptoticVariance:
    """Finite-n covariance of the simplified estimator."""
    d, Q = _differences(avg, theta, x0, n, T, settings, engine)
    psi = np.einsum("nmk,nml->nkl", d, d).sum(axis=0)
    xi = np.einsum("nmk,nml->nkl", d,
                   np.einsum("nab,nbk->nak", Q, d)).sum(axis=0)
    psi_inv = _invert_information(psi, "simplified")
    return AsymptoticVariance("smce", _sym(psi_inv @ xi @ psi_inv),
                              np.atleast_1d(np.asarray(theta, float)), int(n))


def limit_variance(avg: AveragedModel, theta, x0, T: float,
                   kind: str = "mce",
                   settings: FlowSettings | None = None) -> AsymptoticVariance:
    """n -> infinity covariance by Simpson quadrature along the averaged
    path."""
    settings = settings or FlowSettings()
    nodes = settings.limit_nodes
    if nodes % 2 == 1:
        nodes += 1
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    surr = None
    if avg.m == 1:
        surr = _ScalarSurrogate(avg, theta, float(np.asarray(x0).reshape(-1)[0]),
                                settings.surrogate_points)
    tb, xb, fb = _rk4_backbone(avg, theta, x0, T, max(256, nodes // 4), surr)
    from scipy.interpolate import CubicHermiteSpline
    dense = CubicHermiteSpline(tb, xb, fb, axis=0)
    t = np.linspace(0.0, T, nodes + 1)
    x = dense(t)
    gt = avg.grad_theta_lambda_bar(theta, x)               # (nodes+1, m, k)
    q = avg.q_bar(theta, x)                                # (nodes+1, m, m)
    w = simpson_weights(nodes + 1, T / nodes)
    kind = kind.lower()
    if kind == "mce":
        sol = solve_spd(q, gt)
        info = np.einsum("t,tmk,tml->kl", w, gt, sol)
        return AsymptoticVariance("mce", _invert_information(info, "limit"),
                                  theta, None)
    if kind != "smce":
        raise ValueError("kind must be 'mce' or 'smce'")
    psi = np.einsum("t,tmk,tml->kl", w, gt, gt)
    xi = np.einsum("t,tmk,tml->kl", w, gt, np.einsum("tab,tbk->tak", q, gt))
    psi_inv = _invert_information(psi, "limit simplified")
    return AsymptoticVariance("smce", _sym(psi_inv @ xi @ psi_inv), theta, None)


def theoretical_sd(var: AsymptoticVariance, eps: float) -> np.ndarray:
    """Componentwise sqrt(eps * diag): the predicted standard deviation of
    the estimator itself at noise size eps."""
    return np.sqrt(eps * np.diag(var.matrix))


def psd_gap(mtilde: AsymptoticVariance | np.ndarray,
            m: AsymptoticVariance | np.ndarray):
    """Difference M~ - M and its minimum eigenvalue.

    The gap is positive semidefinite in exact arithmetic; the companion
    pass criterion is min eigenvalue >= -1e-10 * trace.
    """
    a = mtilde.matrix if isinstance(mtilde, AsymptoticVariance) else np.asarray(mtilde)
    b = m.matrix if isinstance(m, AsymptoticVariance) else np.asarray(m)
    gap = _sym(a - b)
    return gap, float(np.linalg.eigvalsh(gap).min())
