"""Built-in model registry.

Two scalar homogenization-regime models drive the numerical studies:

* ``example1-periodic``: periodic fast dependence through the constraint
  Y = X/delta,

      dX = (eps/delta)(sin Y - cos Y) dt - theta X dt + sqrt(eps) dW.

  The averaged drift is -theta * kappa * x with kappa = (2 pi / L)^2,
  L = int_0^{2pi} exp(2(sin y + cos y)) dy, and the effective diffusion
  is the constant kappa.

* ``example2-ou``: an Ornstein-Uhlenbeck fast variable,

      dX = (eps/delta) theta Y dt + theta X Y^2 dt + sqrt(eps) dW,
      dY = -(eps/delta^2) Y/theta dt + (sqrt(eps)/delta) dB.

  The frozen fast law is N(0, theta/2), the corrector derivative is
  theta^2, the averaged drift is theta^2 x / 2, and the effective
  diffusion is 1 + theta^4 (no drift correction: g = 0).

Both models carry theta in the fast dynamics as well as the slow drift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .averaging import ClosedFormAveragedModel
from .model import (
    Line,
    MultiscaleModel,
    ParameterSpace,
    Periodic,
    Regime,
    RegimeKind,
)


def example1_kappa(n_nodes: int = 4097) -> float:
    """kappa = (2 pi / L)^2 by periodic trapezoid quadrature."""
    from .quadrature import trapezoid_weights
    y = np.linspace(0.0, 2.0 * math.pi, n_nodes)
    w = trapezoid_weights(n_nodes, y[1] - y[0])
    L = float(w @ np.exp(2.0 * (np.sin(y) + np.cos(y))))
    return float((2.0 * math.pi / L) ** 2)


_KAPPA = example1_kappa()


@dataclass(frozen=True)
class ModelBundle:
    name: str
    description: str
    build: Callable                    # (ell) -> MultiscaleModel
    space: ParameterSpace
    closed_form: Callable              # () -> ClosedFormAveragedModel


def _example1(ell: Optional[float] = math.inf) -> MultiscaleModel:
    sin, cos = np.sin, np.cos
    return MultiscaleModel(
        slow_dim=1,
        b=lambda th, x, y: sin(y) - cos(y),
        c=lambda th, x, y: -th[0] * x + 0.0 * np.asarray(y),
        sigma=lambda x, y: np.ones(np.broadcast_shapes(np.shape(x), np.shape(y))),
        f=lambda th, x, y: sin(y) - cos(y),
        g=lambda th, x, y: -th[0] * x + 0.0 * np.asarray(y),
        tau1=lambda x, y: np.ones(np.broadcast_shapes(np.shape(x), np.shape(y))),
        tau2=lambda x, y: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y))),
        fast_domain=Periodic(2.0 * math.pi),
        x0=np.array([1.0]),
        y0=1.0,
        horizon=1.0,
        regime=Regime(RegimeKind.HOMOGENIZATION, ell=ell),
        slaved_fast=True,
        nu_tau2=0.0,
        name="example1-periodic",
    )


def _example1_closed_form() -> ClosedFormAveragedModel:
    k = _KAPPA
    return ClosedFormAveragedModel(
        m=1, k=1,
        lambda_bar=lambda th, x: -th[0] * k * x,
        q_bar=lambda th, x: np.full(np.shape(x)[:-1] + (1, 1), k),
        grad_x=lambda th, x: np.full(np.shape(x)[:-1] + (1, 1), -th[0] * k),
        grad_theta=lambda th, x: -k * x[..., :, None],
    )


def _example2(ell: Optional[float] = math.inf) -> MultiscaleModel:
    return MultiscaleModel(
        slow_dim=1,
        b=lambda th, x, y: th[0] * np.asarray(y) + 0.0 * np.asarray(x),
        c=lambda th, x, y: th[0] * np.asarray(x) * np.asarray(y) ** 2,
        sigma=lambda x, y: np.ones(np.broadcast_shapes(np.shape(x), np.shape(y))),
        f=lambda th, x, y: -np.asarray(y) / th[0] + 0.0 * np.asarray(x),
        g=lambda th, x, y: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y))),
        tau1=lambda x, y: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y))),
        tau2=lambda x, y: np.ones(np.broadcast_shapes(np.shape(x), np.shape(y))),
        fast_domain=Line(8.0),
        x0=np.array([1.0]),
        y0=1.0,
        horizon=1.0,
        regime=Regime(RegimeKind.HOMOGENIZATION, ell=ell),
        nu_tau2=1.0,
        name="example2-ou",
    )


def _example2_closed_form() -> ClosedFormAveragedModel:
    return ClosedFormAveragedModel(
        m=1, k=1,
        lambda_bar=lambda th, x: 0.5 * th[0] ** 2 * x,
        q_bar=lambda th, x: np.full(np.shape(x)[:-1] + (1, 1), 1.0 + th[0] ** 4),
        grad_x=lambda th, x: np.full(np.shape(x)[:-1] + (1, 1), 0.5 * th[0] ** 2),
        grad_theta=lambda th, x: th[0] * x[..., :, None],
    )


_REGISTRY = {
    "example1-periodic": ModelBundle(
        name="example1-periodic",
        description="periodic fast dependence via Y = X/delta; "
                    "averaged drift -theta*kappa*x",
        build=_example1,
        space=ParameterSpace(np.array([0.05]), np.array([3.5])),
        closed_form=_example1_closed_form,
    ),
    "example2-ou": ModelBundle(
        name="example2-ou",
        description="OU fast variable; averaged drift theta^2 x / 2",
        build=_example2,
        space=ParameterSpace(np.array([0.3]), np.array([3.0])),
        closed_form=_example2_closed_form,
    ),
}

_ALIASES = {
    "example1": "example1-periodic",
    "example2": "example2-ou",
}


def available_models() -> list[str]:
    return sorted(_REGISTRY)


def get_bundle(name: str) -> ModelBundle:
    key = _ALIASES.get(name, name)
    if key not in _REGISTRY:
        raise KeyError("unknown model %r (available: %s)"
                       % (name, ", ".join(available_models())))
    return _REGISTRY[key]


def get_model(name: str, ell: Optional[float] = math.inf) -> MultiscaleModel:
    """Instantiate a registry model with the given second-order rate ell
    (inf disables the drift-correction term)."""
    return get_bundle(name).build(ell)


def get_space(name: str) -> ParameterSpace:
    return get_bundle(name).space
