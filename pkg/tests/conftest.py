import math

import numpy as np
import pytest

from mcontrast import (
    ClosedFormAveragedModel,
    Line,
    MultiscaleModel,
    ParameterSpace,
    Regime,
    RegimeKind,
    build_averaged_model,
    get_bundle,
    get_model,
    get_space,
)


@pytest.fixture(scope="session")
def ex1_model():
    return get_model("example1-periodic", ell=1.0)


@pytest.fixture(scope="session")
def ex2_model():
    return get_model("example2-ou")


@pytest.fixture(scope="session")
def ex1_avg(ex1_model):
    return build_averaged_model(ex1_model, get_space("example1-periodic"))


@pytest.fixture(scope="session")
def ex2_avg(ex2_model):
    return build_averaged_model(ex2_model, get_space("example2-ou"))


@pytest.fixture(scope="session")
def ex1_closed():
    return get_bundle("example1-periodic").closed_form()


@pytest.fixture(scope="session")
def ex2_closed():
    return get_bundle("example2-ou").closed_form()


def linear_closed_form(a: float, q: float, dgrad=None):
    """Scalar model with lambda_bar = a(theta) * x, constant diffusion q.

    ``a`` is the coefficient at theta = 1; the drift is theta * a * x so
    the theta-gradient is a * x (dgrad overrides it).
    """
    return ClosedFormAveragedModel(
        m=1, k=1,
        lambda_bar=lambda th, x: th[0] * a * x,
        q_bar=lambda th, x: np.full(np.shape(x)[:-1] + (1, 1), q),
        grad_x=lambda th, x: np.full(np.shape(x)[:-1] + (1, 1), th[0] * a),
        grad_theta=dgrad if dgrad is not None else (lambda th, x: a * x[..., :, None]),
    )


def gamma_test_model(gamma=2.0, ell=4.0):
    """Averaging-regime model with closed-form averages.

    b = theta y^2, c = -x, f = -y, g = 0, sigma = 1, tau2 = sqrt(2):
    the frozen law is N(0, 1) for every gamma, Phi = (theta/2)(y^2 - 1),
    lambda_bar = gamma theta - x, q_bar = 1 + 2 theta^2,
    J_bar = theta / ell.
    """
    return MultiscaleModel(
        slow_dim=1,
        b=lambda th, x, y: th[0] * np.asarray(y) ** 2 + 0.0 * np.asarray(x),
        c=lambda th, x, y: -np.asarray(x) + 0.0 * np.asarray(y),
        sigma=lambda x, y: np.ones(np.broadcast_shapes(np.shape(x), np.shape(y))),
        f=lambda th, x, y: -np.asarray(y) + 0.0 * np.asarray(x),
        g=lambda th, x, y: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y))),
        tau1=lambda x, y: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y))),
        tau2=lambda x, y: math.sqrt(2.0)
        * np.ones(np.broadcast_shapes(np.shape(x), np.shape(y))),
        fast_domain=Line(8.0),
        x0=np.array([1.0]),
        y0=0.0,
        horizon=1.0,
        regime=Regime(RegimeKind.AVERAGING, gamma=gamma, ell=ell),
        nu_tau2=2.0,
        name="gamma-test",
    )


def skew_correction_model(ell=2.0):
    """Homogenization-regime model with a nonzero drift correction.

    f = -y, tau2 = 1 (frozen law N(0, 1/2)), b = y (chi = y), g = y^2 + y,
    c = 0: lambda = chi' g + c = y^2 + y, lambda_bar = 1/2,
    Phi = y^2/2 + y (centered), q_bar = E[(1 + 0)^2 sigma...] with sigma=1,
    tau1=0: q = 1 + (chi')^2 = 2, J_bar = E[(y+1)(y^2+y)]/ell = 1/ell.
    """
    return MultiscaleModel(
        slow_dim=1,
        b=lambda th, x, y: np.asarray(y) + 0.0 * np.asarray(x),
        c=lambda th, x, y: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y))),
        sigma=lambda x, y: np.ones(np.broadcast_shapes(np.shape(x), np.shape(y))),
        f=lambda th, x, y: -np.asarray(y) + 0.0 * np.asarray(x),
        g=lambda th, x, y: np.asarray(y) ** 2 + np.asarray(y) + 0.0 * np.asarray(x),
        tau1=lambda x, y: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y))),
        tau2=lambda x, y: np.ones(np.broadcast_shapes(np.shape(x), np.shape(y))),
        fast_domain=Line(8.0),
        x0=np.array([0.5]),
        y0=0.0,
        horizon=1.0,
        regime=Regime(RegimeKind.HOMOGENIZATION, ell=ell),
        nu_tau2=1.0,
        name="skew-correction",
    )


def unit_space():
    return ParameterSpace(np.array([0.2]), np.array([3.0]))
