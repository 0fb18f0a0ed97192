import numpy as np
import pytest

from mcontrast.quadrature import (
    cumulative_integral,
    derivative,
    simpson_weights,
    trapezoid_weights,
)


def test_trapezoid_weights_sum():
    w = trapezoid_weights(11, 0.1)
    assert w.sum() == pytest.approx(1.0)
    assert w[0] == w[-1] == pytest.approx(0.05)


def test_simpson_weights_integrate_cubic_exactly():
    x = np.linspace(0.0, 2.0, 9)
    w = simpson_weights(9, x[1] - x[0])
    f = x ** 3 - 2 * x ** 2 + x
    exact = 2.0 ** 4 / 4 - 2 * 2.0 ** 3 / 3 + 2.0 ** 2 / 2
    assert w @ f == pytest.approx(exact, abs=1e-14)


def test_simpson_weights_even_count_falls_back():
    w = simpson_weights(4, 0.5)
    assert w.sum() == pytest.approx(1.5)


def test_cumulative_integral_polynomial_exact():
    # the rule integrates cubics exactly
    x = np.linspace(-1.0, 2.0, 31)
    f = 3 * x ** 3 - x + 2
    F = cumulative_integral(f, x[1] - x[0])
    exact = (3 * x ** 4 / 4 - x ** 2 / 2 + 2 * x)
    exact -= exact[0]
    assert np.max(np.abs(F - exact)) < 1e-13


def test_cumulative_integral_fourth_order():
    errs = []
    for n in (64, 128):
        x = np.linspace(0.0, np.pi, n + 1)
        F = cumulative_integral(np.sin(x), x[1] - x[0])
        errs.append(np.max(np.abs(F - (1 - np.cos(x)))))
    rate = np.log2(errs[0] / errs[1])
    assert rate > 3.7


def test_cumulative_integral_batched():
    x = np.linspace(0.0, 1.0, 21)
    f = np.stack([x, x ** 2])
    F = cumulative_integral(f, x[1] - x[0])
    assert F.shape == (2, 21)
    assert F[0, -1] == pytest.approx(0.5, abs=1e-12)
    assert F[1, -1] == pytest.approx(1.0 / 3.0, abs=1e-12)


def test_derivative_line_and_periodic():
    x = np.linspace(0.0, 2 * np.pi, 257)
    d = derivative(np.sin(x), x[1] - x[0], periodic=True)
    assert np.max(np.abs(d - np.cos(x))) < 5e-8
    d2 = derivative(np.exp(x[:65]), x[1] - x[0])
    assert np.max(np.abs(d2 - np.exp(x[:65])) / np.exp(x[:65])) < 1e-7
