import numpy as np
import pytest
from types import SimpleNamespace

from conftest import am_reference_lagrange, integrate_decay_am
from sewerflow.discretize import AMScheme, am_coefficients, delayed_index, stencil_residual


def test_order_1_is_trapezoid():
    s = am_coefficients(1)
    assert s.steps == 1
    np.testing.assert_allclose(s.alpha, [0.5, 0.5], atol=1e-14)


def test_order_3_coefficients():
    s = am_coefficients(3)
    np.testing.assert_allclose(s.alpha, [5 / 12, 8 / 12, -1 / 12], atol=1e-13)


def test_order_2_and_4():
    np.testing.assert_allclose(am_coefficients(2).alpha, [0.5, 0.5], atol=1e-14)
    np.testing.assert_allclose(
        am_coefficients(4).alpha, [3 / 8, 19 / 24, -5 / 24, 1 / 24], atol=1e-13)


@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_against_lagrange_oracle(order):
    s = am_coefficients(order)
    np.testing.assert_allclose(s.alpha, am_reference_lagrange(s.steps), atol=1e-13)


@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_consistency_sum(order):
    assert abs(sum(am_coefficients(order).alpha) - 1.0) <= 1e-14


@pytest.mark.parametrize("bad", [0, 5, -1, 2.5, "3"])
def test_unsupported_orders(bad):
    with pytest.raises(ValueError):
        am_coefficients(bad)


def test_scheme_rejects_inconsistent_alpha():
    with pytest.raises(ValueError):
        AMScheme(order=1, alpha=(0.5, 0.6))


def test_residual_constant_state():
    s = am_coefficients(3)
    assert stencil_residual(s, [4.0, 4.0], [0.0, 0.0, 0.0], 0.7) == 0.0


@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_residual_linear_state(order):
    # v(t) = t with derivative 1 satisfies every consistent scheme
    s = am_coefficients(order)
    delta = 0.31
    ts = np.arange(10) * delta
    r = stencil_residual(s, ts, np.ones(10), delta)
    assert abs(r) < 1e-14


def test_residual_cubic_exact_order3():
    s = am_coefficients(3)
    delta = 0.7
    ts = np.arange(8) * delta + 1.3
    r = stencil_residual(s, ts**3, 3 * ts**2, delta)
    assert abs(r) < 1e-11 * max(abs(ts[-1] ** 3), 1)


def test_residual_quartic_orders():
    delta = 0.5
    ts = np.arange(8) * delta + 0.9
    # quartic is beyond order 3's accuracy but inside order 4's
    r3 = stencil_residual(am_coefficients(3), ts**4, 4 * ts**3, delta)
    r4 = stencil_residual(am_coefficients(4), ts**4, 4 * ts**3, delta)
    assert abs(r3) > 1e-6
    assert abs(r4) < 1e-10


def test_residual_insufficient_history():
    with pytest.raises(ValueError):
        stencil_residual(am_coefficients(3), [1.0, 2.0], [0.1], 0.5)


def test_delayed_index_examples():
    p0 = SimpleNamespace(delay_steps=0)
    assert delayed_index(7, p0, 4) == 7
    p5 = SimpleNamespace(delay_steps=5)
    assert delayed_index(2, p5, 4) == -3
    p6 = SimpleNamespace(delay_steps=6)
    with pytest.raises(IndexError):
        delayed_index(0, p6, 4)


def test_order_verification_decay():
    # halving delta: order-3 scheme shrinks max error by ~8, trapezoid by ~4
    e3a = integrate_decay_am(am_coefficients(3), 0.02)
    e3b = integrate_decay_am(am_coefficients(3), 0.01)
    assert 6.0 <= e3a / e3b <= 10.0
    e1a = integrate_decay_am(am_coefficients(1), 0.02)
    e1b = integrate_decay_am(am_coefficients(1), 0.01)
    assert 3.5 <= e1a / e1b <= 4.5
