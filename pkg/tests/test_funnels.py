import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from nmpfunnel import FunnelFunction, FunnelSpec
from nmpfunnel.errors import ConfigError
from nmpfunnel.funnels import jet_inner, jet_mul, jet_reciprocal, reciprocal_derivatives

t = sp.Symbol("t")


def sym_jet(expr, t0, order):
    return np.array([float(sp.diff(expr, t, k).subs(t, t0)) for k in range(order + 1)])


def test_jet_product_and_reciprocal_against_sympy():
    f = sp.sin(3 * t) + 2
    g = sp.exp(-t) + t ** 2 + 1
    a, b = sym_jet(f, 0.4, 5), sym_jet(g, 0.4, 5)
    assert np.allclose(jet_mul(a, b), sym_jet(f * g, 0.4, 5), rtol=1e-12)
    assert np.allclose(jet_reciprocal(b), sym_jet(1 / g, 0.4, 5), rtol=1e-12)


def test_jet_inner_against_sympy():
    e1, e2 = sp.cos(t), t ** 3 - t
    e = np.stack([sym_jet(e1, 0.7, 4), sym_jet(e2, 0.7, 4)], axis=1)
    assert np.allclose(jet_inner(e), sym_jet(e1 ** 2 + e2 ** 2, 0.7, 4), rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 5.0), st.floats(0.1, 5.0), st.floats(0.0, 12.0), st.floats(0.01, 2.0))
def test_exponential_phi_derivatives(a, b, t0, c):
    f = FunnelFunction.exponential(a, b, c)
    exact = sym_jet(1 / (a * sp.exp(-b * t) + c), t0, 4)
    assert np.allclose(f.phi_derivatives(t0, 4), exact, rtol=1e-9, atol=1e-12)


def test_phi_derivative_finite_difference():
    f = FunnelFunction.from_expression("2*exp(-10*t) + 0.01")
    h = 1e-6
    for t0 in (0.05, 0.3, 1.0):
        fd = (f.phi(t0 + h) - f.phi(t0 - h)) / (2 * h)
        assert fd == pytest.approx(f.phi(t0, 1), rel=1e-6)


def test_reciprocal_of_constant():
    psi = np.array([[4.0], [0.0], [0.0]])
    assert np.allclose(reciprocal_derivatives(psi)[:, 0], [0.25, 0.0, 0.0])


def test_funnel_constructors_and_audit():
    f = FunnelFunction.exponential(2, 10, 0.01)
    assert f.psi(0.0) == pytest.approx(2.01)
    assert f.inf_psi(10.0) == pytest.approx(0.01)
    assert f.sup_psi(10.0) == pytest.approx(2.01)
    assert f.audit(10.0, 3).passed
    assert FunnelFunction.constant(0.5).psi(3.0, 1) == 0.0
    with pytest.raises(ConfigError):
        FunnelFunction.exponential(1, 1, 0)
    with pytest.raises(ConfigError):
        FunnelFunction.constant(-1)


def test_spec_requires_smoothness():
    rough = FunnelFunction.from_expression("1 + exp(-t)", smoothness=1)
    with pytest.raises(ConfigError):
        FunnelSpec([rough, FunnelFunction.constant(1.0), FunnelFunction.constant(1.0)])
    spec = FunnelSpec([FunnelFunction.constant(1.0), rough])
    assert len(spec) == 2 and spec.psi_table([0.0, 1.0]).shape == (2, 2)
