import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from hawkeslab.errors import (DivergentIntegralError, InvalidKernelError, NonpositiveMarkError,
                              ServiceRateMismatchError, UnreachableDepartureError)
from hawkeslab.model import (Kernel, MarkDistribution, NetworkModel, ServiceDistribution, kernel_l1,
                             spectral_radius, stability_check, validate_network)

from conftest import markov_model


def test_kernel_l1_examples():
    assert kernel_l1(Kernel.exponential(1.0, 0.5)) == pytest.approx(0.5, rel=1e-12)
    assert kernel_l1(Kernel.zero()) == 0.0
    assert kernel_l1(Kernel.piecewise_constant([0, 1, 5], [2, 0])) == pytest.approx(2.0, rel=1e-12)


def test_power_law_l1_against_quadrature():
    k = Kernel.power_law(2.5, 0.7, 1.3)
    direct, _ = integrate.quad(lambda t: float(k(t)), 0, np.inf, limit=400, epsabs=1e-13)
    assert kernel_l1(k) == pytest.approx(direct, rel=1e-8)


def test_power_law_divergent():
    with pytest.raises(DivergentIntegralError):
        kernel_l1(Kernel.power_law(0.9, 1.0, 1.0))


@given(rate=st.floats(0.05, 20), scale=st.floats(0, 10),
       t=st.lists(st.floats(-5, 50), min_size=1, max_size=20))
def test_kernel_nonnegative_and_causal(rate, scale, t):
    k = Kernel.exponential(rate, scale)
    v = k(np.asarray(t))
    assert np.all(v >= 0)
    assert np.all(v[np.asarray(t) < 0] == 0)
    assert kernel_l1(k) == pytest.approx(scale / rate, rel=1e-12, abs=1e-300)


@given(y=st.floats(0.0, 0.999))
def test_exponential_inverse_integral(y):
    k = Kernel.exponential(1.7, 2.0)
    total = k.l1
    t = k.inverse_integral(y * total)
    assert float(k.integral(t)) == pytest.approx(y * total, rel=1e-9, abs=1e-12)


def test_invalid_kernels():
    with pytest.raises(InvalidKernelError):
        Kernel.exponential(0.0, 1.0)
    with pytest.raises(InvalidKernelError):
        Kernel.piecewise_constant([0, 1], [1, 2])
    with pytest.raises(InvalidKernelError):
        Kernel.piecewise_constant([0.5, 1], [1])


def test_mark_moments():
    assert MarkDistribution.deterministic(2.0).b2 == 4.0
    assert MarkDistribution.exponential(2.0).b2 == pytest.approx(0.5)
    g = MarkDistribution.gamma(3.0, 2.0)
    assert (g.b1, g.b2) == pytest.approx((1.5, 3.0))
    b = MarkDistribution.beta(3.5, 1.5)
    assert b.b1 == pytest.approx(0.7)
    p = MarkDistribution.pareto(1.5, 1.0)
    assert math.isfinite(p.b1) and math.isinf(p.b2)


@pytest.mark.parametrize("mark", [MarkDistribution.exponential(2.0), MarkDistribution.gamma(2.5, 1.5),
                                  MarkDistribution.beta(3.5, 1.5), MarkDistribution.pareto(2.5, 0.4)])
def test_mark_samples_positive_with_right_mean(mark, rng):
    x = mark.sample(rng, 200_000)
    assert np.all(x > 0)
    assert abs(x.mean() - mark.b1) < 5 * x.std() / math.sqrt(x.size)


@pytest.mark.parametrize("mark", [MarkDistribution.exponential(2.0), MarkDistribution.gamma(2.5, 1.5),
                                  MarkDistribution.deterministic(0.7)])
def test_mark_laplace_against_samples(mark, rng):
    x = mark.sample(rng, 200_000)
    for s in (0.3, 1.0):
        assert float(mark.laplace(s)) == pytest.approx(np.exp(-s * x).mean(), abs=0.005)


def test_service_distributions():
    e = ServiceDistribution.exponential(2.0)
    assert e.mean == 0.5
    assert float(e.survival(1.0)) == pytest.approx(math.exp(-2.0))
    d = ServiceDistribution.deterministic(1.5)
    assert float(d.survival(1.4)) == 1.0 and float(d.survival(1.6)) == 0.0
    ln = ServiceDistribution.lognormal(0.1, 0.5)
    assert ln.mean == pytest.approx(math.exp(0.1 + 0.125))
    assert float(ln.cdf(ln.quantile(0.3))) == pytest.approx(0.3)


def test_stability_examples():
    r, ok = stability_check(markov_model(r=2.0))
    assert r == pytest.approx(0.5, abs=1e-12) and ok
    r, ok = stability_check(NetworkModel.univariate(1.0, Kernel.zero()))
    assert r == 0.0 and ok
    k = Kernel.exponential(1.0, 0.6)
    m = NetworkModel(2, (1, 1), ((k, k), (k, k)), ((MarkDistribution.deterministic(1.0),) * 2,) * 2,
                     (ServiceDistribution.exponential(1.0),) * 2, (1, 1), ((0, 0), (0, 0)))
    r, ok = stability_check(m)
    assert r == pytest.approx(1.2, abs=1e-10) and not ok


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 3), min_size=9, max_size=9))
def test_spectral_radius_matches_eigvals(entries):
    H = np.array(entries).reshape(3, 3)
    expect = max(abs(np.linalg.eigvals(H))) if H.any() else 0.0
    assert spectral_radius(H) == pytest.approx(expect, rel=1e-8, abs=1e-9)


def test_spectral_radius_periodic_matrix():
    H = np.array([[0.0, 2.0], [0.5, 0.0]])
    assert spectral_radius(H) == pytest.approx(1.0, abs=1e-10)


def test_ephemeral_branching_uses_presence_window():
    # E int_0^J e^{-t} dt with J ~ Exp(1) equals 1/2
    m = NetworkModel.univariate(1.0, Kernel.exponential(1.0), mode="ephemeral")
    assert m.branching_matrix()[0, 0] == pytest.approx(0.5, rel=1e-8)


def _relay(mu, route, services):
    z = Kernel.zero()
    one = MarkDistribution.deterministic(1.0)
    return NetworkModel(2, (1, 0), ((z, z), (z, z)), ((one, one), (one, one)), services, mu, route)


def test_validate_reachability():
    exp1 = ServiceDistribution.exponential(1.0)
    validate_network(_relay((0, 1), ((0, 0), (1, 0)), (exp1, exp1)))
    with pytest.raises(UnreachableDepartureError):
        validate_network(_relay((0, 1), ((0, 0), (0, 0)), (exp1, exp1)))
    with pytest.raises(ServiceRateMismatchError):
        validate_network(_relay((0, 1), ((0, 0), (1, 0)), (ServiceDistribution.exponential(3.0), exp1)))


def test_nonpositive_mark_rejected():
    with pytest.raises((NonpositiveMarkError, ValueError)):
        MarkDistribution.deterministic(0.0)
