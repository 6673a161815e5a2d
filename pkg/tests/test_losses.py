"""Loss family machinery vs high-precision (mpmath) oracles."""

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marginflow import losses

mp.mp.dps = 60


def mp_logistic_f(q):
    return -mp.log(mp.log1p(mp.e**(-mp.mpf(q))))


def mp_logistic_g(x):
    return -mp.log(mp.expm1(mp.e**(-mp.mpf(x))))


def test_exponential_identities():
    spec = losses.make_exponential()
    assert spec.f(3.0) == 3.0
    assert spec.g(3.0) == 3.0
    assert spec.separability_threshold == 1.0
    assert float(spec.ell(0.0)) == 1.0
    assert abs(float(spec.ell_inv(np.exp(-5.0))) - 5.0) < 1e-12
    assert spec.f_prime(7.0) == 1.0 and spec.g_prime(7.0) == 1.0


def test_logistic_threshold_and_gprime_tail():
    spec = losses.make_logistic()
    assert abs(spec.separability_threshold - np.log(2.0)) < 1e-12
    assert abs(float(spec.g_prime(40.0)) - 1.0) < 1e-10
    assert abs(float(spec.g(spec.f(1.0))) - 1.0) < 1e-10


@pytest.mark.parametrize("q", [-50.0, -3.0, -0.5, 0.0, 0.7, 3.0, 25.0, 80.0, 400.0, 700.0])
def test_logistic_f_matches_mpmath(q):
    spec = losses.make_logistic()
    ref = float(mp_logistic_f(q))
    assert abs(float(spec.f(q)) - ref) <= 1e-13 * max(1.0, abs(ref))
    ref_p = float(mp.diff(mp_logistic_f, mp.mpf(q)))
    assert abs(float(spec.f_prime(q)) - ref_p) <= 1e-12 * max(1.0, abs(ref_p))


@pytest.mark.parametrize("x", [0.4, 0.7, 1.0, 5.0, 29.0, 31.0, 120.0, 700.0])
def test_logistic_g_matches_mpmath(x):
    spec = losses.make_logistic()
    ref = float(mp_logistic_g(x))
    assert abs(float(spec.g(x)) - ref) <= 1e-13 * max(1.0, abs(ref))
    ref_p = float(mp.diff(mp_logistic_g, mp.mpf(x)))
    assert abs(float(spec.g_prime(x)) - ref_p) <= 1e-12


def test_log_domain_entry_points_stay_finite():
    # losses near e^{-2000} exist only as x = log(1/loss)
    for name in ("exp", "logistic", "exp_cubed"):
        spec = losses.get_loss(name)
        x = 2000.0
        assert np.isfinite(spec.g(x)) and np.isfinite(spec.g_prime(x))
        assert np.isfinite(losses.lambda_from_log_inv_loss(spec, x))


def test_lambda_of_loss():
    exp = losses.make_exponential()
    assert abs(losses.lambda_of_loss(exp, np.exp(-10.0)) - 0.1) < 1e-14
    logi = losses.make_logistic()
    x = 200.0 * np.log(10.0)
    lam = float(losses.lambda_from_log_inv_loss(logi, x))
    assert abs(lam * x - 1.0) < 1e-3
    with pytest.raises(losses.LossDomainError):
        losses.lambda_of_loss(exp, 1.0)
    with pytest.raises(losses.LossDomainError):
        losses.lambda_of_loss(logi, logi.separability_threshold)


def test_g_domain_error_below_threshold():
    spec = losses.make_logistic()
    with pytest.raises(losses.LossDomainError):
        spec.g(0.2)  # below f(b_f) = -log log 2 ~ 0.3665


def test_validate_b3_builtin_families():
    for name in ("exp", "logistic", "exp_cubed"):
        report = losses.validate_b3(losses.get_loss(name))
        assert report.ok, (name, report.failures())


def test_validate_b3_catches_polynomial_tail():
    # f(q) = log(1+q) has f'(q)q -> 1, so the divergence clause must fail
    bad = losses.make_custom(
        "poly_tail", lambda q: np.log1p(np.maximum(q, 0.0)),
        lambda q: 1.0 / (1.0 + np.maximum(q, 0.0)),
    )
    report = losses.validate_b3(bad)
    assert not report.ok
    assert any(c.clause == "fq_diverges" for c in report.failures())


def test_b34_ratio_window_logistic():
    spec = losses.make_logistic()
    xs = np.geomspace(10.0, 600.0, 100)
    ratio = spec.g_prime(xs) / spec.g_prime(xs / 2.0)
    assert np.all(ratio <= spec.K) and np.all(ratio >= 1.0 / spec.K)


def test_exp_cubed_constants():
    spec = losses.get_loss("exp_cubed")
    assert spec.K == 2.0**spec.p
    q = np.array([1.5, 2.0])
    assert np.allclose(spec.g(spec.f(q)), q, rtol=1e-12)
    assert np.allclose(spec.g_prime(8.0), 1.0 / 12.0)  # 1/(3*8^{2/3})


def test_custom_loss_bisection_inverse():
    quad = losses.make_custom("exp_sq", lambda q: np.asarray(q, float) ** 2,
                              lambda q: 2.0 * np.asarray(q, float))
    assert abs(float(quad.g(4.0)) - 2.0) < 1e-11
    assert abs(float(quad.g_prime(4.0)) - 0.25) < 1e-10
    xs = np.array([0.5, 2.0, 9.0])
    assert np.allclose(quad.f(quad.g(xs)), xs, rtol=1e-11)


@settings(max_examples=60, deadline=None)
@given(q=st.floats(0.11, 50.0))
def test_roundtrip_property(q):
    for name in ("logistic", "exp_cubed"):
        spec = losses.get_loss(name)
        assert abs(float(spec.g(spec.f(q))) - q) <= 1e-9 * max(1.0, q)
        x = float(spec.f(q))
        assert abs(float(spec.f(spec.g(x))) - x) <= 1e-9 * max(1.0, abs(x))


def test_get_loss_registry():
    assert losses.get_loss("cross_entropy").name == "cross_entropy"
    with pytest.raises(ValueError):
        losses.get_loss("hinge")
