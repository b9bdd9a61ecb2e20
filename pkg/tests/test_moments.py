from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, linalg

import oracles
from superclt.moments import (assumption21, clt_constants, h_compensator, martingale_constants, mean_Y,
                              second_moment_Y, variance_limits)
from superclt.scenarios import canonical
from superclt.spectral import build_spectral, profile_function, semigroup_apply

S3 = canonical("S3")
SYS3 = build_spectral(S3)


def test_time_zero(s21, spec_of):
    f = np.array([2.0, -1.0])
    mv = second_moment_Y(s21, spec_of(s21), f, 0.0)
    assert mv.mean == 1.0 and mv.second == 1.0 and mv.variance == 0.0


def test_mean_without_immigration_is_semigroup():
    scen = S3.with_(eta=[0.0, 0.0, 0.0], H_atoms=())
    f = np.array([0.2, -1.0, 3.0])
    assert mean_Y(scen, SYS3, f, 1.7) == pytest.approx(float(scen.mu0 @ semigroup_apply(SYS3, 1.7, f)), rel=1e-13)


def test_s1_native_variance(s1, spec_of):
    scen = s1.with_(eta=[0.0])
    e = math.exp(0.5)
    assert second_moment_Y(scen, spec_of(scen), [1.0], 1.0).variance == pytest.approx(2 * e * (e - 1), rel=1e-12)


def test_noise_free_variance_vanishes(det, spec_of):
    mv = second_moment_Y(det, spec_of(det), [1.0, 0.3], 2.0)
    assert mv.variance == 0.0
    assert mv.second == mv.mean ** 2


@pytest.mark.parametrize("f,t", [([1.0, 0.5, 2.0], 1.0), ([0.3, -1.0, 0.0], 2.5)])
def test_terms_against_quadrature_oracle(f, t):
    mv = second_moment_Y(S3, SYS3, f, t)
    ref = oracles.second_moment_terms(oracles.Raw(S3), f, t)
    np.testing.assert_allclose(mv.terms, ref, rtol=1e-8, atol=1e-12)
    assert sum(mv.terms) == pytest.approx(mv.second, rel=1e-14)
    assert mv.mean == pytest.approx(oracles.mean(oracles.Raw(S3), f, t), rel=1e-10)


def test_closed_form_matches_package_quadrature():
    f = np.array([1.0, -2.0, 0.5])
    a = second_moment_Y(S3, SYS3, f, 1.3)
    b = second_moment_Y(S3, SYS3, f, 1.3, method="quadrature")
    assert a.variance == pytest.approx(b.variance, rel=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3), st.floats(0.0, 5.0))
def test_variance_is_nonnegative(f, t):
    mv = second_moment_Y(S3, SYS3, f, t)
    assert mv.variance >= -1e-12 * max(1.0, mv.second)
    assert min(mv.initial_var, mv.immigrant_var, mv.arrival_var) >= -1e-12 * max(1.0, mv.second)


def test_assumption21(s1, det, spec_of):
    m, n = assumption21(s1, spec_of(s1), 1.0)
    assert m == pytest.approx(0.4 * (math.exp(0.5) - 1.0), rel=1e-10)
    assert n == 0.0
    assert assumption21(det, spec_of(det), 1.0) == (0.0, 0.0)


def test_assumption21_with_arrivals():
    # sqrt of the heat-kernel diagonal from expm, independent of the eigen expansion
    def root_diag(s):
        return np.sqrt(np.diag(linalg.expm(2.0 * s * S3.L)) / S3.m)

    im = S3.immigration
    m_ref = integrate.quad(lambda s: float(im.measure @ root_diag(s)), 0.0, 1.0, epsabs=1e-13)[0]
    n_ref = integrate.quad(lambda s: float(np.sum(im.rates * (im.nu_matrix @ root_diag(s)) ** 2)), 0.0, 1.0,
                           epsabs=1e-13)[0]
    m, n = assumption21(S3, SYS3, 1.0)
    assert m == pytest.approx(m_ref, rel=1e-9)
    assert n == pytest.approx(n_ref, rel=1e-9)


def test_limits_vanish_without_noise(det, spec_of):
    sys_ = spec_of(det)
    for k in (1, 2):
        assert variance_limits(det, sys_, profile_function(sys_, sys_.eigenfunction(k))) == 0.0


def test_martingale_constants(s1, spec_of):
    sys_ = spec_of(s1)
    mc = martingale_constants(s1, sys_)
    assert mc.mean_H == pytest.approx(1.0) and mc.mean_W == pytest.approx(1.4)
    assert martingale_constants(s1.with_(eta=[0.0]), sys_).mean_W == pytest.approx(1.0)
    assert martingale_constants(s1, sys_, mu=[0.0]).mean_W == pytest.approx(0.4)


def test_martingale_constants_need_l2(s21, spec_of):
    with pytest.raises(ValueError, match="lambda_1 > 2 lambda_k"):
        martingale_constants(s21, spec_of(s21), k=2)


def test_h_compensator():
    t = np.array([0.0, 1.0, 2.0])
    np.testing.assert_allclose(h_compensator(0.2, -0.5, t), 0.2 * np.expm1(-0.5 * t) / -0.5)
    np.testing.assert_allclose(h_compensator(0.2, 0.0, t), 0.2 * t)


def test_clt_constants_guards(s21, s24, spec_of):
    sys21 = spec_of(s21)
    with pytest.raises(ValueError, match="no critical eigenvalue"):
        clt_constants(s21, sys21, h=sys21.eigenfunction(2))
    with pytest.raises(ValueError, match="C_s"):
        clt_constants(s21, sys21, f=sys21.phi1)
    sub = canonical("S1").with_(a=[-0.5])
    with pytest.raises(ValueError, match="supercritical"):
        clt_constants(sub, build_spectral(sub))
    c = clt_constants(s24, spec_of(s24), h=spec_of(s24).eigenfunction(2))
    assert c.sigma2_f is None and c.beta2_g is None


def test_var_w_matches_oracle_on_s3():
    raw = oracles.Raw(S3)
    c = clt_constants(S3, SYS3)
    assert c.var_Wtilde == pytest.approx(oracles.var_W(raw), rel=1e-8)
    assert c.mean_Wtilde == pytest.approx(oracles.mean_W(raw), rel=1e-12)
