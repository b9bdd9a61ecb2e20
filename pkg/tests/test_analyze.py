from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest
from scipy import special, stats

import oracles
from superclt.analyze import (MIN_CLT_REPLICATES, Refusal, build_clt_sample, clt_test, kolmogorov_sf,
                              ks_statistic, ks_two_sample, lln_test, martingale_test, normal_cdf)
from superclt.moments import clt_constants, martingale_constants
from superclt.rng import seed_stream
from superclt.schema import JSON_KEYS
from superclt.simulate import SimConfig, simulate_ensemble
from superclt.spectral import profile_function


def uniform_cdf(x):
    return np.clip(x, 0.0, 1.0)


def test_kolmogorov_series_against_scipy():
    for x in np.concatenate([np.linspace(0.05, 3.0, 60), [0.999, 1.0, 1.001]]):
        assert kolmogorov_sf(float(x)) == pytest.approx(oracles.kolmogorov_sf(float(x)), abs=1e-9)
    assert kolmogorov_sf(0.0) == 1.0
    # 99% quantile used by the conforming-stream check
    assert kolmogorov_sf(1.63) < 0.01 < kolmogorov_sf(1.62)


def test_conforming_stream():
    u = seed_stream(2024, 0).random(10_000)
    x = special.ndtri(u)                     # inverse transform
    D, p = ks_statistic(x, normal_cdf(1.0))
    assert D * math.sqrt(x.size) < 1.63
    assert p > 0.01
    assert D == pytest.approx(stats.kstest(x, "norm").statistic, abs=1e-15)


def test_constant_sample():
    D, _ = ks_statistic(np.full(100, 0.3), normal_cdf(1.0))
    assert D >= 0.5


def test_quantile_grid():
    N = 200
    grid = (np.arange(1, N + 1) - 0.5) / N
    D, _ = ks_statistic(grid, uniform_cdf)
    assert D == pytest.approx(0.5 / N, abs=1e-15)


def test_two_sample_against_scipy():
    rng = seed_stream(1, 0)
    a, b = rng.normal(size=3000), rng.normal(0.05, 1.0, size=5000)
    assert ks_two_sample(a, b)[0] == pytest.approx(stats.ks_2samp(a, b).statistic, abs=1e-15)
    ties_a, ties_b = np.repeat([0.0, 1.0, 2.0], 10), np.repeat([0.0, 1.0, 2.0, 3.0], 5)
    assert ks_two_sample(ties_a, ties_b)[0] == pytest.approx(stats.ks_2samp(ties_a, ties_b).statistic)


def test_ks_input_checks():
    with pytest.raises(ValueError, match="non-finite"):
        ks_statistic([0.1] * 9 + [math.nan], uniform_cdf)
    with pytest.raises(ValueError, match="at least 8"):
        ks_statistic([0.1, 0.2], uniform_cdf)


@pytest.fixture(scope="module")
def det_ensemble(det):
    return simulate_ensemble(det, SimConfig(0.05, (1.0, 2.0, 4.0, 8.0), MIN_CLT_REPLICATES, 0))


def test_martingale_noise_free(det, det_ensemble, spec_of):
    sys_ = spec_of(det)
    mc = martingale_constants(det, sys_)
    v = martingale_test(det_ensemble, sys_, 1, 1, 0.0, mc.mean_H)
    assert v.passed
    assert v.statistics["slope_se"] == pytest.approx(0.0, abs=1e-12)


def test_martingale_refusals(det, det_ensemble, spec_of):
    sys_ = spec_of(det)
    small = simulate_ensemble(det, SimConfig(0.05, (1.0, 2.0, 4.0), 999, 0))
    with pytest.raises(Refusal, match="insufficient replicates"):
        martingale_test(small, sys_, 1, 1, 0.0, math.sqrt(2.0))
    two = simulate_ensemble(det, SimConfig(0.05, (1.0, 2.0), 1000, 0))
    with pytest.raises(Refusal, match="3 snapshots"):
        martingale_test(two, sys_, 1, 1, 0.0, math.sqrt(2.0))


def test_martingale_negative_control_s1(s1, spec_of):
    sys_ = spec_of(s1)
    ens = simulate_ensemble(s1, SimConfig(0.01, (1.0, 2.0, 4.0, 8.0), 5000, 3))
    g = s1.immigration.gamma(sys_.phi1)
    assert martingale_test(ens, sys_, 1, 1, g, 1.0).passed
    assert not martingale_test(ens, sys_, 1, 1, g, 1.0, correction_sign=-1.0).passed


def test_lln_noise_free_and_class_guard(det, det_ensemble, s21, spec_of):
    sys_ = spec_of(det)
    assert lln_test(det_ensemble, sys_, profile_function(sys_, sys_.phi1), 2.0, 4.0, 8.0).passed
    sys21 = spec_of(s21)
    with pytest.raises(Refusal, match="lambda_1 > 2 lambda_gamma"):
        lln_test(det_ensemble, sys21, profile_function(sys21, sys21.eigenfunction(2)), 2.0, 4.0, 8.0)


def test_clt_noise_free_degenerate_pass(det, spec_of):
    sys_ = spec_of(det)
    ens = simulate_ensemble(det, SimConfig(0.05, (4.0, 8.0), MIN_CLT_REPLICATES, 0))
    # D has no immigration, so phi2 of the two-site chain is small-class (lambda_2 = 1)
    f = profile_function(sys_, sys_.eigenfunction(2))
    g = profile_function(sys_, sys_.phi1)
    c = clt_constants(det, sys_, f=f, g=g)
    assert c.sigma2_f == 0.0 and c.beta2_g == 0.0 and c.var_Wtilde == 0.0
    v = clt_test(ens, sys_, c, 4.0, 4.0, f=f, g=g)
    assert v.passed
    cs = build_clt_sample(ens, sys_, 4.0, 4.0, f=f, g=g)
    np.testing.assert_allclose(cs.U_f, 0.0, atol=1e-12)
    np.testing.assert_allclose(cs.U_g, 0.0, atol=1e-12)


@pytest.fixture(scope="module")
def s21_clt(s21, spec_of):
    sys_ = spec_of(s21)
    ens = simulate_ensemble(s21, SimConfig(0.02, (6.0, 12.0), MIN_CLT_REPLICATES, 5))
    f = profile_function(sys_, sys_.eigenfunction(2), "phi2")
    g = profile_function(sys_, sys_.phi1, "phi1")
    return sys_, ens, f, g, clt_constants(s21, sys_, f=f, g=g)


def test_clt_is_deterministic(s21_clt):
    sys_, ens, f, g, c = s21_clt
    a = clt_test(ens, sys_, c, 6.0, 6.0, f=f, g=g).to_dict()
    b = clt_test(ens, sys_, c, 6.0, 6.0, f=f, g=g).to_dict()
    assert a == b
    assert set(a) | {"schema_version"} == set(JSON_KEYS["verdict"])


def test_clt_correlation_bound_and_exclusions(s21_clt):
    sys_, ens, f, g, c = s21_clt
    v = clt_test(ens, sys_, c, 6.0, 6.0, f=f, g=g)
    N = v.statistics["N"]
    corr_checks = [ch for ch in v.checks if ch.name.startswith("corr(")]
    assert len(corr_checks) == 3
    assert all(ch.threshold == pytest.approx(3.0 / math.sqrt(N)) for ch in corr_checks)
    assert v.statistics["excluded"] == 0


def test_clt_refusals(s21_clt):
    sys_, ens, f, g, c = s21_clt
    with pytest.raises(Refusal, match="insufficient replicates"):
        clt_test(ens, sys_, c, 6.0, 6.0, f=f, g=g, min_replicates=MIN_CLT_REPLICATES + 1)
    with pytest.raises(Refusal, match="no critical eigenspace"):
        clt_test(ens, sys_, c, 6.0, 6.0, h=f)
    with pytest.raises(Refusal, match="f must be in C_s"):
        clt_test(ens, sys_, c, 6.0, 6.0, f=g)


def test_clt_doubled_variance_is_rejected(s21_clt):
    sys_, ens, f, g, c = s21_clt
    bad = dataclasses.replace(c, sigma2_f=2.0 * c.sigma2_f)
    assert not clt_test(ens, sys_, bad, 6.0, 6.0, f=f, g=g).passed
