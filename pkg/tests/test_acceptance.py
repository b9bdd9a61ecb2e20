"""The ten acceptance criteria, each at its stated size and tolerance.

Monte Carlo seeds are the ones the full battery derives from master seed 0, so
each criterion here reproduces the corresponding battery entry.
"""
from __future__ import annotations

import dataclasses
import json
import math
import time

import numpy as np
import pytest

from superclt import battery as bat
from superclt.analyze import clt_test, lln_test, martingale_test
from superclt.cli import main
from superclt.moments import clt_constants, martingale_constants, mean_Y, beta2, rho2, sigma2
from superclt.simulate import SimConfig, bias_study, decomposition_ensemble, simulate_ensemble
from superclt.spectral import profile_function
from test_oracles import FROZEN

PLAN = bat.BatteryPlan()
MASTER_SEED = 0
R2 = 1.0 / math.sqrt(2.0)


def failed_names(v) -> list[str]:
    return [c.name for c in v.checks if not c.passed]


def summary(results: dict) -> str:
    return "; ".join(f"{k}: {'ok' if not bad else 'failed ' + ', '.join(bad[:4])}" for k, bad in results.items())


# -- exact engines ---------------------------------------------------------------

def test_1_laplace_fd_reproduces_closed_form_moments(s1, s21, spec_of, report_criterion):
    start = time.perf_counter()
    res = {}
    for scen in (s1, s21):
        v = bat.laplace_moment_check(scen, spec_of(scen), times=(0.5, 1.0, 2.0), mean_rel=1e-4, second_rel=1e-3)
        worst = max(c.value for c in v.checks)
        res[f"{scen.name} (worst relative error {worst:.1e})"] = failed_names(v)
    elapsed = time.perf_counter() - start
    ok = not any(res.values()) and elapsed < 5.0
    report_criterion(1, "Laplace finite differences vs closed-form moments", ok,
                     f"{summary(res)}; {elapsed:.2f} s (limit 5 s)")
    assert ok


def test_2_closed_form_spot_values(s1, s21, s24, spec_of, report_criterion):
    start = time.perf_counter()
    sys1, sys21, sys24 = spec_of(s1), spec_of(s21), spec_of(s24)
    phi2 = np.array([R2, -R2])
    got = {
        "mean_S1_t1": (mean_Y(s1, sys1, [1.0], 1.0), 1e-9),
        "sigma2_S21_phi2": (sigma2(s21, sys21, profile_function(sys21, phi2)), 1e-8),
        "rho2_S24_phi2": (rho2(s24, sys24, profile_function(sys24, phi2)), 1e-12),
        "beta2_S1_phi1": (beta2(s1, sys1, profile_function(sys1, [1.0])), 1e-9),
    }
    elapsed = time.perf_counter() - start
    errs = {k: abs(v - FROZEN[k]) for k, (v, _) in got.items()}
    bad = [k for k, (_, tol) in got.items() if not errs[k] <= tol]
    ok = not bad and elapsed < 1.0
    detail = ", ".join(f"{k} err {errs[k]:.1e}" for k in got)
    report_criterion(2, "closed-form spot values vs brute-force oracle", ok,
                     f"{detail}; mean checked against its closed form e^0.5 + 0.4(e^0.5 - 1); {elapsed:.3f} s")
    assert ok, bad


def test_3_large_time_asymptotics(s1, s21, s24, s25, spec_of, report_criterion):
    start = time.perf_counter()
    cases = [(s21, 2, "C_s"), (s1, 1, "C_l"), (s21, 1, "C_l"), (s25, 1, "C_l"), (s25, 2, "C_l"),
             (s24, 2, "C_c")]
    res = {}
    for scen, k, cls in cases:
        sys_ = spec_of(scen)
        v = bat.asymptotic_check(scen, sys_, sys_.eigenfunction(k), f"phi{k}")
        assert v.inputs["class"] == cls
        c = v.checks[0]
        res[f"{scen.name} phi{k} {cls} ({c.name} {c.value:.3e})"] = failed_names(v)
    elapsed = time.perf_counter() - start
    ok = not any(res.values()) and elapsed < 10.0
    report_criterion(3, "rescaled moments vs large-time limits", ok, f"{summary(res)}; {elapsed:.2f} s")
    assert ok


# -- simulation against exact values ---------------------------------------------------

@pytest.fixture(scope="module")
def full_runs(s1, s21, spec_of):
    out = {}
    for scen in (s1, s21):
        cfg = SimConfig(PLAN.sim_dt, PLAN.sim_times, PLAN.sim_replicates, bat._seed_for(MASTER_SEED, scen, 1))
        out[scen.name] = (scen, cfg, simulate_ensemble(scen, cfg, spec_of(scen)))
    return out


@pytest.mark.slow
def test_4_simulator_vs_exact_moments(full_runs, spec_of, report_criterion):
    res = {}
    unresolved = []
    for name, (scen, cfg, ens) in full_runs.items():
        assert ens.replicates == 200_000 and cfg.dt == 0.005
        sys_ = spec_of(scen)
        v = bat.moment_match(ens, scen, sys_, bat.named_functions(sys_), cfg.t_snapshots)
        res[f"{name} ({len(v.checks)} checks)"] = failed_names(v)
        unresolved += v.statistics["unresolved"]
    ok = not any(res.values()) and not unresolved
    report_criterion(4, "simulated mean, variance and Laplace data within 3.5 SE", ok,
                     f"{summary(res)}; unresolved Laplace values: {len(unresolved)}")
    assert ok


@pytest.mark.slow
def test_5_scheme_bias_decreases(report_criterion):
    bs = bias_study(n_scheme=PLAN.bias_n_scheme, n_exact=PLAN.bias_n_exact, master_seed=MASTER_SEED)
    small = bias_study(n_scheme=100_000, n_exact=100_000, dts=(0.005,), master_seed=MASTER_SEED + 1)
    ok = bs.monotone and bs.ks[-1] < 0.01 and small.ks[-1] < 0.01
    ks = ", ".join(f"{d:g}: {k:.4f}" for d, k in zip(bs.dts, bs.ks))
    report_criterion(5, "scheme KS distance from exact sampler", ok,
                     f"monotone={bs.monotone} ({ks}; 1e6 coupled draws vs 2e6 exact); "
                     f"final at 1e5 vs 1e5 draws: {small.ks[-1]:.4f} (limit 0.01)")
    assert ok


@pytest.mark.slow
def test_6_native_plus_immigrant_matches_full(full_runs, spec_of, report_criterion):
    res = {}
    for name, (scen, cfg, ens) in full_runs.items():
        sys_ = spec_of(scen)
        native, immig = decomposition_ensemble(scen, cfg, sys_)
        v = bat.decomposition_check(native, immig, ens, scen, sys_, bat.named_functions(sys_), cfg.t_snapshots)
        res[f"{name} ({len(v.checks)} checks)"] = failed_names(v)
    ok = not any(res.values())
    report_criterion(6, "native + immigrant ensembles vs exact and full ensemble", ok, summary(res))
    assert ok


@pytest.mark.slow
def test_7_martingale(s1, s21, spec_of, report_criterion):
    res = {}
    for scen in (s1, s21):
        sys_ = spec_of(scen)
        cfg = SimConfig(PLAN.martingale_dt, (1.0, 2.0, 4.0, 8.0), PLAN.martingale_replicates,
                        bat._seed_for(MASTER_SEED, scen, 2))
        ens = simulate_ensemble(scen, cfg, sys_)
        mc = martingale_constants(scen, sys_)
        g = scen.immigration.gamma(sys_.phi1)
        v = martingale_test(ens, sys_, 1, 1, g, mc.mean_H)
        neg = martingale_test(ens, sys_, 1, 1, g, mc.mean_H, correction_sign=-1.0)
        res[scen.name] = failed_names(v)
        res[scen.name + " negative control"] = [] if not neg.passed else ["not rejected"]
    ok = not any(res.values())
    report_criterion(7, "H_t snapshot means and zero slope; sign-flipped control rejected", ok, summary(res))
    assert ok


@pytest.mark.slow
def test_8_lln(s1, spec_of, report_criterion):
    sys_ = spec_of(s1)
    cfg = SimConfig(PLAN.lln_dt, (4.0, 8.0, 16.0), PLAN.lln_replicates, bat._seed_for(MASTER_SEED, s1, 3))
    ens = simulate_ensemble(s1, cfg, sys_)
    v = lln_test(ens, sys_, profile_function(sys_, sys_.phi1, "phi1"), 4.0, 8.0, 16.0)
    vals = {c.name: c.value for c in v.checks}
    report_criterion(8, "L2 law of large numbers on S1", v.passed,
                     f"E D^2 ratio t=4/t=8 {vals['decrease_factor']:.2f} (>= 1.5), "
                     f"relative error at t=8 {vals['relative_error_at_t2']:.4f} (< 0.1)")
    assert v.passed


@pytest.mark.slow
def test_9_clt(s21, s24, spec_of, report_criterion):
    sys21 = spec_of(s21)
    f = profile_function(sys21, sys21.eigenfunction(2), "phi2")
    g = profile_function(sys21, sys21.phi1, "phi1")
    consts = clt_constants(s21, sys21, f=f, g=g)
    t, L = 12.0, 12.0
    cfg = SimConfig(PLAN.clt_dt, (t, t + L), 50_000, bat._seed_for(MASTER_SEED, s21, 5))
    ens = simulate_ensemble(s21, cfg, sys21)
    v = clt_test(ens, sys21, consts, t, L, f=f, g=g)
    neg = clt_test(ens, sys21, dataclasses.replace(consts, sigma2_f=2.0 * consts.sigma2_f), t, L, f=f, g=g)

    sys24 = spec_of(s24)
    h = profile_function(sys24, sys24.eigenfunction(2), "phi2")
    c24 = clt_constants(s24, sys24, h=h)
    cfg24 = SimConfig(PLAN.critical_dt, (40.0,), PLAN.clt_replicates, bat._seed_for(MASTER_SEED, s24, 4))
    v24 = clt_test(simulate_ensemble(s24, cfg24, sys24), sys24, c24, 40.0, 0.0, h=h)

    st = v.statistics
    res = {"S2(1)": failed_names(v), "S2(1) doubled sigma^2": [] if not neg.passed else ["not rejected"],
           "S2(4) critical": failed_names(v24)}
    ok = not any(res.values())
    report_criterion(9, "joint CLT", ok,
                     f"{summary(res)}; Var(U_f)/sigma^2 {st['U_f']['var_ratio']:.3f}, KS p {st['U_f']['ks_p']:.3f}, "
                     f"Var(U_g)/beta^2 {st['U_g']['var_ratio']:.3f}, "
                     f"Var(U_h)/rho^2 {v24.statistics['U_h']['var_ratio']:.3f}")
    assert ok


@pytest.mark.slow
def test_10_battery_outputs_do_not_depend_on_threads(tmp_path, monkeypatch, capsys, report_criterion):
    dirs = {}
    for threads in ("1", "3"):
        monkeypatch.setenv("SUPERCLT_THREADS", threads)
        out = tmp_path / f"threads{threads}"
        main(["full-battery", "--seed", "11", "--replicates", "10000", "--out", str(out)])
        dirs[threads] = out
    capsys.readouterr()

    def contents(d):
        return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if not p.name.endswith(".manifest.json")}

    a, b = contents(dirs["1"]), contents(dirs["3"])
    manifests = [json.loads(next(d.glob("*.manifest.json")).read_text()) for d in dirs.values()]
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = bool(a) and not differing and manifests[0]["outputs"] == manifests[1]["outputs"]
    report_criterion(10, "full-battery byte-identical across SUPERCLT_THREADS=1 and 3", ok,
                     f"{len(a)} CSV/JSON files compared, {len(differing)} differ (seed 11, 1e4 replicates)")
    assert ok, differing[:5]
