from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from superclt.model import (ScenarioError, derived_coefficients, load_scenario, save_scenario,
                            scenario_from_dict, validate)
from superclt.scenarios import CANONICAL, canonical


def test_s1_validates(s1):
    rep = validate(s1)
    assert rep.passed
    assert rep.M == pytest.approx(1.5)
    assert rep.lambda1 == pytest.approx(-0.5)
    assert rep.supercritical


@pytest.mark.parametrize("name", sorted(CANONICAL))
def test_canonical_scenarios_are_valid(name):
    assert validate(canonical(name)).passed


def test_asymmetric_generator_is_reported(s21):
    bad = s21.with_(Q=[[-1.0, 2.0], [1.0, -2.0]])
    assert "m-symmetry failed at (1,2)" in validate(bad).violations


def test_negative_b_is_reported(s1):
    assert "b must be nonnegative" in validate(s1.with_(b=[-0.1])).violations


def test_positive_row_sum_and_negative_rates(s21):
    rep = validate(s21.with_(Q=[[-1.0, 1.5], [1.0, -1.0]]))
    assert any("row sum" in v for v in rep.violations)
    rep = validate(s21.with_(Q=[[1.0, -1.0], [-1.0, 1.0]]))
    assert any("negative jump rate" in v for v in rep.violations)


def test_subcritical_is_a_warning_not_a_violation(s1):
    rep = validate(s1.with_(a=[-0.5]))
    assert rep.passed and not rep.supercritical
    assert rep.lambda1 == pytest.approx(0.5)
    assert rep.warnings


def test_derived_coefficients_s1(s1):
    alpha, A, M = derived_coefficients(s1)
    assert alpha.tolist() == [0.5]
    assert A.tolist() == [1.0]
    assert M == 1.5


def test_derived_coefficients_zero_branching(s21):
    alpha, A, M = derived_coefficients(s21.with_(beta=[0.0, 0.0]))
    assert not alpha.any() and not A.any() and M == 0.0


def test_jump_atoms_enter_A(s1):
    scen = s1.with_(a=[0.0], b=[0.0], jump_atoms=(((2.0, 0.25),),))
    _, A, _ = derived_coefficients(scen)
    assert A.tolist() == [1.0]


def test_round_trip(tmp_path):
    for name in ("S1", "S3"):
        scen = canonical(name)
        path = tmp_path / f"{name}.cfg"
        save_scenario(scen, path)
        assert load_scenario(path) == scen
        assert load_scenario(path).digest() == scen.digest()


def test_shipped_files_match_builtins(scenario_dir):
    for name in CANONICAL:
        assert load_scenario(scenario_dir / f"{name}.cfg") == canonical(name)


def test_missing_key_is_named(s1):
    d = s1.to_dict()
    del d["space"]["m"]
    with pytest.raises(ScenarioError, match="space.m"):
        scenario_from_dict(d)


def test_dimension_mismatch(s21):
    d = s21.to_dict()
    d["branching"]["beta"] = [1.0, 1.0, 1.0]
    with pytest.raises(ScenarioError, match="dimension mismatch"):
        scenario_from_dict(d)


def test_unparsable_file(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("{not json")
    with pytest.raises(ScenarioError, match="parse error at line 1"):
        load_scenario(p)
    with pytest.raises(ScenarioError, match="cannot read"):
        load_scenario(tmp_path / "absent.cfg")


def test_jump_atom_site_is_one_based(s1):
    d = s1.to_dict()
    d["branching"]["jump_atoms"] = [[0, 1.0, 0.1]]
    with pytest.raises(ScenarioError, match="site must be an integer in 1..1"):
        scenario_from_dict(d)


def test_digest_ignores_name(s1):
    assert s1.with_(name="other").digest() == s1.digest()
    assert s1.with_(eta=[0.3]).digest() != s1.digest()


def test_saved_floats_round_trip_bit_exactly(s1, tmp_path):
    x = 0.1 + 0.2
    scen = s1.with_(eta=[x])
    save_scenario(scen, tmp_path / "x.cfg")
    assert json.loads((tmp_path / "x.cfg").read_text())["immigration"]["eta"] == [x]


finite = st.floats(-5.0, 5.0, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3), finite, finite)
def test_gamma_is_linear(f, g, a, b):
    im = canonical("S3").immigration
    lhs = im.gamma(a * np.array(f) + b * np.array(g))
    assert lhs == pytest.approx(a * im.gamma(f) + b * im.gamma(g), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 5.0), min_size=3, max_size=3), st.lists(st.floats(0.0, 5.0), min_size=3, max_size=3))
def test_gamma_is_monotone(f, d):
    im = canonical("S3").immigration
    assert im.gamma(np.array(f) + np.array(d)) >= im.gamma(f) - 1e-12


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 3.0))
def test_scaling_beta_scales_alpha_and_A(c):
    scen = canonical("S3")
    alpha, A, _ = derived_coefficients(scen)
    alpha2, A2, _ = derived_coefficients(scen.with_(beta=c * scen.branching.beta))
    np.testing.assert_allclose(alpha2, c * alpha, rtol=1e-14)
    np.testing.assert_allclose(A2, c * A, rtol=1e-14)


def test_immigration_functional_small_argument_limit():
    im = canonical("S3").immigration
    g = np.array([1e-9, 2e-9, 3e-9])
    assert im.phi(g) == pytest.approx(im.gamma(g), rel=1e-8)
    assert math.isclose(im.phi(np.zeros(3)), 0.0)
