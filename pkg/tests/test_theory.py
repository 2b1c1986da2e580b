import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsinfer.theory import (MEMBER, NONMEMBER, NOT_STOLEN, STOLEN, DIDecisionConfig, LinearClassifier,
                            MIDecisionConfig, TheoryParams, TheoryPoint, di_decide, margin, margins,
                            mi_decide, monte_carlo_verify, sample_theory_dataset, std_normal_cdf,
                            theorem1_gap, theorem2_mi_success, theorem3_di_success,
                            threshold_mi_accuracy, train_one_pass)


def mp_phi(z):
    return float(mpmath.ncdf(z))


@pytest.mark.parametrize("z", [-8.0, -5.0, -3.0, -1.96, -1.0, -0.25, 0.0, 0.5, 1.0, 2.326, 4.0, 7.5])
def test_std_normal_cdf_against_mpmath(z):
    assert abs(std_normal_cdf(z) - mp_phi(z)) < 1e-7


def test_std_normal_cdf_deep_tail_is_zero():
    assert std_normal_cdf(-40.0) == 0.0
    assert std_normal_cdf(40.0) == 1.0


@settings(max_examples=200, deadline=None)
@given(st.floats(-30, 30), st.floats(0, 5))
def test_std_normal_cdf_monotone_and_symmetric(z, dz):
    assert std_normal_cdf(z) <= std_normal_cdf(z + dz)
    assert abs(std_normal_cdf(z) + std_normal_cdf(-z) - 1.0) < 1e-15


def test_closed_forms_hand_values():
    assert theorem1_gap(100, 0.5) == 25.0
    assert theorem1_gap(8, 1.0) == 8.0
    # sqrt(D/2m) = 1
    assert theorem2_mi_success(2, 1) == pytest.approx(mp_phi(1.0), abs=1e-12)
    # sqrt(D)/(2 sqrt 2) = 1 at D = 8
    assert theorem3_di_success(8) == pytest.approx(mp_phi(1.0), abs=1e-12)
    assert threshold_mi_accuracy(4, 1) == pytest.approx(mp_phi(1.0), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 2000), st.integers(1, 10_000), st.integers(1, 10_000))
def test_mi_success_nonincreasing_in_m(D, m1, m2):
    lo, hi = sorted((m1, m2))
    assert theorem2_mi_success(D, hi) <= theorem2_mi_success(D, lo)
    assert threshold_mi_accuracy(D, m1) <= theorem2_mi_success(D, m1)


def test_params_validation():
    with pytest.raises(ValueError):
        TheoryParams(0, 10, 0.5, 10)
    with pytest.raises(ValueError):
        TheoryParams(2, 10, 0.0, 10)
    with pytest.raises(ValueError):
        TheoryParams(2, 10, 0.5, 10, u=[1.0])
    p = TheoryParams(4, 3, 0.5, 7)
    assert np.linalg.norm(p.u) == pytest.approx(1.0)
    assert p.with_m(9).m == 9


def test_one_pass_weights_are_exact():
    p = TheoryParams(10, 20, 0.5, 333)
    data = sample_theory_dataset(p, 3)
    f = train_one_pass(data)
    np.testing.assert_array_equal(f.w1, np.array([math.fsum(col) for col in (data.y[:, None] * data.x1).T]))
    assert f.c == pytest.approx(333.0)
    # exact sums do not depend on visiting order
    perm = np.random.default_rng(0).permutation(333)
    shuffled = type(data)(data.x1[perm], data.x2[perm], data.y[perm], p)
    g = train_one_pass(shuffled)
    np.testing.assert_array_equal(f.w2, g.w2)


def test_sampling_is_deterministic():
    p = TheoryParams(3, 4, 1.0, 12)
    a, b = sample_theory_dataset(p, 11), sample_theory_dataset(p, 11)
    np.testing.assert_array_equal(a.x2, b.x2)
    np.testing.assert_array_equal(a.y, b.y)


def test_margin_hand_example():
    f = LinearClassifier(np.array([1.0, 0.0]), np.array([2.0]), 1.0)
    pt = TheoryPoint(np.array([3.0, 5.0]), np.array([0.5]), -1)
    assert margin(f, pt) == -4.0
    assert mi_decide(f, pt, MIDecisionConfig(t=-6.0)) == MEMBER
    assert mi_decide(f, pt, MIDecisionConfig(t=0.0)) == NONMEMBER
    with pytest.raises(ValueError):
        margin(f, TheoryPoint(np.zeros(3), np.zeros(1), 1))


def test_di_decide_rule():
    p = TheoryParams(2, 50, 0.5, 200)
    s = sample_theory_dataset(p, 0)
    ref = sample_theory_dataset(p, 1)
    cfg = DIDecisionConfig.optimal(p.D, p.sigma)
    assert cfg.lam == 50 * 0.25 / 2
    assert di_decide(train_one_pass(s), s, ref, cfg) == STOLEN
    assert di_decide(train_one_pass(sample_theory_dataset(p, 2)), s, ref, cfg) == NOT_STOLEN
    with pytest.raises(ValueError):
        di_decide(train_one_pass(s), s, sample_theory_dataset(p, 1, m=10), cfg)


def test_train_margins_exceed_test_margins_on_average():
    p = TheoryParams(10, 100, 0.5, 500)
    rep = monte_carlo_verify(p, 100, 4, checks=("gap",))
    assert rep.empirical_gap == pytest.approx(25.0, rel=0.1)
    assert math.isnan(rep.empirical_di)


def test_monte_carlo_requires_enough_trials():
    with pytest.raises(ValueError):
        monte_carlo_verify(TheoryParams(2, 2, 1.0, 10), 10, 0)


def test_report_serializes():
    rep = monte_carlo_verify(TheoryParams(2, 8, 0.5, 50), 100, 0)
    d = rep.to_dict()
    assert set(d) >= {"empirical_gap", "closed_gap", "empirical_mi", "closed_mi", "empirical_di",
                      "closed_di", "trials", "params", "seed"}
    assert d["params"]["D"] == 8
