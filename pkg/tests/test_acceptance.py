"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Heavy criteria share one default-size scenario. Tolerances are the stated
ones; a failing criterion fails its test.
"""

import math
import time

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings

from dsinfer.embeddings import embed_dataset
from dsinfer.experiments import (OVERLAP_FRACTIONS, PIPELINE_THREATS, ScenarioConfig, build_scenario,
                                 overlap_checks, sweep_overlap)
from dsinfer.inference import INCONCLUSIVE, harmonic_mean_p, welch_one_sided
from dsinfer.oracle_net import connect_oracle, decode_request, decode_response, encode_request, \
    encode_response, serve_model
from dsinfer.oracles import LocalOracle
from dsinfer.theory import (REPORTED_MI_SUCCESS_D900_M50000, TheoryParams, monte_carlo_verify,
                            std_normal_cdf, theorem2_mi_success, theorem3_di_success)

from conftest import ACCEPTANCE
from gradcheck import ARCHS, gradient_case
from permutation import permutation_p, random_instance
from test_oracle_net import requests, responses

ALPHA = 0.01
M_MAX = 50
THEORY = dict(K=10, sigma=0.5)


def record(k: int, ok: bool, detail: str):
    ACCEPTANCE[k] = (bool(ok), detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ------------------------------------------------------------------ theory

def test_criterion_1_train_test_margin_gap():
    t0 = time.perf_counter()
    rep = monte_carlo_verify(TheoryParams(D=100, m=1000, **THEORY), 200, seed=0, checks=("gap",))
    dt = time.perf_counter() - t0
    rel = abs(rep.empirical_gap - 25.0) / 25.0
    record(1, rel <= 0.05 and dt < 10.0,
           f"gap {rep.empirical_gap:.3f} vs 25 (rel {rel:.4f}, 2e5 margins), {dt:.1f}s")


def test_criterion_2_membership_inference_accuracy():
    rows = []
    for m in (10, 100, 1000):
        rep = monte_carlo_verify(TheoryParams(D=100, m=m, **THEORY), 2000, seed=0, checks=("mi",))
        rows.append((m, rep.optimal_t_mi, theorem2_mi_success(100, m)))
    within = all(abs(e - c) <= 0.02 for _, e, c in rows)
    monotone = all(a[1] >= b[1] for a, b in zip(rows, rows[1:]))
    formula_900 = theorem2_mi_success(900, 50000)
    detail = "; ".join(f"m={m}: {e:.4f} vs {c:.4f}" for m, e, c in rows)
    detail += (f"; monotone={monotone}; D=900,m=50000 quoted {REPORTED_MI_SUCCESS_D900_M50000} "
               f"vs formula {formula_900:.4f} (flagged, not asserted)")
    record(2, within and monotone, detail)


def test_criterion_3_dataset_inference_accuracy():
    parts, ok = [], True
    for D in (8, 36, 100):
        rep = monte_carlo_verify(TheoryParams(D=D, m=1000, **THEORY), 2000, seed=0, checks=("di",))
        good = abs(rep.empirical_di - theorem3_di_success(D)) <= 0.02
        ok &= good
        parts.append(f"D={D}: {rep.empirical_di:.4f} vs {theorem3_di_success(D):.4f}")
    rep = monte_carlo_verify(TheoryParams(D=900, m=1000, **THEORY), 500, seed=0, checks=("di",))
    ok &= rep.empirical_di >= 0.999
    parts.append(f"D=900: {rep.empirical_di:.4f} (>= 0.999)")
    by_m = [monte_carlo_verify(TheoryParams(D=8, m=m, **THEORY), 2000, seed=0, checks=("di",)).empirical_di
            for m in (100, 1000, 10000)]
    invariant = max(by_m) - min(by_m) <= 0.02 and all(abs(v - theorem3_di_success(8)) <= 0.02 for v in by_m)
    ok &= invariant
    parts.append("D=8 over m=100/1000/10000: " + ", ".join(f"{v:.4f}" for v in by_m))
    record(3, ok, "; ".join(parts))


# ---------------------------------------------------------------- pipeline

@pytest.fixture(scope="module")
def scenario():
    t0 = time.perf_counter()
    sc = build_scenario(ScenarioConfig())
    sc.build_seconds = time.perf_counter() - t0
    return sc


def test_criterion_4_end_to_end_pipeline(scenario):
    t0 = time.perf_counter()
    parts, ok = [], True
    for threat in PIPELINE_THREATS:
        v = scenario.infer(threat, M_MAX, ALPHA)
        ok &= v.aggregated_p < ALPHA
        parts.append(f"{threat} p={v.aggregated_p:.2e}")
    v = scenario.infer("independent", M_MAX, ALPHA)
    low = [p for p in v.replica_p if p < 0.05]
    indep_ok = (v.aggregated_p >= 0.05 and v.decision == INCONCLUSIVE and not low
                and all(d == INCONCLUSIVE for d in v.replica_decisions))
    ok &= indep_ok
    parts.append(f"independent p={v.aggregated_p:.3f}, {len(v.replica_p) - len(low)}/{len(v.replica_p)} "
                 f"replicas p>=0.05 (min {min(v.replica_p):.3f})")
    dt = scenario.build_seconds + time.perf_counter() - t0
    ok &= dt < 15 * 60
    parts.append(f"runtime {dt:.0f}s")
    record(4, ok, "; ".join(parts))


def test_criterion_5_query_budget_over_the_wire(scenario):
    pools = scenario.pools
    priv, pub = pools.private.subset(np.arange(50)), pools.public.subset(np.arange(50))
    with serve_model(scenario.victim) as srv, connect_oracle(srv.address) as oracle:
        embed_dataset(oracle, priv, "private", pools.embedding, pools.embed_seed)
        embed_dataset(oracle, pub, "public", pools.embedding, pools.embed_seed)
        client, server = oracle.queries_used, srv.total_queries
    record(5, client == server and client <= 30_000,
           f"100 points: client {client} queries, server {server}, limit 30000")


def test_criterion_6_overlap_sweep(scenario):
    rows = sweep_overlap(scenario, OVERLAP_FRACTIONS, m=M_MAX, alpha=ALPHA)
    checks = overlap_checks(rows, ALPHA)
    detail = "; ".join(f"lambda={r['overlap_fraction']}: p={r['aggregated_p']:.2e}, "
                       f"effect={r['effect_size']:.3f} [{r['effect_ci_low']:.3f}, {r['effect_ci_high']:.3f}]"
                       for r in rows)
    record(6, all(checks.values()), detail + f"; {checks}")


# -------------------------------------------------------------- statistics

def test_criterion_7_statistics_oracles():
    perm_err = max(abs(welch_one_sided(a, b).p_value - permutation_p(a, b))
                   for a, b in (random_instance(k) for k in range(50)))
    hm_ok = (harmonic_mean_p([0.1, 0.001]) == 2 / 1010 and harmonic_mean_p([0.01] * 3) == 0.01
             and harmonic_mean_p([0.37]) == 0.37 and math.isclose(harmonic_mean_p([0.5, 0.25]), 1 / 3))
    zs = np.linspace(-8, 8, 321)
    phi_err = max(abs(std_normal_cdf(float(z)) - float(mpmath.ncdf(z))) for z in zs)
    record(7, perm_err <= 0.03 and hm_ok and phi_err <= 1e-7,
           f"Welch vs permutation max |dp| {perm_err:.4f} (50 instances); harmonic mean exact={hm_ok}; "
           f"Phi max err {phi_err:.1e}")


def test_criterion_8_gradients():
    worst = {}
    for arch in ARCHS:
        errs = [gradient_case(arch, c) for c in range(20)]
        worst[arch] = max(max(e) for e in errs)
    record(8, max(worst.values()) < 1e-3,
           ", ".join(f"{a} max rel err {w:.1e}" for a, w in worst.items()) + " (20 cases each)")


# ---------------------------------------------------------------- loopback

_round_trips = {"n": 0}


@settings(max_examples=5000, deadline=None, database=None)
@given(requests)
def _request_round_trip(req):
    assert decode_request(encode_request(req)) == req
    _round_trips["n"] += 1


@settings(max_examples=5000, deadline=None, database=None)
@given(responses)
def _response_round_trip(resp):
    assert decode_response(encode_response(resp)) == resp
    _round_trips["n"] += 1


def test_criterion_9_loopback_equivalence(scenario):
    pools = scenario.pools
    pts = pools.private.subset(np.arange(20))
    local = embed_dataset(LocalOracle(scenario.victim), pts, "private", pools.embedding, pools.embed_seed)
    with serve_model(scenario.victim) as srv, connect_oracle(srv.address) as oracle:
        remote = embed_dataset(oracle, pts, "private", pools.embedding, pools.embed_seed)
    diff = max(float(np.max(np.abs(a.features - b.features))) for a, b in zip(local, remote))
    _round_trips["n"] = 0
    _request_round_trip()
    _response_round_trip()
    n = _round_trips["n"]
    record(9, diff <= 1e-9 and n >= 10_000,
           f"max |local - remote| {diff:.1e} over 20 points; {n} randomized messages round-tripped")
