import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings, strategies as st

from dsinfer.embeddings import PRIVATE, PUBLIC, Embedding, EmbeddingConfig
from dsinfer.inference import (INCONCLUSIVE, STOLEN, DIPools, Regressor, RegressorConfig, Verdict,
                               aggregate_test, harmonic_mean_p, preprocess_features,
                               resampled_p_values, run_dataset_inference, score, student_t_sf,
                               train_regressor, welch_one_sided)
from dsinfer.models import ArchSpec, LabeledSet, TrainConfig, init_model, train_sgd
from dsinfer.oracles import LocalOracle

from permutation import permutation_p, random_instance


# ------------------------------------------------------------- Welch

def test_welch_hand_example():
    r = welch_one_sided([1, 2, 3], [0, 0, 0])
    assert r.t == pytest.approx(2 / np.sqrt(1 / 3), rel=1e-12)
    assert r.t == pytest.approx(3.464, abs=1e-3)
    assert r.df == pytest.approx(2.0)
    assert r.p_value == pytest.approx(0.037, abs=5e-4)
    assert r.delta_mu == 2.0


def test_welch_identical_samples_give_half():
    assert welch_one_sided([1, 2, 3], [1, 2, 3]).p_value == pytest.approx(0.5)
    assert welch_one_sided([4, 4], [4, 4]).p_value == 0.5


def test_welch_zero_variance_with_gap():
    assert welch_one_sided([2, 2], [1, 1]).p_value == 0.0
    assert welch_one_sided([1, 1], [2, 2]).p_value == 1.0


def test_welch_needs_two_per_side():
    with pytest.raises(ValueError):
        welch_one_sided([1.0], [1.0, 2.0])


samples = st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30)


@settings(max_examples=200, deadline=None)
@given(samples, samples)
def test_welch_matches_scipy(a, b):
    a, b = np.array(a), np.array(b)
    if a.var() < 1e-9 or b.var() < 1e-9:
        return
    ours = welch_one_sided(a, b)
    ref = scipy.stats.ttest_ind(a, b, equal_var=False, alternative="greater")
    assert ours.p_value == pytest.approx(ref.pvalue, abs=1e-9)
    assert 0.0 <= ours.p_value <= 1.0
    # one-sided symmetry
    assert welch_one_sided(b, a).p_value == pytest.approx(1.0 - ours.p_value, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.floats(-40, 40), st.floats(1.0, 1e4))
def test_student_t_sf_matches_scipy(t, df):
    assert float(student_t_sf(t, df)) == pytest.approx(scipy.stats.t.sf(t, df), abs=1e-10)


@pytest.mark.parametrize("k", range(0, 50, 7))
def test_welch_close_to_exact_permutation_test(k):
    a, b = random_instance(k)
    assert abs(welch_one_sided(a, b).p_value - permutation_p(a, b)) <= 0.03


# ---------------------------------------------------------- harmonic mean

def test_harmonic_mean_hand_cases():
    assert harmonic_mean_p([0.1, 0.001]) == pytest.approx(2 / 1010, rel=1e-15)
    assert harmonic_mean_p([0.01, 0.01, 0.01]) == pytest.approx(0.01, rel=1e-15)
    assert harmonic_mean_p([0.37]) == 0.37
    assert harmonic_mean_p([0.5, 0.25]) == pytest.approx(1 / 3)


@pytest.mark.parametrize("bad", [[], [0.0], [0.2, -0.1], [1.5], [np.nan]])
def test_harmonic_mean_rejects_bad_input(bad):
    with pytest.raises(ValueError):
        harmonic_mean_p(bad)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(1e-300, 1.0), min_size=1, max_size=50))
def test_harmonic_mean_between_min_and_max(ps):
    h = harmonic_mean_p(ps)
    assert min(ps) * (1 - 1e-12) <= h <= max(ps) * (1 + 1e-12)


# ------------------------------------------------------------- resampling

def test_resample_modes():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=20), rng.normal(size=20)
    for mode in ("half", "bootstrap"):
        ps = resampled_p_values(a, b, 30, np.random.default_rng(1), mode)
        assert ps.shape == (30,)
        assert np.all((ps >= 0) & (ps <= 1))
    with pytest.raises(ValueError):
        resampled_p_values(a, b, 3, rng, "jackknife")


def _null_rejections(mode, alpha, runs=300, m=50):
    hits = 0
    for r in range(runs):
        rng = np.random.default_rng([99, r])
        p, _ = aggregate_test(rng.normal(size=m), rng.normal(size=m), 100, rng, mode)
        hits += p < alpha
    return hits / runs


def test_type_one_error_controlled_under_null():
    # identical score distributions on both sides
    assert _null_rejections("half", 0.01) <= 0.05


def test_literal_bootstrap_overrejects_under_null():
    # documents why the default resampler is not the with-replacement one
    assert _null_rejections("bootstrap", 0.01) > 0.05


# -------------------------------------------------------------- regressor

def _embeddings(n, width, shift, seed):
    rng = np.random.default_rng(seed)
    priv = [Embedding(rng.uniform(0.5, 1.0, width), PRIVATE, i) for i in range(n)]
    pub = [Embedding(rng.uniform(0.5, 1.0, width) + shift, PUBLIC, n + i) for i in range(n)]
    return priv + pub


def test_regressor_separates_held_out_pool():
    cfg = RegressorConfig(epochs=200)
    reg = train_regressor(_embeddings(60, 6, 0.4, 0), cfg)
    assert reg.converged
    held = _embeddings(60, 6, 0.4, 1)
    s = score(reg, held)
    assert s[60:].mean() - s[:60].mean() > 0


def test_regressor_is_deterministic():
    embs = _embeddings(30, 4, 0.3, 2)
    a = train_regressor(embs, RegressorConfig(epochs=50))
    b = train_regressor(embs, RegressorConfig(epochs=50))
    np.testing.assert_array_equal(a.W1, b.W1)
    assert a.b2 == b.b2


def test_regressor_needs_both_classes():
    embs = [e for e in _embeddings(10, 3, 0.1, 0) if e.membership == PRIVATE]
    with pytest.raises(ValueError):
        train_regressor(embs)


def test_identical_embeddings_give_no_signal():
    embs = [Embedding(np.ones(4), PRIVATE, i) for i in range(10)] + \
           [Embedding(np.ones(4), PUBLIC, 10 + i) for i in range(10)]
    reg = train_regressor(embs, RegressorConfig(epochs=20))
    s = score(reg, embs)
    assert np.ptp(s) == 0.0
    assert welch_one_sided(s[10:], s[:10]).p_value == 0.5


def test_zero_weight_regressor_scores_equal_bias():
    reg = Regressor(np.zeros((3, 5)), np.zeros(5), np.zeros(5), 0.7, np.zeros(3), np.ones(3))
    np.testing.assert_array_equal(score(reg, np.random.default_rng(0).uniform(size=(8, 3))), 0.7)


def test_folded_standardization_matches():
    reg = train_regressor(_embeddings(40, 6, 0.2, 3), RegressorConfig(epochs=30, sort_groups=3))
    F = np.random.default_rng(4).uniform(0.3, 2.0, size=(25, 6))
    np.testing.assert_allclose(reg.folded()(F), reg(F), atol=1e-9)


def test_regressor_json_round_trip():
    reg = train_regressor(_embeddings(20, 6, 0.2, 5), RegressorConfig(epochs=10, sort_groups=(2, 4)))
    back = Regressor.from_dict(reg.to_dict())
    F = np.random.default_rng(0).uniform(size=(5, 6))
    np.testing.assert_array_equal(back(F), reg(F))


@settings(max_examples=30, deadline=None)
@given(st.randoms(use_true_random=False))
def test_scores_follow_input_order(rnd):
    reg = train_regressor(_embeddings(10, 4, 0.2, 6), RegressorConfig(epochs=10))
    F = np.random.default_rng(7).uniform(size=(12, 4))
    perm = list(range(12))
    rnd.shuffle(perm)
    np.testing.assert_array_equal(score(reg, F[perm]), score(reg, F)[perm])


def test_preprocess_sorts_within_groups():
    F = np.array([[3.0, 1.0, 2.0, 9.0, 8.0, 7.0]])
    out = preprocess_features(F, None, 3)
    np.testing.assert_array_equal(out, [[1, 2, 3, 7, 8, 9]])
    with pytest.raises(ValueError):
        preprocess_features(F, None, 4)
    np.testing.assert_allclose(preprocess_features(np.array([[2.0]]), np.array([2.0]), 0), np.log(2.0))


# ---------------------------------------------------------------- pipeline

@pytest.fixture(scope="module")
def tiny_world():
    rng = np.random.default_rng(0)
    dim, C = 40, 3
    means = rng.normal(0.5, 0.15, size=(C, dim))

    def draw(n, tag, offset):
        y = rng.integers(0, C, n)
        return LabeledSet(np.clip(means[y] + rng.normal(0, 0.2, (n, dim)), 0, 1), y, tag,
                          np.arange(offset, offset + n))

    priv, pub = draw(80, "private_train", 0), draw(80, "public_test", 1000)
    arch = ArchSpec("mlp", dim, C, (32,))
    victim = train_sgd(init_model(arch, 0), priv, TrainConfig(epochs=60, lr0=0.05))
    cfg = EmbeddingConfig(repeats_per_family=3, noise_scale=0.05, max_steps_blindwalk=30)
    pools = DIPools(priv, pub, cfg, embed_seed=1)
    from dsinfer.embeddings import embed_dataset
    embs = embed_dataset(LocalOracle(victim), priv, "private", cfg, 2) + \
        embed_dataset(LocalOracle(victim), pub, "public", cfg, 2)
    reg = train_regressor(embs, RegressorConfig(sort_groups=3))
    return victim, pools, reg


def test_verdict_contract(tiny_world):
    victim, pools, reg = tiny_world
    oracle = LocalOracle(victim)
    v = run_dataset_inference(pools, oracle, reg, m=10, repetitions=20, bootstrap=5, seed=3)
    assert isinstance(v, Verdict)
    assert (v.decision == STOLEN) == (v.aggregated_p < v.alpha)
    assert len(v.replica_p) == 5 and all(0 <= p <= 1 for p in v.replica_p)
    assert v.ci99[0] <= v.ci99[1]
    assert v.queries_used == oracle.queries_used > 0
    d = v.to_dict()
    assert {"decision", "aggregated_p", "effect_size", "ci99", "alpha", "m", "repetitions",
            "bootstrap", "seed", "threat_kind"} <= set(d)
    # same seed, same verdict
    again = run_dataset_inference(pools, LocalOracle(victim), reg, m=10, repetitions=20, bootstrap=5, seed=3)
    assert again.aggregated_p == v.aggregated_p


def test_embedding_cache_avoids_requeries(tiny_world):
    victim, pools, reg = tiny_world
    cache = {}
    first = LocalOracle(victim)
    run_dataset_inference(pools, first, reg, m=10, repetitions=5, bootstrap=2, embedding_cache=cache)
    second = LocalOracle(victim)
    run_dataset_inference(pools, second, reg, m=10, repetitions=5, bootstrap=2, embedding_cache=cache)
    assert first.queries_used > 0 and second.queries_used == 0


def test_m_guards(tiny_world):
    victim, pools, reg = tiny_world
    with pytest.raises(ValueError):
        run_dataset_inference(pools, LocalOracle(victim), reg, m=1)
    with pytest.raises(ValueError):
        run_dataset_inference(pools, LocalOracle(victim), reg, m=81)


def test_decision_labels():
    assert {STOLEN, INCONCLUSIVE} == {"stolen", "inconclusive"}
