import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsinfer.embeddings import (PRIVATE, PUBLIC, EmbeddingConfig, blind_walk_point, draw_directions,
                                embed_dataset, min_gd_point, read_embeddings_csv, write_embeddings_csv)
from dsinfer.models import ArchSpec, LabeledSet, Model, init_model
from dsinfer.oracles import FunctionOracle, GradientOracle, LocalOracle

UNIFORM_1D = EmbeddingConfig(noise_families=("uniform",), repeats_per_family=4, noise_scale=0.1)


def test_blind_walk_one_dimensional_threshold():
    # label flips once |x| > 0.55; steps of 0.1 from 0 flip at k = 6
    oracle = FunctionOracle(lambda X: (np.abs(X[:, 0]) > 0.55).astype(int))
    e = blind_walk_point(oracle, [0.0], 0, UNIFORM_1D, seed=0)
    np.testing.assert_allclose(e.features, 0.6, atol=1e-12)
    assert oracle.queries_used == 4 * 6
    assert e.membership == PRIVATE


def test_blind_walk_constant_oracle_hits_caps():
    cfg = EmbeddingConfig(repeats_per_family=2, noise_scale=0.1, max_steps_blindwalk=7)
    oracle = FunctionOracle(lambda X: np.zeros(len(X), dtype=int))
    e = blind_walk_point(oracle, np.full(5, 0.5), 0, cfg, seed=1)
    np.testing.assert_allclose(e.features, cfg.feature_caps(5, 2))
    np.testing.assert_allclose(e.features[:2], 7 * 0.1)
    np.testing.assert_allclose(e.features[2:4], 7 * 0.1 * np.sqrt(5))
    assert oracle.queries_used == 6 * 7


def test_walk_box_clipping_is_optional():
    oracle = FunctionOracle(lambda X: (X[:, 0] > 1.0).astype(int))
    free = blind_walk_point(oracle, [0.95], 0, UNIFORM_1D, seed=0)
    boxed = blind_walk_point(oracle, [0.95], 0, EmbeddingConfig(
        noise_families=("uniform",), repeats_per_family=4, noise_scale=0.1, walk_box=(0.0, 1.0)), seed=0)
    assert free.features.min() < 0.11
    # clipped walks can never leave the box, so every feature is capped
    assert np.all(boxed.features == UNIFORM_1D.feature_caps(1, 2))


def test_renormalized_directions_have_nominal_length():
    cfg = EmbeddingConfig(repeats_per_family=3, noise_scale=0.05)
    d = draw_directions(cfg, 20, [0, 1])
    assert d.shape == (9, 20)
    np.testing.assert_allclose(np.abs(d[:3]).max(axis=1), 0.05)
    np.testing.assert_allclose(np.linalg.norm(d[3:6], axis=1), 0.05 * np.sqrt(20))
    np.testing.assert_allclose(np.abs(d[6:]).sum(axis=1), 0.05 * 20)


def _linear_model(w, b):
    """Two-class linear model whose boundary is ``w.x + b = 0``."""
    w = np.asarray(w, dtype=np.float64)
    W = np.stack([np.zeros_like(w), w], axis=1)
    return Model(ArchSpec("linear", len(w), 2), np.concatenate([W.ravel(), [0.0, b]]))


@pytest.mark.parametrize("w,b,x", [([1.0, 2.0, -1.0], -1.0, [0.1, 0.1, 0.2]),
                                   ([0.5, -0.3], 0.4, [-2.0, 1.0]),
                                   ([3.0, 1.0, 1.0, 0.5], -6.0, [0.2, 0.4, 0.1, 0.3])])
def test_min_gd_matches_hyperplane_distances(w, b, x):
    model = _linear_model(w, b)
    f = float(np.dot(w, x) + b)
    y = int(f > 0)
    cfg = EmbeddingConfig(mode="min_gd", box=(-50.0, 50.0), max_steps_mingd=5000)
    e = min_gd_point(GradientOracle(model), x, y, cfg)
    exact = {"linf": abs(f) / np.abs(w).sum(), "l2": abs(f) / np.linalg.norm(w),
             "l1": abs(f) / np.abs(w).max()}
    other = 1 - y
    for j, p in enumerate(cfg.norms):
        got = e.features[other * 3 + j]
        assert got == pytest.approx(exact[p], rel=0.10, abs=cfg.step[p])
    # the own-class slot stays at zero
    np.testing.assert_array_equal(e.features[y * 3:(y + 1) * 3], 0.0)


def test_min_gd_needs_gradients():
    model = _linear_model([1.0], 0.0)
    with pytest.raises(TypeError):
        min_gd_point(LocalOracle(model), [0.2], 1, EmbeddingConfig(mode="min_gd"))
    with pytest.raises(ValueError):
        min_gd_point(GradientOracle(model), [0.2], 1, EmbeddingConfig())


@pytest.mark.parametrize("bad", [dict(mode="walk"), dict(norms=("l3",)), dict(noise_families=("cauchy",)),
                                 dict(noise_scale=0.0), dict(distance_cap=-1.0), dict(target_classes=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        EmbeddingConfig(**bad)


def test_config_round_trip_and_feature_counts():
    cfg = EmbeddingConfig(walk_box=(0.0, 1.0), repeats_per_family=3)
    assert EmbeddingConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.n_features(10) == 9
    assert EmbeddingConfig(mode="min_gd", target_classes=4).n_features(10) == 12


def _pool(n, dim=6, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledSet(rng.uniform(size=(n, dim)), rng.integers(0, 3, n), "private_train",
                      np.arange(100, 100 + n))


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 7), st.randoms(use_true_random=False))
def test_embedding_independent_of_chunking_and_order(chunk, rnd):
    model = init_model(ArchSpec("mlp", 6, 3, (8,)), 0)
    pool = _pool(9)
    cfg = EmbeddingConfig(repeats_per_family=2, noise_scale=0.1, max_steps_blindwalk=10)
    base = {e.source_index: e.features for e in embed_dataset(LocalOracle(model), pool, "private", cfg, 3)}
    order = list(range(9))
    rnd.shuffle(order)
    again = embed_dataset(LocalOracle(model), pool.subset(order), "private", cfg, 3, chunk=chunk)
    for e in again:
        np.testing.assert_array_equal(e.features, base[e.source_index])


def test_features_bounded_by_caps():
    model = init_model(ArchSpec("mlp", 6, 3, (8,)), 1)
    cfg = EmbeddingConfig(repeats_per_family=3, noise_scale=0.05, max_steps_blindwalk=20)
    F = np.array([e.features for e in embed_dataset(LocalOracle(model), _pool(12), PUBLIC, cfg)])
    assert np.all(F > 0)
    assert np.all(F <= cfg.feature_caps(6, 3) + 1e-12)


def test_embedding_csv_round_trip(tmp_path):
    model = init_model(ArchSpec("mlp", 6, 3, (8,)), 2)
    cfg = EmbeddingConfig(repeats_per_family=1, noise_scale=0.1)
    embs = embed_dataset(LocalOracle(model), _pool(4), "public", cfg)
    path = tmp_path / "e.csv"
    write_embeddings_csv(path, embs, cfg, {"queries_used": 1})
    back = read_embeddings_csv(path)
    assert [e.source_index for e in back] == [e.source_index for e in embs]
    for a, b in zip(embs, back):
        np.testing.assert_array_equal(a.features, b.features)
        assert a.membership == b.membership == PUBLIC
