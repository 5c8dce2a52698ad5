import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_auc, brute_best_split

from pickrank.errors import ConfigError, ModelFormatError, SchemaMismatchError, SingleClassError
from pickrank.evaluation import roc_auc
from pickrank.features import FEATURE_NAMES
from pickrank.gbdt import (
    MODEL_FORMAT, BoostedModel, EnsembleModel, TrainConfig, Tree, feature_importance, fit_boosted,
    grow_tree, load_model, model_from_json, model_to_json, predict_prob, save_model, sigmoid,
    train_boosted, train_ensemble,
)
from pickrank.gbdt import _presort

D = len(FEATURE_NAMES)


def one_feature_data(n, seed, informative=0, noise=0.0):
    rng = np.random.default_rng(seed)
    X = np.zeros((n, D))
    X[:, informative] = rng.random(n)
    X[:, 5] = rng.random(n) if noise else 0.0
    y = (X[:, informative] > 0.5).astype(float)
    if noise:
        flip = rng.random(n) < noise
        y[flip] = 1.0 - y[flip]
    return X, y


def two_leaf_tree(feature, thr, lv, rv):
    return Tree(np.array([feature, -1, -1], dtype=np.int32), np.array([thr, 0.0, 0.0]),
                np.array([1, -1, -1], dtype=np.int32), np.array([2, -1, -1], dtype=np.int32),
                np.zeros(3, dtype=np.uint8), np.array([0.0, lv, rv]), np.array([1.0, 0, 0]),
                np.array([2.0, 1.0, 1.0]))


def test_single_class_is_an_error():
    X = np.zeros((30, D))
    with pytest.raises(SingleClassError):
        train_boosted((X, np.ones(30)))
    with pytest.raises(SingleClassError):
        train_ensemble((X, np.zeros(30)))


def test_config_validation():
    for bad in (dict(max_depth=0), dict(learning_rate=0.0), dict(learning_rate=1.5),
                dict(max_trees=-1), dict(min_samples_leaf=0), dict(validation_fraction=1.0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()
    assert TrainConfig().max_depth == 6 and TrainConfig().learning_rate == 0.05


def test_separable_feature_reaches_auc_one_within_ten_trees():
    X, y = one_feature_data(400, 0)
    cfg = TrainConfig(max_trees=10, learning_rate=0.3, min_samples_leaf=1, validation_fraction=0.0)
    model = fit_boosted(X, y, cfg)
    assert model.n_trees <= 10
    assert roc_auc(model.predict_prob(X), y) == 1.0
    assert model.trees[0].feature[0] == 0
    assert model.trees[0].threshold[0] == pytest.approx(0.5, abs=0.01)


def test_empty_model_predicts_sigmoid_of_base():
    m = BoostedModel(0.7, (), 0.1)
    np.testing.assert_array_equal(m.predict_prob(np.zeros((3, D))), sigmoid(0.7))
    assert predict_prob(m, np.zeros(D)) == pytest.approx(1 / (1 + math.exp(-0.7)), abs=1e-15)


def test_hand_built_two_leaf_tree():
    m = BoostedModel(-0.2, (two_leaf_tree(3, 0.5, -1.0, 2.0),), 0.5)
    X = np.zeros((3, D))
    X[:, 3] = [0.1, 0.5, 0.9]
    X[2, 7] = 4.0  # unused by the tree
    expected = [1 / (1 + math.exp(-(-0.2 + 0.5 * v))) for v in (-1.0, -1.0, 2.0)]
    np.testing.assert_allclose(m.predict_prob(X), expected, rtol=0, atol=1e-15)


def test_nan_follows_default_direction():
    t = two_leaf_tree(0, 0.5, -1.0, 2.0)
    X = np.full((1, D), np.nan)
    assert BoostedModel(0.0, (t,), 1.0).raw_score(X)[0] == 2.0
    t.default_left[0] = 1
    assert BoostedModel(0.0, (t,), 1.0).raw_score(X)[0] == -1.0


@pytest.mark.xfail(strict=True, reason=(
    "early stopping follows validation AUC, which on pure noise wanders above 0.5 and keeps "
    "spurious trees; single models drift up to ~0.2 from the base rate"))
def test_labels_independent_of_features_predict_base_rate():
    worst = []
    for seed in range(4):
        rng = np.random.default_rng(seed)
        X = rng.random((4000, D))
        y = (rng.random(4000) < 0.3).astype(float)
        model = train_boosted((X, y), TrainConfig(max_trees=100, seed=1))
        p = model.predict_prob(rng.random((2000, D)))
        worst.append(np.abs(p - y.mean()).max())
    assert max(worst) <= 0.05


def test_constant_features_predict_base_rate():
    rng = np.random.default_rng(3)
    y = (rng.random(500) < 0.3).astype(float)
    model = train_boosted((np.ones((500, D)), y), TrainConfig(max_trees=50))
    assert model.n_trees == 0
    np.testing.assert_allclose(model.predict_prob(rng.random((10, D))), y.mean(), atol=0.02)


def test_deviance_never_rises_and_matches_recomputation():
    X, y = one_feature_data(600, 2, noise=0.2)
    model = fit_boosted(X, y, TrainConfig(max_trees=40, learning_rate=0.5, min_samples_leaf=1,
                                          validation_fraction=0.0))
    dev = model.training_meta["train_deviance"]
    assert all(b <= a for a, b in zip(dev, dev[1:]))
    raw = model.raw_score(X)
    recomputed = np.mean(np.logaddexp(0.0, raw) - y * raw)
    assert recomputed == pytest.approx(dev[-1], rel=1e-9)


def test_early_stopping_keeps_best_validation_prefix():
    X, y = one_feature_data(1000, 4, noise=0.3)
    model = train_boosted((X, y), TrainConfig(max_trees=300, early_stopping_rounds=10, seed=0))
    meta = model.training_meta
    assert meta["stop_reason"] == "early_stopping"
    trace = meta["valid_auc"]
    assert model.n_trees == int(np.argmax(trace))
    assert meta["best_valid_auc"] == max(trace)


def test_ensemble_of_degenerate_data():
    X = np.zeros((2, D))
    X[1, 0] = 1.0
    y = np.array([0.0, 1.0])
    cfg = TrainConfig(max_trees=20, min_samples_leaf=1, validation_fraction=0.0)
    ens = train_ensemble((X, y), cfg)
    preds = np.array([m.predict_prob(X) for m in ens.members])
    assert np.ptp(preds, axis=0).max() <= 1e-12
    np.testing.assert_allclose(ens.predict_prob(X), preds[0], atol=1e-12)


def test_ensemble_members_differ_and_average():
    X, y = one_feature_data(800, 5, noise=0.25)
    ens = train_ensemble((X, y), TrainConfig(max_trees=60, seed=2))
    assert len(ens.members) == 5
    probs = np.array([m.predict_prob(X) for m in ens.members])
    np.testing.assert_allclose(ens.predict_prob(X), probs.mean(axis=0), rtol=0, atol=1e-15)
    assert np.ptp(probs, axis=0).max() > 0
    with pytest.raises(ConfigError):
        train_ensemble((X, y), n_members=4)
    with pytest.raises(ConfigError):
        EnsembleModel(ens.members[:3])


def test_feature_importance():
    X, y = one_feature_data(600, 6, informative=4, noise=0.05)
    model = fit_boosted(X, y, TrainConfig(max_trees=30, validation_fraction=0.0))
    imp = feature_importance(model)
    assert list(imp) == list(FEATURE_NAMES)
    assert imp[FEATURE_NAMES[4]] > 0.9
    assert sum(imp.values()) == pytest.approx(1.0)
    assert set(feature_importance(BoostedModel(0.0, (), 0.1)).values()) == {0.0}


def test_save_load_is_exact_and_byte_stable(tmp_path):
    X, y = one_feature_data(500, 7, noise=0.2)
    X[::7, 2] = np.nan
    cfg = TrainConfig(max_trees=30, seed=3)
    for model in (train_boosted((X, y), cfg), train_ensemble((X, y), cfg)):
        path = tmp_path / "m.json"
        save_model(model, path)
        back = load_model(path)
        np.testing.assert_array_equal(back.predict_prob(X), model.predict_prob(X))
        assert model_to_json(back) == path.read_text()
    a = model_to_json(train_ensemble((X, y), cfg))
    assert a == model_to_json(train_ensemble((X, y), cfg))
    assert json.loads(a)["format"] == MODEL_FORMAT


def test_load_errors(tmp_path):
    doc = json.loads(model_to_json(BoostedModel(0.1, (two_leaf_tree(0, 0.5, 1.0, -1.0),), 0.1)))
    with pytest.raises(SchemaMismatchError):
        model_from_json(json.dumps({**doc, "schema_version": "pickfeat-0"}))
    with pytest.raises(ModelFormatError):
        model_from_json(json.dumps({**doc, "format": "other"}))
    with pytest.raises(ModelFormatError):
        model_from_json("{not json")
    doc["trees"][0]["feature"] = D + 3
    with pytest.raises(ModelFormatError):
        model_from_json(json.dumps(doc))
    with pytest.raises(SchemaMismatchError):
        BoostedModel(0.0, (), 0.1).predict_prob(np.zeros((2, D - 1)))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 64), st.integers(0, 2**32 - 1), st.sampled_from([0.0, 1.0, 3.0]),
       st.sampled_from([1, 3, 8]))
def test_depth_one_split_matches_enumeration(n, seed, l2, min_leaf):
    rng = np.random.default_rng(seed)
    X = np.round(rng.normal(size=(n, D)), 1)  # rounding creates tied values
    y = (rng.random(n) < 0.5).astype(float)
    p = rng.uniform(0.1, 0.9, n)
    g, h = p - y, p * (1 - p)
    w = rng.integers(1, 3, n).astype(float)
    vals, idx = _presort(X)
    tree = grow_tree(vals, idx, X, g, h, w, 1, l2, min_leaf)
    best, arg = brute_best_split(X, g, h, w, l2, min_leaf)
    if not arg:
        assert tree.n_nodes == 1
        return
    assert tree.n_nodes == 3
    assert tree.gain[0] == pytest.approx(best, rel=1e-9, abs=1e-12)
    mask = X[:, tree.feature[0]] <= tree.threshold[0]
    assert any(f == tree.feature[0] and np.array_equal(mask, m) for f, m in arg)
    left = mask
    gl, hl = (g * w)[left].sum(), (h * w)[left].sum()
    assert tree.value[tree.left[0]] == pytest.approx(-gl / (hl + l2), rel=1e-9, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_training_auc_matches_brute_force(seed):
    X, y = one_feature_data(120, seed, noise=0.3)
    model = fit_boosted(X, y, TrainConfig(max_trees=5, max_depth=2, min_samples_leaf=1,
                                          validation_fraction=0.0))
    s = model.predict_prob(X)
    assert roc_auc(s, y) == pytest.approx(brute_auc(s, y), abs=1e-12)
