import numpy as np
import pytest

from roundcast.baselines import (
    DecisionTree,
    KNearestNeighbors,
    LinearSvm,
    RandomForest,
    build_baseline,
    evaluate_baselines,
    featurize,
)
from roundcast.data import truncate_rounds
from roundcast.errors import DataError, LabelError, ParameterError
from roundcast.evaluation import roc_auc
from roundcast.models import BaselineConfig, TrainConfig
from roundcast.synth import synth_generate
from roundcast.tensor import SeededRng


def test_featurize_pads_and_cuts(make_round):
    short = make_round([(1, 2), (3, 4)])
    long = make_round([(1, 1), (2, 2), (3, 3), (4, 4), (5, 5)])
    matrix = featurize([short, long, short], 3)
    assert matrix.tolist() == [
        [1, 2, 3, 4, 0, 0],
        [1, 1, 2, 2, 3, 3],
        [1, 2, 3, 4, 0, 0],
    ]
    with pytest.raises(ParameterError):
        featurize([short], 0)


def test_knn_scores():
    x = np.array([[0.0], [10.0], [11.0], [12.0]])
    y = np.array([1, 0, 0, 1])
    nearest = KNearestNeighbors(k=1).fit(x, y)
    assert nearest.score(x).tolist() == [1.0, 0.0, 0.0, 1.0]
    assert nearest.score(np.array([[1.0], [8.0]])).tolist() == [1.0, 0.0]
    everyone = KNearestNeighbors(k=4).fit(x, y)
    assert everyone.score(np.array([[100.0], [-5.0]])).tolist() == [0.5, 0.5]


def test_knn_distance_ties_go_to_lower_row():
    model = KNearestNeighbors(k=1).fit(np.array([[0.0], [2.0]]), np.array([1, 0]))
    assert model.score(np.array([[1.0]])).tolist() == [1.0]
    flipped = KNearestNeighbors(k=1).fit(np.array([[0.0], [2.0]]), np.array([0, 1]))
    assert flipped.score(np.array([[1.0]])).tolist() == [0.0]


def test_knn_contract():
    with pytest.raises(DataError):
        KNearestNeighbors(k=1).fit(np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ParameterError):
        KNearestNeighbors(k=3).fit(np.zeros((2, 1)), np.array([0, 1]))


def test_svm_separates_one_dimensional_data():
    x = np.array([[-2.0], [2.0], [-2.5], [2.5]])
    y = np.array([0, 1, 0, 1])
    margins = LinearSvm().fit(x, y).score(x)
    assert np.all(np.sign(margins) == [-1, 1, -1, 1])


def test_svm_regularization_shrinks_weights():
    x = np.array([[-2.0], [2.0], [-2.5], [2.5]])
    y = np.array([0, 1, 0, 1])
    loose = LinearSvm(reg=1e-2).fit(x, y)
    tight = LinearSvm(reg=10.0).fit(x, y)
    assert np.linalg.norm(tight.weights) < np.linalg.norm(loose.weights)


def test_svm_on_xor_still_trains():
    x = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    y = np.array([0, 0, 1, 1])
    margins = LinearSvm().fit(x, y).score(x)
    assert np.all(np.isfinite(margins))


def test_svm_needs_both_classes():
    with pytest.raises(LabelError):
        LinearSvm().fit(np.ones((3, 2)), np.array([1, 1, 1]))


def test_tree_memorizes_distinct_rows():
    rng = SeededRng(0)
    x = rng.uniform((30, 4), 0.0, 1.0)
    y = rng.integers(0, 2, 30)
    tree = DecisionTree().fit(x, y)
    assert np.array_equal(tree.predict(x), y)


def test_forest_on_pure_labels():
    x = SeededRng(1).uniform((20, 3), 0.0, 1.0)
    forest = RandomForest(n_trees=7, rng=SeededRng(2)).fit(x, np.ones(20, dtype=int))
    scores = forest.score(x)
    assert scores.tolist() == [1.0] * 20


def test_forest_is_deterministic_in_seed():
    rng = SeededRng(3)
    x = rng.uniform((40, 6), 0.0, 1.0)
    y = (x[:, 0] + 0.2 * rng.uniform(40, -1.0, 1.0) > 0.5).astype(int)
    first = RandomForest(n_trees=10, rng=SeededRng(4)).fit(x, y).score(x)
    second = RandomForest(n_trees=10, rng=SeededRng(4)).fit(x, y).score(x)
    assert np.array_equal(first, second)
    assert np.all((first >= 0.0) & (first <= 1.0))


def test_build_baseline_by_name():
    config = BaselineConfig(k=3, n_trees=5)
    assert isinstance(build_baseline("knn", config, SeededRng(0)), KNearestNeighbors)
    assert isinstance(build_baseline("svm", config, SeededRng(0)), LinearSvm)
    assert build_baseline("rf", config, SeededRng(0)).n_trees == 5
    with pytest.raises(ParameterError):
        build_baseline("gbt", config, SeededRng(0))


def test_evaluate_baselines_under_grouped_folds(synthetic_rounds):
    config = TrainConfig(folds=2, progression=0.95, bootstrap_resamples=20)
    reports = evaluate_baselines(synthetic_rounds, config, BaselineConfig(n_trees=5))
    assert [report.model for report in reports] == ["knn", "svm", "rf"]
    for report in reports:
        assert len(report.folds) == 2
        assert all(0.0 <= fold.auc <= 1.0 for fold in report.folds)
        fold_aucs = [fold.auc for fold in report.folds]
        assert report.mean_auc == pytest.approx(np.mean(fold_aucs))


def test_forest_separates_real_labels_from_shuffled_ones():
    rounds = truncate_rounds(synth_generate(300, seed=5), 0.95)
    train, test = rounds[:200], rounds[200:]
    t_ref = max(r.length for r in train)
    x_train, x_test = featurize(train, t_ref), featurize(test, t_ref)
    y_train = np.array([r.winner for r in train])
    y_test = np.array([r.winner for r in test])

    forest = RandomForest(n_trees=50, rng=SeededRng(0)).fit(x_train, y_train)
    assert roc_auc(forest.score(x_test), y_test) > 0.7

    shuffled = y_train[SeededRng(1).permutation(len(y_train))]
    chance = RandomForest(n_trees=50, rng=SeededRng(0)).fit(x_train, shuffled)
    assert abs(roc_auc(chance.score(x_test), y_test) - 0.5) < 0.2
