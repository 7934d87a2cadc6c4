import csv
import math

import numpy as np
import pytest

from roundcast.data import pad_batch, truncate_rounds
from roundcast.errors import DataError
from roundcast.models import Architecture, ModelConfig, TrainConfig
from roundcast.nn import build_model
from roundcast.optim import AdamState, bce_with_logits
from roundcast.synth import synth_generate
from roundcast.tensor import SeededRng
from roundcast.training import (
    evaluate_loss,
    metrics_report,
    train_epoch,
    train_kfold,
    train_run,
    write_training_log,
)


@pytest.fixture
def short_rounds(synthetic_rounds):
    return truncate_rounds(synthetic_rounds, 0.25)


def test_architecture_defaults():
    lstm = TrainConfig()
    defaults = (lstm.lr, lstm.batch, lstm.epochs, lstm.weight_decay)
    assert defaults == (0.001, 64, 500, 1e-4)
    transformer = TrainConfig(architecture="transformer")
    assert (transformer.lr, transformer.batch) == (0.0006, 28)
    assert transformer.net.pad_value == -1.0


@pytest.fixture(scope="module")
def balanced_rounds():
    rounds = truncate_rounds(synth_generate(200, seed=3), 0.75)
    winners = [r for r in rounds if r.winner == 1]
    losers = [r for r in rounds if r.winner == 0]
    count = min(len(winners), len(losers))
    return winners[:count] + losers[:count]


@pytest.mark.parametrize("architecture", ["lstm", "transformer"])
@pytest.mark.parametrize("seed", range(5))
def test_fresh_model_loss_is_near_chance(architecture, seed, balanced_rounds):
    config = TrainConfig(architecture=architecture)
    model = build_model(config.net, SeededRng(seed))
    loss = evaluate_loss(model, balanced_rounds, config.feature_scale)
    assert abs(loss - math.log(2)) < 0.05


def test_zero_learning_rate_leaves_parameters_untouched(short_rounds):
    config = TrainConfig(learning_rate=0.0, weight_decay=0.0, batch_size=8)
    model = build_model(config.net, SeededRng(0))
    before = model.params.state()
    train_epoch(model, short_rounds, config, SeededRng(1))
    for name, param in model.params:
        assert np.array_equal(param.value, before[name])


def test_epoch_is_deterministic(short_rounds):
    config = TrainConfig(architecture="transformer", batch_size=8)
    losses = []
    for _ in range(2):
        model = build_model(config.net, SeededRng(0))
        losses.append(train_epoch(model, short_rounds, config, SeededRng(1)))
    assert losses[0] == losses[1]


def test_single_batch_epoch_loss_is_that_batch_loss(short_rounds):
    config = TrainConfig(
        batch_size=len(short_rounds),
        network=ModelConfig(architecture=Architecture.LSTM, dropout=0.0),
    )
    model = build_model(config.net, SeededRng(0))
    batch = pad_batch(short_rounds, model.pad_value, config.feature_scale)
    expected, _ = bce_with_logits(model.predict_logits(batch), batch.labels)
    optimizer = AdamState.for_params(model.params)
    loss = train_epoch(model, short_rounds, config, SeededRng(1), optimizer)
    assert loss == pytest.approx(expected, rel=1e-12)


def test_empty_training_set(short_rounds):
    config = TrainConfig()
    with pytest.raises(DataError):
        train_epoch(build_model(config.net, SeededRng(0)), [], config, SeededRng(1))


def test_kfold_reports(tmp_path):
    rounds = synth_generate(100, seed=2)
    config = TrainConfig(epochs=2, folds=5, progression=0.25, bootstrap_resamples=20)
    result = train_kfold(rounds, config)
    report = result.report
    assert len(report.folds) == 5 and len(result.models) == 5
    tested = [sheet for fold in report.folds for sheet in fold.test_sheet_ids]
    assert len(tested) == len(set(tested)) == 10
    assert sum(fold.n_test for fold in report.folds) == 100
    for fold in report.folds:
        assert [log.epoch for log in fold.epochs] == [0, 1]
        assert all(log.test_loss is not None for log in fold.epochs)
        assert 0.0 <= fold.ci_lo <= fold.ci_hi <= 1.0
        assert fold.run_auc_std is None
    fold_aucs = [fold.auc for fold in report.folds]
    assert report.mean_auc == pytest.approx(np.mean(fold_aucs))

    metrics = metrics_report(report)
    assert metrics.model == "lstm"
    assert [fold.fold_index for fold in metrics.folds] == list(range(5))

    path = write_training_log(report, tmp_path / "log.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["fold", "epoch", "train_loss", "test_loss", "wall_ms"]
    assert len(rows) == 1 + 5 * 2


def test_kfold_repeats_are_summarized(synthetic_rounds):
    config = TrainConfig(
        epochs=1, folds=2, repeats=2, progression=0.25, bootstrap_resamples=10
    )
    fold = train_kfold(synthetic_rounds, config).report.folds[0]
    assert len(fold.run_aucs) == 2
    assert fold.run_auc_std is not None
    assert fold.auc == pytest.approx(np.mean(fold.run_aucs))


def test_training_is_a_pure_function_of_seed(synthetic_rounds):
    config = TrainConfig(
        architecture="transformer",
        epochs=2,
        folds=2,
        progression=0.25,
        bootstrap_resamples=10,
    )
    first = train_kfold(synthetic_rounds, config)
    second = train_kfold(synthetic_rounds, config)
    for a, b in zip(first.models, second.models):
        for name, param in a.params:
            assert np.array_equal(param.value, b.params[name].value)
    assert [f.auc for f in first.report.folds] == [f.auc for f in second.report.folds]


def test_too_few_sheets_for_folds(synthetic_rounds):
    with pytest.raises(DataError):
        train_kfold(synthetic_rounds, TrainConfig(folds=11, epochs=1))


@pytest.mark.slow
def test_fold_workers_match_sequential_training(synthetic_rounds):
    config = TrainConfig(epochs=2, folds=2, progression=0.25, bootstrap_resamples=10)
    sequential = train_kfold(synthetic_rounds, config)
    parallel = train_kfold(synthetic_rounds, config, jobs=2)
    assert sequential.report.model_dump(exclude={"folds": {"__all__": {"epochs"}}}) == (
        parallel.report.model_dump(exclude={"folds": {"__all__": {"epochs"}}})
    )
    for a, b in zip(sequential.models, parallel.models):
        for name, param in a.params:
            assert np.array_equal(param.value, b.params[name].value)


@pytest.mark.slow
def test_lstm_learns_the_synthetic_task():
    rounds = synth_generate(1000, seed=0)
    late_config = TrainConfig(epochs=200, progression=0.95, bootstrap_resamples=100)
    late = train_kfold(rounds, late_config)
    assert all(fold.auc >= 0.95 for fold in late.report.folds)
    middle_config = TrainConfig(epochs=200, progression=0.75, bootstrap_resamples=100)
    middle = train_kfold(rounds, middle_config)
    assert middle.report.mean_auc >= 0.85


@pytest.mark.slow
def test_short_prefixes_are_harder_on_noisy_rounds():
    rounds = synth_generate(1000, seed=0, noise_level=0.5)
    scores = {}
    for p in (0.25, 0.75):
        config = TrainConfig(epochs=100, progression=p, bootstrap_resamples=100)
        scores[p] = train_kfold(rounds, config).report.mean_auc
    assert scores[0.25] < scores[0.75]


@pytest.mark.slow
def test_windowed_training_loss_does_not_rise():
    rounds = truncate_rounds(synth_generate(200, seed=0), 0.95)
    train, test = rounds[:160], rounds[160:]
    config = TrainConfig(epochs=80, progression=0.95, track_test_loss=False)
    epochs = train_run(train, test, config, fold_index=0).epochs
    losses = np.array([log.train_loss for log in epochs])
    window_means = losses.reshape(-1, 20).mean(axis=1)
    assert np.all(np.diff(window_means) <= 0.0)
