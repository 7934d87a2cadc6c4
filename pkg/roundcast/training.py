"""
Training loops: one epoch, one fold, and grouped k-fold cross-validation.

Random streams are keyed so no result depends on execution order:

- model init for fold f, run r: `(seed, f, r, 0)`
- shuffling and dropout in epoch e: `(seed, f, r, 1, e)`
- bootstrap of the fold AUC: `(seed, f, r, 2)`

That is what lets folds train in worker processes (`jobs > 1`) and still
produce the same checkpoints as a sequential run.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm
from tqdm.contrib.concurrent import process_map

from .data import (
    make_folds,
    ordered_sheet_ids,
    pad_batch,
    split_by_fold,
    split_summary,
    truncate_rounds,
)
from .errors import DataError, StorageError
from .evaluation import accuracy_at, roc_auc_ci, round_logits, score_rounds
from .models import (
    EpochLog,
    FoldMetrics,
    FoldReport,
    FoldSplit,
    MetricsReport,
    Round,
    TrainConfig,
    TrainReport,
)
from .nn import SequenceClassifier, build_model
from .optim import AdamState, adam_step, bce_with_logits
from .tensor import SeededRng

logger = logging.getLogger(__name__)

INIT_STREAM = 0
EPOCH_STREAM = 1
BOOTSTRAP_STREAM = 2


def train_epoch(
    model: SequenceClassifier,
    rounds: Sequence[Round],
    config: TrainConfig,
    rng: SeededRng,
    optimizer: Optional[AdamState] = None,
) -> float:
    """
    One pass over `rounds` in an order shuffled by `rng`, in mini-batches of
    `config.batch` (the last one may be smaller). Returns the mean batch loss
    weighted by batch size.
    """
    if not rounds:
        raise DataError("cannot train on an empty set of rounds")
    if optimizer is None:
        optimizer = AdamState.for_params(model.params)
    order = rng.permutation(len(rounds))
    total = 0.0
    for start in range(0, len(rounds), config.batch):
        chunk = [rounds[i] for i in order[start : start + config.batch]]
        batch = pad_batch(chunk, model.pad_value, config.feature_scale)
        logits, cache = model.forward(batch, training=True, rng=rng)
        loss, dlogits = bce_with_logits(logits, batch.labels)
        model.backward(cache, dlogits)
        adam_step(model.params, optimizer, config.lr, config.weight_decay)
        total += loss * batch.size
    return total / len(rounds)


def evaluate_loss(
    model: SequenceClassifier, rounds: Sequence[Round], feature_scale: float
) -> float:
    labels = np.array([r.winner for r in rounds], dtype=np.float64)
    loss, _ = bce_with_logits(round_logits(model, rounds, feature_scale), labels)
    return loss


@dataclass
class RunResult:
    model: SequenceClassifier
    epochs: List[EpochLog]
    probabilities: np.ndarray


def train_run(
    train: Sequence[Round],
    test: Sequence[Round],
    config: TrainConfig,
    fold_index: int,
    repeat: int = 0,
    show_progress: bool = False,
) -> RunResult:
    """Train a freshly initialized model for `config.epochs` and score the test side."""
    root = SeededRng(config.seed).derive(fold_index, repeat)
    model = build_model(config.net, root.derive(INIT_STREAM))
    optimizer = AdamState.for_params(model.params)
    logs = []
    epochs = tqdm(
        range(config.epochs),
        desc=f"fold {fold_index} run {repeat}",
        unit="epoch",
        leave=False,
        disable=not show_progress,
    )
    for epoch in epochs:
        started = time.perf_counter()
        epoch_rng = root.derive(EPOCH_STREAM, epoch)
        train_loss = train_epoch(model, train, config, epoch_rng, optimizer)
        wall_ms = (time.perf_counter() - started) * 1000.0
        test_loss = None
        if config.track_test_loss:
            test_loss = evaluate_loss(model, test, config.feature_scale)
        logs.append(
            EpochLog(
                epoch=epoch, train_loss=train_loss, test_loss=test_loss, wall_ms=wall_ms
            )
        )
        logger.debug(
            "fold %d run %d epoch %d: train %.5f test %s (%.0f ms)",
            fold_index,
            repeat,
            epoch,
            train_loss,
            "-" if test_loss is None else f"{test_loss:.5f}",
            wall_ms,
        )
    return RunResult(model, logs, score_rounds(model, test, config.feature_scale))


def _average_epochs(runs: Sequence[RunResult]) -> List[EpochLog]:
    averaged = []
    for logs in zip(*(run.epochs for run in runs)):
        test_losses = [log.test_loss for log in logs if log.test_loss is not None]
        averaged.append(
            EpochLog(
                epoch=logs[0].epoch,
                train_loss=float(np.mean([log.train_loss for log in logs])),
                test_loss=float(np.mean(test_losses)) if test_losses else None,
                wall_ms=float(np.mean([log.wall_ms for log in logs])),
            )
        )
    return averaged


def train_fold(
    rounds: Sequence[Round],
    fold: FoldSplit,
    config: TrainConfig,
    show_progress: bool = False,
) -> Tuple[FoldReport, SequenceClassifier]:
    """
    Train `config.repeats` runs on one fold. AUC, interval bounds and
    accuracy are averaged over runs; the returned model is run 0.
    """
    train, test = split_by_fold(rounds, fold)
    if not train or not test:
        raise DataError(f"fold {fold.fold_index} has an empty train or test side")
    classes = split_summary(train, test)
    logger.info(
        "Fold %d: %d train / %d test rounds, test sheets %s",
        fold.fold_index,
        len(train),
        len(test),
        ", ".join(fold.test_sheet_ids),
    )
    labels = np.array([r.winner for r in test], dtype=np.float64)
    runs = []
    estimates = []
    accuracies = []
    for repeat in range(config.repeats):
        run = train_run(train, test, config, fold.fold_index, repeat, show_progress)
        bootstrap_rng = SeededRng(config.seed).derive(
            fold.fold_index, repeat, BOOTSTRAP_STREAM
        )
        estimates.append(
            roc_auc_ci(
                run.probabilities, labels, config.bootstrap_resamples, bootstrap_rng
            )
        )
        accuracies.append(accuracy_at(run.probabilities, labels))
        runs.append(run)

    run_aucs = [estimate.auc for estimate in estimates]
    report = FoldReport(
        fold_index=fold.fold_index,
        test_sheet_ids=fold.test_sheet_ids,
        train_sheet_ids=fold.train_sheet_ids,
        n_train=len(train),
        n_test=len(test),
        classes=classes,
        epochs=_average_epochs(runs),
        auc=float(np.mean(run_aucs)),
        ci_lo=float(np.mean([estimate.lo for estimate in estimates])),
        ci_hi=float(np.mean([estimate.hi for estimate in estimates])),
        auc_std=float(np.mean([estimate.std for estimate in estimates])),
        accuracy=float(np.mean(accuracies)),
        run_aucs=run_aucs,
        run_auc_std=float(np.std(run_aucs, ddof=1)) if len(run_aucs) > 1 else None,
    )
    logger.info(
        "Fold %d AUC %.4f [%.4f, %.4f]",
        fold.fold_index,
        report.auc,
        report.ci_lo,
        report.ci_hi,
    )
    return report, runs[0].model


@dataclass
class TrainResult:
    report: TrainReport
    models: List[SequenceClassifier]


def _fold_job(
    fold: FoldSplit, rounds: Sequence[Round], config: TrainConfig
) -> Tuple[FoldReport, SequenceClassifier]:
    return train_fold(rounds, fold, config)


def train_kfold(
    rounds: Sequence[Round],
    config: TrainConfig,
    jobs: int = 1,
    show_progress: bool = False,
) -> TrainResult:
    """Grouped k-fold training on rounds truncated to `config.progression`."""
    truncated = truncate_rounds(rounds, config.progression)
    folds = make_folds(
        ordered_sheet_ids(truncated),
        config.folds,
        block_size=config.block_size,
        stride=config.stride,
        start=config.start,
    )
    logger.info(
        "Training %s on %d rounds, %d folds x %d run(s), %d epochs, p=%.2f",
        config.architecture.value,
        len(truncated),
        len(folds),
        config.repeats,
        config.epochs,
        config.progression,
    )
    if jobs > 1:
        results = process_map(
            partial(_fold_job, rounds=truncated, config=config),
            folds,
            max_workers=jobs,
            desc="folds",
            disable=not show_progress,
        )
    else:
        results = [train_fold(truncated, fold, config, show_progress) for fold in folds]

    fold_reports = [report for report, _ in results]
    aucs = [report.auc for report in fold_reports]
    report = TrainReport(
        architecture=config.architecture,
        progression=config.progression,
        folds=fold_reports,
        mean_auc=float(np.mean(aucs)),
        std_auc=float(np.std(aucs, ddof=1)) if len(aucs) > 1 else None,
    )
    logger.info("Mean AUC over %d folds: %.4f", len(aucs), report.mean_auc)
    return TrainResult(report, [model for _, model in results])


def metrics_report(report: TrainReport) -> MetricsReport:
    return MetricsReport(
        model=report.architecture.value,
        progression=report.progression,
        folds=[
            FoldMetrics(
                fold_index=fold.fold_index,
                auc=fold.auc,
                ci_lo=fold.ci_lo,
                ci_hi=fold.ci_hi,
                auc_std=fold.auc_std,
                accuracy=fold.accuracy,
                n_test=fold.n_test,
            )
            for fold in report.folds
        ],
    )


def write_training_log(report: TrainReport, path: Path) -> Path:
    """Per-epoch rows: fold,epoch,train_loss,test_loss,wall_ms."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["fold", "epoch", "train_loss", "test_loss", "wall_ms"])
            for fold in report.folds:
                for log in fold.epochs:
                    writer.writerow(
                        [
                            fold.fold_index,
                            log.epoch,
                            repr(log.train_loss),
                            "" if log.test_loss is None else repr(log.test_loss),
                            f"{log.wall_ms:.3f}",
                        ]
                    )
    except OSError as exc:
        raise StorageError(f"Failed to write training log {path}: {exc}") from exc
    return path
