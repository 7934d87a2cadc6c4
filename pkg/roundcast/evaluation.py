"""
Metrics, curve export and inference timing.

ROC-AUC is the Mann-Whitney statistic computed from midranks
(`scipy.stats.rankdata`), which makes tied scores count one half and matches
the pairwise definition exactly. Uncertainty is a stratified bootstrap: each
resample keeps the positive and negative counts of the original sample.
"""

from __future__ import annotations

import csv
import logging
import time
from pathlib import Path
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .data import RoundBatch, pad_batch, truncate_rounds
from .errors import (
    DataError,
    DimensionError,
    LabelError,
    MetricUndefinedError,
    NumericError,
    ParameterError,
    StorageError,
)
from .models import LatencyStats, MetricsReport, RocPoint, Round
from .nn import SequenceClassifier
from .tensor import SeededRng, Tensor, as_tensor, sigmoid

logger = logging.getLogger(__name__)

DEFAULT_BENCH_PROGRESSIONS = (0.25, 0.75, 0.95)
SCORING_CHUNK = 32


class AucEstimate(NamedTuple):
    auc: float
    lo: float
    hi: float
    std: float


def _validated(
    scores: Sequence[float], labels: Sequence[float]
) -> Tuple[Tensor, np.ndarray]:
    s = as_tensor(scores).reshape(-1)
    y = as_tensor(labels).reshape(-1)
    if s.shape != y.shape:
        raise DimensionError(f"{s.size} scores for {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise NumericError("scores contain non-finite values")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise LabelError("labels must be 0 or 1")
    return s, y.astype(bool)


def _mann_whitney_auc(scores: Tensor, positive: np.ndarray) -> float:
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    ranks = rankdata(scores)
    rank_sum = float(ranks[positive].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_auc(scores: Sequence[float], labels: Sequence[float]) -> float:
    s, positive = _validated(scores, labels)
    if positive.all() or not positive.any():
        raise MetricUndefinedError("ROC-AUC needs both classes among the labels")
    return _mann_whitney_auc(s, positive)


def roc_auc_ci(
    scores: Sequence[float],
    labels: Sequence[float],
    resamples: int = 1000,
    rng: Optional[SeededRng] = None,
    level: float = 0.95,
) -> AucEstimate:
    """Point AUC plus percentile interval and std over stratified resamples."""
    if resamples < 1:
        raise ParameterError(f"resamples must be positive, got {resamples}")
    if not 0.0 < level < 1.0:
        raise ParameterError(f"confidence level must be in (0, 1), got {level}")
    s, positive = _validated(scores, labels)
    if positive.all() or not positive.any():
        raise MetricUndefinedError("ROC-AUC needs both classes among the labels")
    rng = rng if rng is not None else SeededRng(0)
    point = _mann_whitney_auc(s, positive)

    pos_scores = s[positive]
    neg_scores = s[~positive]
    resample_labels = np.concatenate(
        [np.ones(pos_scores.size, bool), np.zeros(neg_scores.size, bool)]
    )
    values = np.empty(resamples)
    for r in range(resamples):
        pos = pos_scores[rng.integers(0, pos_scores.size, pos_scores.size)]
        neg = neg_scores[rng.integers(0, neg_scores.size, neg_scores.size)]
        values[r] = _mann_whitney_auc(np.concatenate([pos, neg]), resample_labels)
    tail = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(values, [tail, 100.0 - tail])
    std = float(values.std(ddof=1)) if resamples > 1 else 0.0
    return AucEstimate(point, float(lo), float(hi), std)


def roc_curve(scores: Sequence[float], labels: Sequence[float]) -> List[RocPoint]:
    """
    One point per distinct score used as threshold (predict 1 when score >= t),
    in decreasing threshold order, starting at (0, 0) with t = +inf and ending
    at (1, 1).
    """
    s, positive = _validated(scores, labels)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("ROC curve needs both classes among the labels")
    order = np.argsort(-s, kind="stable")
    sorted_scores = s[order]
    tp = np.cumsum(positive[order])
    fp = np.cumsum(~positive[order])
    # Last index of each run of equal scores.
    ends = np.flatnonzero(np.r_[sorted_scores[1:] != sorted_scores[:-1], True])
    points = [
        RocPoint(
            threshold=float("inf"), false_positive_rate=0.0, true_positive_rate=0.0
        )
    ]
    for end in ends:
        points.append(
            RocPoint(
                threshold=float(sorted_scores[end]),
                false_positive_rate=float(fp[end]) / n_neg,
                true_positive_rate=float(tp[end]) / n_pos,
            )
        )
    return points


def curve_area(points: Sequence[RocPoint]) -> float:
    fpr = np.array([p.false_positive_rate for p in points])
    tpr = np.array([p.true_positive_rate for p in points])
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def accuracy_at(
    scores: Sequence[float], labels: Sequence[float], threshold: float = 0.5
) -> float:
    s, positive = _validated(scores, labels)
    if s.size == 0:
        raise DataError("accuracy over zero samples is undefined")
    return float(np.mean((s >= threshold) == positive))


# -------------------------
# Model scoring
# -------------------------
def round_logits(
    model: SequenceClassifier,
    rounds: Sequence[Round],
    feature_scale: float,
    chunk: int = SCORING_CHUNK,
) -> Tensor:
    """Inference-mode logits in input order, padded `chunk` rounds at a time."""
    if not rounds:
        return np.zeros(0)
    logits = []
    for start in range(0, len(rounds), chunk):
        batch = pad_batch(
            rounds[start : start + chunk], model.pad_value, feature_scale
        )
        logits.append(model.predict_logits(batch))
    return np.concatenate(logits)


def score_rounds(
    model: SequenceClassifier,
    rounds: Sequence[Round],
    feature_scale: float,
    chunk: int = SCORING_CHUNK,
) -> Tensor:
    """Win probabilities (label 1)."""
    return sigmoid(round_logits(model, rounds, feature_scale, chunk))


# -------------------------
# Latency
# -------------------------
def bench_inference(
    model: SequenceClassifier,
    batch: RoundBatch,
    repetitions: int = 100,
    warmup: int = 10,
    progression: Optional[float] = None,
) -> LatencyStats:
    """Time `repetitions` inference-mode forward passes on one fixed batch."""
    if repetitions < 2:
        raise ParameterError(f"repetitions must be at least 2, got {repetitions}")
    if warmup < 0:
        raise ParameterError(f"warmup must be non-negative, got {warmup}")
    for _ in range(warmup):
        model.forward(batch, training=False)
    timings = np.empty(repetitions)
    for r in range(repetitions):
        started = time.perf_counter_ns()
        model.forward(batch, training=False)
        timings[r] = (time.perf_counter_ns() - started) / 1e6
    return LatencyStats(
        mean_ms=max(float(timings.mean()), np.finfo(np.float64).tiny),
        std_ms=float(timings.std(ddof=1)),
        repetitions=repetitions,
        batch_size=batch.size,
        seq_len=batch.max_len,
        progression=progression,
    )


def bench_progressions(
    model: SequenceClassifier,
    rounds: Sequence[Round],
    progressions: Iterable[float] = DEFAULT_BENCH_PROGRESSIONS,
    repetitions: int = 100,
    warmup: int = 10,
    feature_scale: float = 0.01,
    batch_size: int = 1,
) -> List[LatencyStats]:
    """One latency row per progression over the first `batch_size` rounds."""
    if not rounds:
        raise DataError("benchmark needs at least one round")
    sample = list(rounds[:batch_size])
    rows = []
    for p in progressions:
        batch = pad_batch(truncate_rounds(sample, p), model.pad_value, feature_scale)
        stats = bench_inference(model, batch, repetitions, warmup, progression=p)
        logger.info(
            "p=%.2f T=%d: %.3f +/- %.3f ms over %d reps",
            p,
            stats.seq_len,
            stats.mean_ms,
            stats.std_ms,
            repetitions,
        )
        rows.append(stats)
    return rows


def latency_trend_ok(rows: Sequence[LatencyStats]) -> bool:
    """True when mean latency does not decrease as the progression grows."""
    ordered = sorted(rows, key=lambda row: row.progression or 0.0)
    return all(a.mean_ms <= b.mean_ms for a, b in zip(ordered, ordered[1:]))


# -------------------------
# Report files
# -------------------------
def write_roc_csv(points: Sequence[RocPoint], path: Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["threshold", "fpr", "tpr"])
            for point in points:
                writer.writerow(
                    [
                        repr(point.threshold),
                        repr(point.false_positive_rate),
                        repr(point.true_positive_rate),
                    ]
                )
    except OSError as exc:
        raise StorageError(f"Failed to write ROC curve {path}: {exc}") from exc
    return path


def write_metrics_json(report: MetricsReport, path: Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"Failed to write metrics {path}: {exc}") from exc
    return path
