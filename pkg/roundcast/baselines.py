"""
Classical baselines over fixed-length round features.

A round becomes one row: its (p1, p2) pairs flattened step by step and
zero-padded or cut to `2 * T_ref` columns, where `T_ref` is the longest
training round of the fold. All three models score so that higher means
"more likely label 1", which keeps their ROC-AUC comparable with the neural
classifiers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .data import make_folds, ordered_sheet_ids, split_by_fold, truncate_rounds
from .errors import DataError, DimensionError, LabelError, ParameterError
from .evaluation import accuracy_at, roc_auc_ci
from .models import BaselineConfig, BaselineFold, BaselineReport, Round, TrainConfig
from .tensor import SeededRng, Tensor

logger = logging.getLogger(__name__)

BASELINE_MODELS = ("knn", "svm", "rf")
# Max pairwise-difference cells held at once by KNN.
_KNN_CHUNK_CELLS = 4_000_000


def featurize(rounds: Sequence[Round], t_ref: int) -> Tensor:
    if t_ref < 1:
        raise ParameterError(f"T_ref must be at least 1, got {t_ref}")
    matrix = np.zeros((len(rounds), 2 * t_ref))
    for row, r in enumerate(rounds):
        flat = np.asarray(r.features[:t_ref], dtype=np.float64).reshape(-1)
        matrix[row, : flat.size] = flat
    return matrix


def _check_training(x: Tensor, y: np.ndarray) -> Tuple[Tensor, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise DimensionError(
            f"expected (n, d) features and n labels, got {x.shape} and {y.shape}"
        )
    if x.shape[0] == 0:
        raise DataError("empty training set")
    if not np.all((y == 0) | (y == 1)):
        raise LabelError("labels must be 0 or 1")
    return x, y.astype(np.int64)


# -------------------------
# KNN
# -------------------------
class KNearestNeighbors:
    """Score = share of label 1 among the k nearest rows; ties go to the lower index."""

    threshold = 0.5

    def __init__(self, k: int = 5) -> None:
        self.k = k
        self._x: Optional[Tensor] = None
        self._y: Optional[np.ndarray] = None

    def fit(self, x: Tensor, y: np.ndarray) -> "KNearestNeighbors":
        x, y = _check_training(x, y)
        if not 1 <= self.k <= x.shape[0]:
            raise ParameterError(f"k={self.k} must lie in [1, {x.shape[0]}]")
        self._x, self._y = x, y
        return self

    def score(self, queries: Tensor) -> Tensor:
        if self._x is None or self._y is None:
            raise DataError("KNN model has no training data")
        queries = np.asarray(queries, dtype=np.float64)
        n_train, width = self._x.shape
        chunk = max(1, _KNN_CHUNK_CELLS // max(1, n_train * width))
        scores = np.empty(queries.shape[0])
        for start in range(0, queries.shape[0], chunk):
            block = queries[start : start + chunk]
            diff = block[:, None, :] - self._x[None, :, :]
            distances = np.einsum("qnd,qnd->qn", diff, diff)
            nearest = np.argsort(distances, axis=1, kind="stable")[:, : self.k]
            scores[start : start + chunk] = self._y[nearest].mean(axis=1)
        return scores


# -------------------------
# Linear SVM
# -------------------------
class LinearSvm:
    """
    Hinge loss + reg * |w|^2 on standardized features with an appended bias
    column, minimized by full-batch Pegasos steps 1 / (2 * reg * t).
    `score` returns signed margins.
    """

    threshold = 0.0

    def __init__(self, reg: float = 1e-2, epochs: int = 200) -> None:
        if reg <= 0:
            raise ParameterError(f"regularization must be positive, got {reg}")
        if epochs < 1:
            raise ParameterError(f"epochs must be positive, got {epochs}")
        self.reg = reg
        self.epochs = epochs
        self.weights: Optional[Tensor] = None
        self._mean: Optional[Tensor] = None
        self._scale: Optional[Tensor] = None

    def _design(self, x: Tensor) -> Tensor:
        assert self._mean is not None and self._scale is not None
        standardized = (np.asarray(x, dtype=np.float64) - self._mean) / self._scale
        return np.hstack([standardized, np.ones((standardized.shape[0], 1))])

    def fit(self, x: Tensor, y: np.ndarray) -> "LinearSvm":
        x, y = _check_training(x, y)
        if np.unique(y).size < 2:
            raise LabelError("SVM training needs both classes")
        self._mean = x.mean(axis=0)
        std = x.std(axis=0)
        self._scale = np.where(std > 0, std, 1.0)
        design = self._design(x)
        signs = 2.0 * y - 1.0
        radius = 1.0 / math.sqrt(self.reg)
        w = np.zeros(design.shape[1])
        for t in range(1, self.epochs + 1):
            violated = signs * (design @ w) < 1.0
            hinge = (signs[violated, None] * design[violated]).sum(axis=0)
            grad = 2.0 * self.reg * w - hinge / len(signs)
            w = w - grad / (2.0 * self.reg * t)
            norm = np.linalg.norm(w)
            if norm > radius:
                w *= radius / norm
        self.weights = w
        return self

    def score(self, x: Tensor) -> Tensor:
        if self.weights is None:
            raise DataError("SVM model is not trained")
        return self._design(x) @ self.weights


# -------------------------
# Trees
# -------------------------
def _best_split(column: Tensor, y: np.ndarray) -> Optional[Tuple[float, float]]:
    """(weighted Gini, midpoint) of the best split; None for a constant column."""
    order = np.argsort(column, kind="stable")
    values = column[order]
    labels = y[order]
    n = values.size
    cut = np.flatnonzero(values[1:] > values[:-1])
    if cut.size == 0:
        return None
    positives = np.cumsum(labels)[cut].astype(np.float64)
    n_left = (cut + 1).astype(np.float64)
    n_right = n - n_left
    pos_right = labels.sum() - positives
    impurity = 2.0 * positives * (n_left - positives) / n_left
    impurity += 2.0 * pos_right * (n_right - pos_right) / n_right
    best = int(np.argmin(impurity))
    midpoint = (values[cut[best]] + values[cut[best] + 1]) / 2.0
    return float(impurity[best]) / n, float(midpoint)


@dataclass
class DecisionTree:
    """CART classifier on Gini impurity; rows with x[feature] <= threshold go left."""

    max_depth: Optional[int] = None
    max_features: Optional[int] = None
    rng: Optional[SeededRng] = None
    feature: List[int] = field(default_factory=list)
    threshold: List[float] = field(default_factory=list)
    left: List[int] = field(default_factory=list)
    right: List[int] = field(default_factory=list)
    label: List[int] = field(default_factory=list)

    def _new_node(self) -> int:
        for column in (self.feature, self.left, self.right, self.label):
            column.append(-1)
        self.threshold.append(0.0)
        return len(self.label) - 1

    def _candidates(self, width: int) -> Tuple[np.ndarray, np.ndarray]:
        if self.max_features is None or self.max_features >= width or self.rng is None:
            return np.arange(width), np.zeros(0, dtype=np.int64)
        order = self.rng.permutation(width)
        return order[: self.max_features], order[self.max_features :]

    def _search(
        self, x: Tensor, y: np.ndarray, features: np.ndarray
    ) -> Optional[Tuple[int, float]]:
        best: Optional[Tuple[float, int, float]] = None
        for feature in features:
            found = _best_split(x[:, feature], y)
            if found is not None and (best is None or found[0] < best[0]):
                best = (found[0], int(feature), found[1])
        return None if best is None else (best[1], best[2])

    def fit(self, x: Tensor, y: np.ndarray) -> "DecisionTree":
        x, y = _check_training(x, y)
        stack = [(np.arange(x.shape[0]), 0, self._new_node())]
        while stack:
            rows, depth, node = stack.pop()
            labels = y[rows]
            positives = int(labels.sum())
            # Majority vote, ties to label 0.
            self.label[node] = 1 if 2 * positives > rows.size else 0
            if positives in (0, rows.size) or rows.size < 2:
                continue
            if self.max_depth is not None and depth >= self.max_depth:
                continue
            sampled, rest = self._candidates(x.shape[1])
            split = self._search(x[rows], labels, sampled)
            if split is None and rest.size:
                split = self._search(x[rows], labels, rest)
            if split is None:
                continue
            feature, threshold = split
            goes_left = x[rows, feature] <= threshold
            self.feature[node] = feature
            self.threshold[node] = threshold
            self.left[node] = self._new_node()
            self.right[node] = self._new_node()
            stack.append((rows[~goes_left], depth + 1, self.right[node]))
            stack.append((rows[goes_left], depth + 1, self.left[node]))
        return self

    def predict(self, x: Tensor) -> np.ndarray:
        if not self.label:
            raise DataError("decision tree is not trained")
        x = np.asarray(x, dtype=np.float64)
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        nodes = np.zeros(x.shape[0], dtype=np.int64)
        active = feature[nodes] >= 0
        while np.any(active):
            rows = np.flatnonzero(active)
            current = nodes[rows]
            go_left = x[rows, feature[current]] <= threshold[current]
            nodes[rows] = np.where(go_left, left[current], right[current])
            active = feature[nodes] >= 0
        return np.asarray(self.label)[nodes]


class RandomForest:
    """Bagged trees, sqrt(d) candidate features per node; score = share of 1 votes."""

    threshold = 0.5

    def __init__(
        self,
        n_trees: int = 100,
        max_depth: Optional[int] = None,
        rng: Optional[SeededRng] = None,
    ) -> None:
        if n_trees < 1:
            raise ParameterError(f"n_trees must be positive, got {n_trees}")
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.rng = rng if rng is not None else SeededRng(0)
        self.trees: List[DecisionTree] = []

    def fit(self, x: Tensor, y: np.ndarray) -> "RandomForest":
        x, y = _check_training(x, y)
        n, width = x.shape
        max_features = max(1, int(math.sqrt(width)))
        self.trees = []
        for index in range(self.n_trees):
            tree_rng = self.rng.derive(index)
            sample = tree_rng.integers(0, n, n)
            tree = DecisionTree(self.max_depth, max_features, tree_rng)
            self.trees.append(tree.fit(x[sample], y[sample]))
        return self

    def score(self, x: Tensor) -> Tensor:
        if not self.trees:
            raise DataError("random forest is not trained")
        votes = np.stack([tree.predict(x) for tree in self.trees])
        return votes.mean(axis=0)


class Baseline(Protocol):
    threshold: float

    def fit(self, x: Tensor, y: np.ndarray) -> "Baseline": ...

    def score(self, x: Tensor) -> Tensor: ...


def build_baseline(name: str, config: BaselineConfig, rng: SeededRng) -> Baseline:
    if name == "knn":
        return KNearestNeighbors(config.k)
    if name == "svm":
        return LinearSvm(config.svm_reg, config.svm_epochs)
    if name == "rf":
        return RandomForest(config.n_trees, config.max_depth, rng)
    raise ParameterError(
        f"unknown baseline {name!r}; choose from {', '.join(BASELINE_MODELS)}"
    )


def evaluate_baselines(
    rounds: Sequence[Round],
    config: TrainConfig,
    baseline: Optional[BaselineConfig] = None,
    models: Sequence[str] = BASELINE_MODELS,
) -> List[BaselineReport]:
    """Grouped k-fold AUC per baseline, on the folds and truncation the networks use."""
    baseline = baseline or BaselineConfig()
    truncated = truncate_rounds(rounds, config.progression)
    folds = make_folds(
        ordered_sheet_ids(truncated),
        config.folds,
        block_size=config.block_size,
        stride=config.stride,
        start=config.start,
    )
    per_model: Dict[str, List[BaselineFold]] = {name: [] for name in models}
    root = SeededRng(config.seed)
    for fold in folds:
        train, test = split_by_fold(truncated, fold)
        if not train or not test:
            raise DataError(f"fold {fold.fold_index} has an empty side")
        t_ref = max(r.length for r in train)
        x_train, x_test = featurize(train, t_ref), featurize(test, t_ref)
        y_train = np.array([r.winner for r in train])
        y_test = np.array([r.winner for r in test])
        for model_index, name in enumerate(models):
            model_rng = root.derive(fold.fold_index, model_index)
            model = build_baseline(name, baseline, model_rng)
            scores = model.fit(x_train, y_train).score(x_test)
            estimate = roc_auc_ci(
                scores,
                y_test,
                config.bootstrap_resamples,
                root.derive(fold.fold_index, model_index, 1),
            )
            per_model[name].append(
                BaselineFold(
                    fold_index=fold.fold_index,
                    auc=estimate.auc,
                    ci_lo=estimate.lo,
                    ci_hi=estimate.hi,
                    accuracy=accuracy_at(scores, y_test, model.threshold),
                )
            )
            logger.info("Fold %d %s AUC %.4f", fold.fold_index, name, estimate.auc)
    return [
        BaselineReport(
            model=name,  # type: ignore[arg-type]
            progression=config.progression,
            folds=per_model[name],
            mean_auc=float(np.mean([f.auc for f in per_model[name]])),
        )
        for name in models
    ]
