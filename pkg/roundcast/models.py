from __future__ import annotations

import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# Sentinel written into padded Transformer cells; never a legal damage value.
TRANSFORMER_PAD = -1.0
LSTM_PAD = 0.0
MAX_POSITIONS = 722
CHECKPOINT_FORMAT_VERSION = 1
UNCERTAINTY_LABEL = "bootstrap percentile 95% CI over stratified resamples"


class Architecture(str, Enum):
    LSTM = "lstm"
    TRANSFORMER = "transformer"


def _coerce_label(value: object) -> int:
    try:
        number = float(value)  # type: ignore[arg-type]
    except (TypeError, ValueError) as exc:
        raise ValueError(f"label must be 0 or 1, got {value!r}") from exc
    if number not in (0.0, 1.0):
        raise ValueError(f"label must be 0 or 1, got {value!r}")
    return int(number)


class FrameRecord(BaseModel):
    """One sampled video frame (5 frames per second)."""

    winner: Literal[0, 1]
    round_progression: float = Field(ge=0, le=100, allow_inf_nan=False)
    p1_damaged_pct: float = Field(
        ge=0, le=100, allow_inf_nan=False, description="Health lost by Player 1"
    )
    p2_damaged_pct: float = Field(
        ge=0, le=100, allow_inf_nan=False, description="Health lost by Player 2"
    )

    @field_validator("winner", mode="before")
    @classmethod
    def coerce_winner(cls, value: object) -> int:
        return _coerce_label(value)


class Round(BaseModel):
    """
    One fight segment between a progression reset and its terminal frame.

    `winner` is 0 when Player 1 took the round and 1 when Player 2 did.
    `features` holds (p1_damaged_pct, p2_damaged_pct) per timestep.
    """

    model_config = ConfigDict(frozen=True)

    sheet_id: str
    round_index: int = Field(ge=0)
    winner: Literal[0, 1]
    features: List[Tuple[float, float]] = Field(min_length=1)

    @field_validator("winner", mode="before")
    @classmethod
    def coerce_winner(cls, value: object) -> int:
        return _coerce_label(value)

    @field_validator("features")
    @classmethod
    def reject_pad_sentinel(
        cls, features: List[Tuple[float, float]]
    ) -> List[Tuple[float, float]]:
        for step, pair in enumerate(features):
            for value in pair:
                if not math.isfinite(value):
                    raise ValueError(f"non-finite feature at step {step}")
                if value == TRANSFORMER_PAD:
                    raise ValueError(
                        f"feature value -1 at step {step} collides with the pad value"
                    )
        return features

    @property
    def length(self) -> int:
        return len(self.features)


class FoldSplit(BaseModel):
    fold_index: int = Field(ge=0)
    test_sheet_ids: List[str]
    train_sheet_ids: List[str]

    @model_validator(mode="after")
    def check_disjoint(self) -> "FoldSplit":
        overlap = set(self.test_sheet_ids) & set(self.train_sheet_ids)
        if overlap:
            raise ValueError(
                f"sheets on both sides of fold {self.fold_index}: {sorted(overlap)}"
            )
        return self


class ClassDistribution(BaseModel):
    total: int = 0
    counts: Dict[int, int] = Field(default_factory=lambda: {0: 0, 1: 0})
    # None marks an undefined fraction (empty set).
    fractions: Dict[int, Optional[float]] = Field(
        default_factory=lambda: {0: None, 1: None}
    )


class SplitSummary(BaseModel):
    overall: ClassDistribution
    train: ClassDistribution
    test: ClassDistribution


class DatasetSummary(BaseModel):
    total_rows: int
    sheets: int
    rounds: int
    max_length: int
    progression: float
    max_truncated_length: int
    classes: ClassDistribution


class ModelConfig(BaseModel):
    """Network hyperparameters. Defaults are the published LSTM/Transformer settings."""

    model_config = ConfigDict(extra="forbid")

    architecture: Architecture = Architecture.LSTM
    input_dim: int = Field(default=2, ge=1)
    hidden_dim: int = Field(default=8, ge=1, description="LSTM output width")
    d_model: int = Field(default=8, ge=2)
    heads: int = Field(default=4, ge=1)
    ff_dim: int = Field(default=8, ge=1)
    max_positions: int = Field(default=MAX_POSITIONS, ge=1)
    encoder_layers: int = Field(default=1, ge=1)
    dropout: float = Field(default=0.30, ge=0, lt=1)

    @property
    def pad_value(self) -> float:
        if self.architecture is Architecture.TRANSFORMER:
            return TRANSFORMER_PAD
        return LSTM_PAD


_ARCH_DEFAULTS: Dict[Architecture, Tuple[float, int]] = {
    Architecture.LSTM: (0.001, 64),
    Architecture.TRANSFORMER: (0.0006, 28),
}


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    architecture: Architecture = Architecture.LSTM
    # None resolves to the architecture default. Zero is accepted (frozen run).
    learning_rate: Optional[float] = Field(default=None, ge=0)
    weight_decay: float = Field(default=1e-4, ge=0)
    batch_size: Optional[int] = Field(default=None, ge=1)
    epochs: int = Field(default=500, ge=1)
    folds: int = Field(default=5, ge=2)
    progression: float = Field(default=0.75, gt=0, le=1)
    repeats: int = Field(default=1, ge=1, description="Independent runs per fold")
    seed: int = Field(default=0, ge=0, lt=2**64)
    feature_scale: float = Field(default=0.01, gt=0)
    bootstrap_resamples: int = Field(default=1000, ge=1)
    track_test_loss: bool = Field(
        default=True, description="Record held-out loss every epoch"
    )
    block_size: Optional[int] = Field(default=None, ge=1)
    stride: Optional[int] = Field(default=None, ge=1)
    start: int = Field(default=0, ge=0)
    network: Optional[ModelConfig] = None

    @model_validator(mode="after")
    def resolve_defaults(self) -> "TrainConfig":
        lr, batch = _ARCH_DEFAULTS[self.architecture]
        if self.learning_rate is None:
            self.learning_rate = lr
        if self.batch_size is None:
            self.batch_size = batch
        if self.network is None:
            self.network = ModelConfig(architecture=self.architecture)
        elif self.network.architecture is not self.architecture:
            raise ValueError(
                f"network architecture {self.network.architecture.value} "
                f"does not match {self.architecture.value}"
            )
        return self

    @property
    def lr(self) -> float:
        assert self.learning_rate is not None
        return self.learning_rate

    @property
    def batch(self) -> int:
        assert self.batch_size is not None
        return self.batch_size

    @property
    def net(self) -> ModelConfig:
        assert self.network is not None
        return self.network


class RunConfig(BaseModel):
    """Everything a command needs to be replayed exactly (`config_resolved.json`)."""

    model_config = ConfigDict(extra="forbid")

    command: str
    train: TrainConfig = Field(default_factory=TrainConfig)
    data_dir: Optional[Path] = None
    output_dir: Optional[Path] = None
    checkpoint: Optional[Path] = None
    jobs: int = Field(default=1, ge=1)
    options: Dict[str, Any] = Field(
        default_factory=dict, description="Command-specific flags (noise, reps, ...)"
    )


class EpochLog(BaseModel):
    epoch: int
    train_loss: float
    test_loss: Optional[float] = None
    wall_ms: float = 0.0


class FoldReport(BaseModel):
    fold_index: int
    test_sheet_ids: List[str]
    train_sheet_ids: List[str]
    n_train: int
    n_test: int
    classes: SplitSummary
    epochs: List[EpochLog] = Field(default_factory=list)
    auc: float
    ci_lo: float
    ci_hi: float
    auc_std: float = Field(description="Bootstrap standard deviation of the test AUC")
    accuracy: float
    run_aucs: List[float] = Field(default_factory=list)
    run_auc_std: Optional[float] = Field(
        default=None,
        description="Sample std of AUC across repeated runs (None for one run)",
    )


class TrainReport(BaseModel):
    architecture: Architecture
    progression: float
    uncertainty: str = UNCERTAINTY_LABEL
    folds: List[FoldReport]
    mean_auc: float
    std_auc: Optional[float] = None


class RocPoint(BaseModel):
    threshold: float
    false_positive_rate: float = Field(ge=0, le=1)
    true_positive_rate: float = Field(ge=0, le=1)


class LatencyStats(BaseModel):
    mean_ms: float = Field(gt=0)
    std_ms: float = Field(ge=0)
    repetitions: int = Field(ge=2)
    batch_size: int
    seq_len: int
    progression: Optional[float] = None


class FoldMetrics(BaseModel):
    fold_index: int
    auc: float
    ci_lo: float
    ci_hi: float
    auc_std: float
    accuracy: float
    n_test: int


class LatencySummary(BaseModel):
    mean_ms: float
    std_ms: float


class MetricsReport(BaseModel):
    model: str
    progression: float
    uncertainty: str = UNCERTAINTY_LABEL
    folds: List[FoldMetrics]
    latency: Optional[LatencySummary] = None


class ParameterRecord(BaseModel):
    name: str
    shape: List[int]
    values: List[str] = Field(
        description="IEEE-754 float64 bit patterns, 16 hex digits each"
    )


class CheckpointConfig(BaseModel):
    network: ModelConfig
    progression: float
    feature_scale: float
    seed: int
    fold_index: Optional[int] = None
    test_sheet_ids: Optional[List[str]] = Field(
        default=None,
        description="Held-out sheets of the fold this model was trained for",
    )


class CheckpointDocument(BaseModel):
    format_version: int
    architecture: Architecture
    config: CheckpointConfig
    parameters: List[ParameterRecord]


class BaselineFold(BaseModel):
    fold_index: int
    auc: float
    ci_lo: float
    ci_hi: float
    accuracy: float


class BaselineReport(BaseModel):
    model: Literal["knn", "svm", "rf"]
    progression: float
    uncertainty: str = UNCERTAINTY_LABEL
    folds: List[BaselineFold]
    mean_auc: float


# Alias types for readability in code that moves these documents around.
SheetID = str
RoundKey = Tuple[SheetID, int]


class BaselineConfig(BaseModel):
    """Hyperparameters of the classical baselines."""

    model_config = ConfigDict(extra="forbid")

    k: int = Field(default=5, ge=1, description="Neighbours for KNN")
    svm_reg: float = Field(default=1e-2, gt=0)
    svm_epochs: int = Field(default=200, ge=1)
    n_trees: int = Field(default=100, ge=1)
    max_depth: Optional[int] = Field(
        default=None, ge=1, description="None grows trees until pure"
    )


class LatencyReport(BaseModel):
    model: str
    rows: List[LatencyStats]
    monotone: bool = Field(description="Mean latency non-decreasing in progression")
