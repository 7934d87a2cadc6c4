"""
Checkpoint files for trained classifiers.

A checkpoint is one JSON document:

    {"format_version": 1, "architecture": "lstm", "config": {...},
     "parameters": [{"name": ..., "shape": [...],
                     "values": ["3ff0000000000000", ...]}]}

Values are IEEE-754 float64 bit patterns written as 16 hex digits, so a
save/load round trip is bit-exact.

Usage
-----
from .checkpoint import save_checkpoint, load_checkpoint

save_checkpoint(model, path, progression=0.75, feature_scale=0.01, seed=0)
model, meta = load_checkpoint(path)
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from .errors import (
    CheckpointFormatError,
    ContractError,
    DimensionError,
    StorageError,
)
from .models import (
    CHECKPOINT_FORMAT_VERSION,
    CheckpointConfig,
    CheckpointDocument,
    ParameterRecord,
)
from .nn import SequenceClassifier, build_model
from .tensor import SeededRng, Tensor

logger = logging.getLogger(__name__)


def encode_values(values: Tensor) -> List[str]:
    bits = np.ascontiguousarray(values, dtype=np.float64).reshape(-1).view(np.uint64)
    return [f"{int(b):016x}" for b in bits]


def decode_values(encoded: List[str], shape: List[int], name: str) -> Tensor:
    expected = int(np.prod(shape)) if shape else 1
    if len(encoded) != expected:
        raise CheckpointFormatError(
            f"parameter {name!r} has {len(encoded)} values, "
            f"shape {shape} needs {expected}"
        )
    try:
        bits = np.array([int(text, 16) for text in encoded], dtype=np.uint64)
    except (ValueError, OverflowError) as exc:
        raise CheckpointFormatError(
            f"parameter {name!r} holds a malformed bit pattern"
        ) from exc
    return bits.view(np.float64).reshape(shape).copy()


def checkpoint_document(
    model: SequenceClassifier,
    progression: float,
    feature_scale: float,
    seed: int,
    fold_index: Optional[int] = None,
    test_sheet_ids: Optional[List[str]] = None,
) -> CheckpointDocument:
    return CheckpointDocument(
        format_version=CHECKPOINT_FORMAT_VERSION,
        architecture=model.architecture,
        config=CheckpointConfig(
            network=model.config,
            progression=progression,
            feature_scale=feature_scale,
            seed=seed,
            fold_index=fold_index,
            test_sheet_ids=test_sheet_ids,
        ),
        parameters=[
            ParameterRecord(
                name=name, shape=list(param.shape), values=encode_values(param.value)
            )
            for name, param in model.params
        ],
    )


def save_checkpoint(
    model: SequenceClassifier,
    path: Path,
    progression: float,
    feature_scale: float,
    seed: int,
    fold_index: Optional[int] = None,
    test_sheet_ids: Optional[List[str]] = None,
) -> Path:
    document = checkpoint_document(
        model, progression, feature_scale, seed, fold_index, test_sheet_ids
    )
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(document.model_dump_json(indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"Failed to write checkpoint {path}: {exc}") from exc
    logger.info("Wrote %s checkpoint to %s", model.architecture.value, path)
    return path


def parse_checkpoint(text: str, source: str = "<checkpoint>") -> CheckpointDocument:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"{source} is not valid JSON: {exc}") from exc
    version = raw.get("format_version") if isinstance(raw, dict) else None
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointFormatError(
            f"{source} has unsupported format_version {version!r} "
            f"(expected {CHECKPOINT_FORMAT_VERSION})",
            format_version=version,
        )
    try:
        document = CheckpointDocument.model_validate(raw)
    except ValidationError as exc:
        raise CheckpointFormatError(
            f"{source} is malformed: {exc}", format_version=version
        ) from exc
    if document.config.network.architecture is not document.architecture:
        raise CheckpointFormatError(
            f"{source} declares architecture {document.architecture.value} "
            f"but its network config is "
            f"{document.config.network.architecture.value}",
            format_version=version,
        )
    return document


def model_from_document(document: CheckpointDocument) -> SequenceClassifier:
    # Fresh init is overwritten; the seed only fixes the throwaway draws.
    model = build_model(document.config.network, SeededRng(document.config.seed))
    values = {}
    for record in document.parameters:
        if record.name in values:
            raise CheckpointFormatError(f"duplicate parameter {record.name!r}")
        values[record.name] = decode_values(record.values, record.shape, record.name)
    try:
        model.params.load(values)
    except (ContractError, DimensionError) as exc:
        raise CheckpointFormatError(
            f"checkpoint parameters do not fit the model: {exc}"
        ) from exc
    return model


def load_checkpoint(path: Path) -> Tuple[SequenceClassifier, CheckpointConfig]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"Failed to read checkpoint {path}: {exc}") from exc
    document = parse_checkpoint(text, source=str(path))
    model = model_from_document(document)
    logger.info("Loaded %s checkpoint from %s", document.architecture.value, path)
    return model, document.config
