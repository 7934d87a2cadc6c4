"""
Frame tables to model-ready batches.

Pipeline: per-sheet CSV files -> `FrameRecord` rows (`parse_frames`) ->
`Round` objects (`split_rounds`) -> prefixes of each round
(`truncate_round`) -> padded `RoundBatch` blocks (`pad_batch`). Grouped
cross-validation folds are built over sheet ids (`make_folds`) so every round
of one source video stays on the same side of a split.

CSV schema (UTF-8, `.` decimal separator)::

    Winner,Round_Progression,Player1_Damaged%,Player2_Damaged%

A single-file dataset may carry an extra leading `Sheet` column instead of
one file per sheet.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from .errors import (
    ConfigurationError,
    DataError,
    IntegrityError,
    ParameterError,
    ParseError,
    SchemaError,
    StorageError,
)
from .models import (
    LSTM_PAD,
    TRANSFORMER_PAD,
    ClassDistribution,
    DatasetSummary,
    FoldSplit,
    FrameRecord,
    Round,
    RoundKey,
    SplitSummary,
)
from .tensor import Mask, Tensor

logger = logging.getLogger(__name__)

WINNER_COLUMN = "Winner"
PROGRESSION_COLUMN = "Round_Progression"
P1_COLUMN = "Player1_Damaged%"
P2_COLUMN = "Player2_Damaged%"
SHEET_COLUMN = "Sheet"
FRAME_COLUMNS = (WINNER_COLUMN, PROGRESSION_COLUMN, P1_COLUMN, P2_COLUMN)

SheetFrames = Tuple[str, List[FrameRecord]]


@dataclass(frozen=True)
class RoundBatch:
    """
    Padded block of rounds.

    `features` is (B, T_max, 2), `mask` is (B, T_max) and true on real
    timesteps, `lengths` are the unpadded lengths and `labels` the winners as
    floats. Masked feature cells hold exactly `pad_value`.
    """

    features: Tensor
    mask: Mask
    lengths: np.ndarray
    labels: Tensor
    pad_value: float
    keys: Tuple[RoundKey, ...] = ()

    @property
    def size(self) -> int:
        return int(self.features.shape[0])

    @property
    def max_len(self) -> int:
        return int(self.features.shape[1])


def natural_key(text: str) -> Tuple[object, ...]:
    """Sort key that orders `Sheet_2` before `Sheet_10`."""
    return tuple(
        int(part) if part.isdigit() else part.lower()
        for part in re.split(r"(\d+)", text)
    )


# -------------------------
# Ingest
# -------------------------
def _read_rows(
    path: Path, required: Sequence[str]
) -> Iterator[Tuple[int, Dict[str, str]]]:
    try:
        handle = path.open("r", encoding="utf-8-sig", newline="")
    except OSError as exc:
        raise StorageError(f"Cannot open {path}: {exc}") from exc
    with handle:
        reader = csv.DictReader(handle)
        header = [name.strip() for name in (reader.fieldnames or [])]
        missing = [column for column in required if column not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        reader.fieldnames = header
        for row in reader:
            # DictReader fills cells missing from a short row with None.
            if any(row.get(column) is None for column in required):
                raise ParseError(
                    f"row has fewer cells than the {len(header)}-column header",
                    path=str(path),
                    line=reader.line_num,
                )
            yield reader.line_num, row


def _frame_from_row(row: Dict[str, str], path: Path, line: int) -> FrameRecord:
    try:
        return FrameRecord(
            winner=row[WINNER_COLUMN],
            round_progression=row[PROGRESSION_COLUMN],
            p1_damaged_pct=row[P1_COLUMN],
            p2_damaged_pct=row[P2_COLUMN],
        )
    except ValidationError as exc:
        first = exc.errors()[0]
        column = first["loc"][0] if first.get("loc") else "row"
        raise ParseError(
            f"{column}: {first['msg']}", path=str(path), line=line
        ) from exc


def _read_sheet_file(path: Path) -> List[FrameRecord]:
    return [
        _frame_from_row(row, path, line)
        for line, row in _read_rows(path, FRAME_COLUMNS)
    ]


def _read_multi_sheet_file(path: Path) -> List[SheetFrames]:
    grouped: "OrderedDict[str, List[FrameRecord]]" = OrderedDict()
    for line, row in _read_rows(path, (SHEET_COLUMN, *FRAME_COLUMNS)):
        sheet_id = (row.get(SHEET_COLUMN) or "").strip()
        if not sheet_id:
            raise ParseError("empty Sheet cell", path=str(path), line=line)
        grouped.setdefault(sheet_id, []).append(_frame_from_row(row, path, line))
    return sorted(grouped.items(), key=lambda item: natural_key(item[0]))


def parse_frames(source: Path) -> List[SheetFrames]:
    """
    Read frame records from a directory of per-sheet CSV files (sheet id =
    file stem) or from one CSV file with a `Sheet` column.

    Rows keep their file order. Sheets come back in natural sort order.
    """
    source = Path(source)
    if source.is_dir():
        files = sorted(source.glob("*.csv"), key=lambda p: natural_key(p.stem))
        if not files:
            raise DataError(f"No CSV files found in {source}")
        sheets = [(path.stem, _read_sheet_file(path)) for path in files]
    elif source.is_file():
        sheets = _read_multi_sheet_file(source)
    else:
        raise StorageError(f"Data source not found: {source}")
    total = sum(len(frames) for _, frames in sheets)
    logger.info(
        "Parsed %d frame rows from %d sheet(s) in %s", total, len(sheets), source
    )
    return sheets


def _close_round(sheet_id: str, index: int, frames: List[FrameRecord]) -> Round:
    winners = {frame.winner for frame in frames}
    if len(winners) > 1:
        raise IntegrityError(
            f"Winner label changes within round {index} of sheet {sheet_id}"
        )
    return Round(
        sheet_id=sheet_id,
        round_index=index,
        winner=frames[0].winner,
        features=[(frame.p1_damaged_pct, frame.p2_damaged_pct) for frame in frames],
    )


def split_rounds(sheets: Iterable[SheetFrames]) -> List[Round]:
    """
    Cut each sheet into rounds. A round starts at every row whose progression
    is strictly below the previous row's, which covers clean 100 -> 0 resets
    and resets where the exact 0.0 frame was not sampled.
    """
    rounds: List[Round] = []
    for sheet_id, frames in sheets:
        current: List[FrameRecord] = []
        index = 0
        for frame in frames:
            if current and frame.round_progression < current[-1].round_progression:
                rounds.append(_close_round(sheet_id, index, current))
                index += 1
                current = []
            current.append(frame)
        if current:
            rounds.append(_close_round(sheet_id, index, current))
    logger.info("Split %d round(s)", len(rounds))
    return rounds


# -------------------------
# Round preparation
# -------------------------
def truncation_length(length: int, p: float) -> int:
    if not 0 < p <= 1:
        raise ParameterError(f"truncation fraction must be in (0, 1], got {p}")
    # round() strips float noise such as 0.95 * 100 = 95.00000000000001
    return max(1, math.ceil(round(p * length, 9)))


def truncate_round(source: Round, p: float) -> Round:
    """Keep the first ceil(p * T) timesteps of `source`."""
    keep = truncation_length(source.length, p)
    if keep == source.length:
        return source
    return source.model_copy(update={"features": source.features[:keep]})


def truncate_rounds(rounds: Iterable[Round], p: float) -> List[Round]:
    return [truncate_round(r, p) for r in rounds]


def pad_batch(
    rounds: Sequence[Round], pad_value: float, scale: float = 1.0
) -> RoundBatch:
    """
    Stack `rounds` into one padded block.

    Real features are multiplied by `scale` before padding, so masked cells
    equal `pad_value` exactly whatever the scale.
    """
    if not rounds:
        raise DataError("Cannot pad an empty list of rounds")
    if pad_value not in (TRANSFORMER_PAD, LSTM_PAD):
        raise ParameterError(f"pad value must be -1 or 0, got {pad_value}")
    lengths = np.array([r.length for r in rounds], dtype=np.int64)
    max_len = int(lengths.max())
    features = np.full((len(rounds), max_len, 2), pad_value, dtype=np.float64)
    mask = np.zeros((len(rounds), max_len), dtype=bool)
    for i, r in enumerate(rounds):
        features[i, : r.length] = np.asarray(r.features, dtype=np.float64) * scale
        mask[i, : r.length] = True
    labels = np.array([r.winner for r in rounds], dtype=np.float64)
    keys = tuple((r.sheet_id, r.round_index) for r in rounds)
    return RoundBatch(features, mask, lengths, labels, float(pad_value), keys)


# -------------------------
# Grouped folds and class balance
# -------------------------
def ordered_sheet_ids(rounds: Iterable[Round]) -> List[str]:
    return sorted({r.sheet_id for r in rounds}, key=natural_key)


def make_folds(
    sheet_ids: Sequence[str],
    k: int = 5,
    block_size: Optional[int] = None,
    stride: Optional[int] = None,
    start: int = 0,
) -> List[FoldSplit]:
    """
    Build k grouped folds over an ordered list of sheet ids.

    Defaults partition the list into k contiguous blocks whose sizes differ
    by at most one. With an explicit window, fold j tests the sheets at
    positions [start + j*stride, start + j*stride + block_size); `stride`
    defaults to `block_size`. The published sliding scheme (Sheet_i to
    Sheet_(i+3)) is block_size=4, stride=1.
    """
    ids = list(sheet_ids)
    count = len(ids)
    if k < 2:
        raise ConfigurationError(f"k must be at least 2, got {k}")
    if len(set(ids)) != count:
        raise ConfigurationError("sheet ids must be unique")
    if count < k:
        raise DataError(f"{count} sheet(s) cannot form {k} folds")

    if block_size is None and stride is None and start == 0:
        blocks = [list(block) for block in np.array_split(np.arange(count), k)]
    else:
        size = block_size if block_size is not None else math.ceil(count / k)
        step = stride if stride is not None else size
        if size < 1 or step < 1 or start < 0:
            raise ConfigurationError(
                "block_size and stride must be positive, start non-negative"
            )
        if size >= count:
            raise ConfigurationError(
                f"block_size {size} leaves no training sheets out of {count}"
            )
        blocks = []
        for j in range(k):
            lo = start + j * step
            if lo + size > count:
                raise ConfigurationError(
                    f"fold {j} window [{lo}, {lo + size}) runs past "
                    f"the {count} available sheets"
                )
            blocks.append(list(range(lo, lo + size)))

    folds = []
    for j, block in enumerate(blocks):
        test = set(int(i) for i in block)
        folds.append(
            FoldSplit(
                fold_index=j,
                test_sheet_ids=[ids[i] for i in sorted(test)],
                train_sheet_ids=[ids[i] for i in range(count) if i not in test],
            )
        )
    return folds


def split_by_fold(
    rounds: Sequence[Round], fold: FoldSplit
) -> Tuple[List[Round], List[Round]]:
    test_ids = set(fold.test_sheet_ids)
    train = [r for r in rounds if r.sheet_id not in test_ids]
    test = [r for r in rounds if r.sheet_id in test_ids]
    return train, test


def class_distribution(rounds: Iterable[Round]) -> ClassDistribution:
    counts = {0: 0, 1: 0}
    for r in rounds:
        counts[r.winner] += 1
    total = counts[0] + counts[1]
    fractions = {label: (n / total if total else None) for label, n in counts.items()}
    return ClassDistribution(total=total, counts=counts, fractions=fractions)


def split_summary(train: Sequence[Round], test: Sequence[Round]) -> SplitSummary:
    return SplitSummary(
        overall=class_distribution([*train, *test]),
        train=class_distribution(train),
        test=class_distribution(test),
    )


# -------------------------
# Files
# -------------------------
def write_rounds(rounds: Iterable[Round], path: Path) -> None:
    """Canonical rounds file: one JSON document per line."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as handle:
            for r in rounds:
                handle.write(r.model_dump_json())
                handle.write("\n")
    except OSError as exc:
        raise StorageError(f"Cannot write rounds file {path}: {exc}") from exc


def read_rounds(path: Path) -> List[Round]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise StorageError(f"Cannot read rounds file {path}: {exc}") from exc
    rounds = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rounds.append(Round.model_validate(json.loads(line)))
        except (ValueError, ValidationError) as exc:
            raise ParseError(
                f"invalid round document: {exc}", path=str(path), line=line_no
            ) from exc
    return rounds


def progression_values(length: int) -> List[float]:
    if length < 2:
        raise DataError(
            "a round needs at least 2 frames to be written as a frame table"
        )
    return [100.0 * t / (length - 1) for t in range(length)]


def write_frames(rounds: Sequence[Round], out_dir: Path) -> List[Path]:
    """
    Write rounds back out as per-sheet frame tables (`<sheet_id>.csv`), the
    inverse of `parse_frames` + `split_rounds` for rounds of length >= 2.
    """
    out_dir = Path(out_dir)
    by_sheet: "OrderedDict[str, List[Round]]" = OrderedDict()
    for r in rounds:
        by_sheet.setdefault(r.sheet_id, []).append(r)
    written = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for sheet_id, sheet_rounds in by_sheet.items():
            path = out_dir / f"{sheet_id}.csv"
            with path.open("w", encoding="utf-8", newline="") as handle:
                writer = csv.writer(handle, lineterminator="\n")
                writer.writerow(FRAME_COLUMNS)
                for r in sheet_rounds:
                    progressions = progression_values(r.length)
                    for progression, (p1, p2) in zip(progressions, r.features):
                        writer.writerow(
                            [r.winner, repr(progression), repr(p1), repr(p2)]
                        )
            written.append(path)
    except OSError as exc:
        raise StorageError(f"Cannot write frame tables to {out_dir}: {exc}") from exc
    logger.info("Wrote %d sheet file(s) to %s", len(written), out_dir)
    return written


def load_rounds(source: Path) -> List[Round]:
    """Rounds from a CSV dataset (directory or single file) or a `.jsonl` file."""
    source = Path(source)
    if source.is_file() and source.suffix == ".jsonl":
        return read_rounds(source)
    return split_rounds(parse_frames(source))


def dataset_summary(source: Path, progression: float) -> DatasetSummary:
    sheets = parse_frames(source)
    rounds = split_rounds(sheets)
    if not rounds:
        raise DataError(f"No rounds found in {source}")
    truncated = truncate_rounds(rounds, progression)
    return DatasetSummary(
        total_rows=sum(len(frames) for _, frames in sheets),
        sheets=len(sheets),
        rounds=len(rounds),
        max_length=max(r.length for r in rounds),
        progression=progression,
        max_truncated_length=max(r.length for r in truncated),
        classes=class_distribution(rounds),
    )
