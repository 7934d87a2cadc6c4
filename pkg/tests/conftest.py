import sys
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import pytest

# Ensure project root is on sys.path when tests are launched from subprocesses
ROOT = Path(__file__).resolve().parents[1]
root_str = str(ROOT)
if root_str not in sys.path:
    sys.path.insert(0, root_str)

from roundcast.checkpoint import save_checkpoint  # noqa: E402
from roundcast.data import pad_batch, write_frames, write_rounds  # noqa: E402
from roundcast.models import Architecture, ModelConfig, Round  # noqa: E402
from roundcast.nn import SequenceClassifier, build_model  # noqa: E402
from roundcast.settings import OUTPUT_DIR_ENV, get_settings  # noqa: E402
from roundcast.synth import synth_generate  # noqa: E402
from roundcast.tensor import SeededRng  # noqa: E402


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run slow learning checks"
    )


def pytest_collection_modifyitems(
    config: pytest.Config, items: List[pytest.Item]
) -> None:
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _isolated_settings(tmp_path: Path, monkeypatch: pytest.MonkeyPatch):
    """Point default output directories at a per-test location."""
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "runs"))
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def make_round() -> Callable[..., Round]:
    """Factory building a Round from a list of (p1, p2) damage pairs."""

    def _create(
        features: Sequence[Tuple[float, float]],
        winner: int = 0,
        sheet_id: str = "Sheet_1",
        round_index: int = 0,
    ) -> Round:
        return Round(
            sheet_id=sheet_id,
            round_index=round_index,
            winner=winner,
            features=[tuple(pair) for pair in features],
        )

    return _create


@pytest.fixture
def random_round(make_round: Callable[..., Round]) -> Callable[..., Round]:
    """Factory for a round of random damage values in [0, 100)."""

    def _create(
        length: int, seed: int = 0, winner: int = 0, round_index: int = 0
    ) -> Round:
        values = SeededRng(seed, length).uniform((length, 2), 0.0, 100.0)
        return make_round(
            [tuple(row) for row in values.tolist()],
            winner=winner,
            round_index=round_index,
        )

    return _create


@pytest.fixture
def make_model() -> Callable[..., SequenceClassifier]:
    """Factory for a freshly initialized classifier of either architecture."""

    def _create(
        architecture: str = "lstm", seed: int = 0, **overrides
    ) -> SequenceClassifier:
        config = ModelConfig(architecture=Architecture(architecture), **overrides)
        return build_model(config, SeededRng(seed))

    return _create


@pytest.fixture
def make_batch():
    """Factory padding rounds for a given model (pad value and feature scale 0.01)."""

    def _create(
        model: SequenceClassifier, rounds: Sequence[Round], scale: float = 0.01
    ):
        return pad_batch(list(rounds), model.pad_value, scale)

    return _create


@pytest.fixture(scope="session")
def synthetic_rounds() -> List[Round]:
    """40 noise-free synthetic rounds over 10 sheets."""
    return synth_generate(40, seed=7)


@pytest.fixture
def dataset_dir(tmp_path: Path, synthetic_rounds: List[Round]) -> Path:
    """Per-sheet CSV dataset written from `synthetic_rounds`."""
    out = tmp_path / "data"
    write_frames(synthetic_rounds, out)
    return out


@pytest.fixture
def rounds_file(tmp_path: Path) -> Callable[[Sequence[Round]], Path]:
    """Factory writing rounds to a JSON-lines file."""

    def _create(rounds: Sequence[Round], name: str = "rounds.jsonl") -> Path:
        path = tmp_path / name
        write_rounds(rounds, path)
        return path

    return _create


@pytest.fixture
def checkpoint_file(
    tmp_path: Path, make_model: Callable[..., SequenceClassifier]
) -> Callable[..., Path]:
    """Factory saving a freshly initialized model; returns the checkpoint path."""

    def _create(
        architecture: str = "lstm",
        progression: float = 0.75,
        test_sheet_ids: Optional[List[str]] = None,
        name: Optional[str] = None,
    ) -> Path:
        model = make_model(architecture)
        path = tmp_path / "checkpoints" / (name or f"{architecture}.json")
        return save_checkpoint(
            model,
            path,
            progression=progression,
            feature_scale=0.01,
            seed=0,
            fold_index=0 if test_sheet_ids is not None else None,
            test_sheet_ids=test_sheet_ids,
        )

    return _create
