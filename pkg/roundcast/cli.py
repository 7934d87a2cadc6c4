"""
Command-line entry point: `roundcast synth | train | eval | predict | bench |
baselines | summary`.

Diagnostics and tables go to stderr; stdout carries only machine-readable
output (`predict` rows, `summary` JSON). Every command writes
`config_resolved.json` into its output directory, and `--config` replays
such a file with explicit flags taking precedence.

Exit codes: 0 success, 1 usage, 2 data/schema, 3 numeric/integrity.
"""

from __future__ import annotations

import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

import click
import typer
from pydantic import ValidationError
from rich.markup import escape
from rich.table import Table

from .baselines import BASELINE_MODELS, evaluate_baselines
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    dataset_summary,
    load_rounds,
    read_rounds,
    truncate_rounds,
    write_frames,
    write_rounds,
)
from .errors import RoundcastError, StorageError, UsageError
from .evaluation import (
    DEFAULT_BENCH_PROGRESSIONS,
    accuracy_at,
    bench_progressions,
    latency_trend_ok,
    roc_auc_ci,
    roc_curve,
    score_rounds,
    write_metrics_json,
    write_roc_csv,
)
from .logs import configure_logging, stderr_console
from .models import (
    BaselineConfig,
    FoldMetrics,
    LatencyReport,
    MetricsReport,
    RunConfig,
    TrainConfig,
)
from .settings import get_settings
from .synth import SYNTH_SHEETS, synth_generate
from .tensor import SeededRng
from .training import metrics_report, train_kfold, write_training_log

logger = logging.getLogger(__name__)

CONFIG_FILE = "config_resolved.json"

app = typer.Typer(
    help="Round winner prediction from damage time series.",
    no_args_is_help=True,
    add_completion=False,
)


@app.callback()
def main(
    log_level: Optional[str] = typer.Option(
        None, "--log-level", help="DEBUG, INFO, WARNING or ERROR."
    ),
    quiet: bool = typer.Option(
        False, "--quiet", "-q", help="Only warnings and errors."
    ),
) -> None:
    configure_logging(log_level or get_settings().log_level, quiet)


# -------------------------
# Helpers
# -------------------------
@contextmanager
def _reported() -> Iterator[None]:
    """Turn library errors into a one-line message and the matching exit code."""
    try:
        yield
    except RoundcastError as exc:
        stderr_console.print(f"[red]error:[/red] {escape(str(exc))}", highlight=False)
        raise typer.Exit(exc.exit_code) from exc


def _load_run_config(path: Optional[Path]) -> Optional[RunConfig]:
    if path is None:
        return None
    try:
        return RunConfig.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise StorageError(f"Cannot read config {path}: {exc}") from exc
    except ValidationError as exc:
        raise UsageError(f"{path} is not a valid run config: {exc}") from exc


def _option(flag: Any, replay: Optional[RunConfig], key: str, default: Any) -> Any:
    if flag is not None:
        return flag
    if replay is not None and key in replay.options:
        return replay.options[key]
    return default


def _train_config(replay: Optional[RunConfig], **flags: Any) -> TrainConfig:
    data: Dict[str, Any] = replay.train.model_dump(mode="json") if replay else {}
    given = {key: value for key, value in flags.items() if value is not None}
    if "architecture" in given and data.get("architecture") != given["architecture"]:
        # Architecture-dependent defaults must be re-resolved.
        for key in ("learning_rate", "batch_size", "network"):
            data.pop(key, None)
    data.update(given)
    try:
        return TrainConfig.model_validate(data)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(part) for part in error['loc'])}: {error['msg']}"
            for error in exc.errors()
        )
        raise UsageError(f"invalid training options: {problems}") from exc


def _data_source(flag: Optional[Path], replay: Optional[RunConfig]) -> Path:
    source = flag or (replay.data_dir if replay else None) or get_settings().data_dir
    if source is None:
        raise UsageError("no dataset given: pass --data or set ROUNDCAST_DATA_DIR")
    return Path(source)


def _output_dir(
    flag: Optional[Path], replay: Optional[RunConfig], command: str
) -> Path:
    if flag is not None:
        return flag
    if replay is not None and replay.output_dir is not None:
        return replay.output_dir
    return get_settings().output_dir / command


def _write_config(run: RunConfig, out_dir: Path) -> Path:
    path = out_dir / CONFIG_FILE
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(run.model_dump_json(indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"Cannot write {path}: {exc}") from exc
    return path


def _write_json(payload: Any, path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"Cannot write {path}: {exc}") from exc
    return path


def _checkpoint_path(flag: Optional[Path], replay: Optional[RunConfig]) -> Path:
    source = flag or (replay.checkpoint if replay else None)
    if source is None:
        raise UsageError("no checkpoint given: pass --checkpoint")
    return Path(source)


def _check_progression(value: Optional[float]) -> None:
    if value is not None and not 0.0 < value <= 1.0:
        raise UsageError(f"--progression must be in (0, 1], got {value}")


# -------------------------
# Commands
# -------------------------
@app.command()
def synth(
    rounds: Optional[int] = typer.Option(None, help="Number of rounds (>= 10)."),
    seed: Optional[int] = typer.Option(None, help="Generator seed."),
    noise: Optional[float] = typer.Option(
        None, help="Share of misleading rounds, 0..1."
    ),
    sheets: Optional[int] = typer.Option(None, help="Sheets to spread rounds over."),
    out: Optional[Path] = typer.Option(None, help="Output directory for sheet CSVs."),
    jsonl: Optional[bool] = typer.Option(
        None, "--jsonl/--no-jsonl", help="Also write rounds.jsonl."
    ),
    config: Optional[Path] = typer.Option(None, help="Replay a config_resolved.json."),
) -> None:
    """Write a synthetic dataset in the frame-table format."""
    with _reported():
        replay = _load_run_config(config)
        n_rounds = _option(rounds, replay, "rounds", 1000)
        noise_level = _option(noise, replay, "noise", 0.0)
        n_sheets = _option(sheets, replay, "sheets", SYNTH_SHEETS)
        write_jsonl = bool(_option(jsonl, replay, "jsonl", False))
        run_seed = seed if seed is not None else (replay.train.seed if replay else 0)
        out_dir = _output_dir(out, replay, "synth")
        generated = synth_generate(n_rounds, run_seed, noise_level, n_sheets)
        write_frames(generated, out_dir)
        if write_jsonl:
            write_rounds(generated, out_dir / "rounds.jsonl")
        _write_config(
            RunConfig(
                command="synth",
                train=TrainConfig(seed=run_seed),
                output_dir=out_dir,
                options={
                    "rounds": n_rounds,
                    "noise": noise_level,
                    "sheets": n_sheets,
                    "jsonl": write_jsonl,
                },
            ),
            out_dir,
        )


@app.command()
def train(
    arch: Optional[str] = typer.Option(None, help="lstm or transformer."),
    progression: Optional[float] = typer.Option(None, help="Kept share of each round."),
    data: Optional[Path] = typer.Option(None, help="Dataset directory, CSV or .jsonl."),
    folds: Optional[int] = typer.Option(None, help="Number of grouped folds."),
    epochs: Optional[int] = typer.Option(None),
    lr: Optional[float] = typer.Option(None, help="Learning rate."),
    batch_size: Optional[int] = typer.Option(None),
    weight_decay: Optional[float] = typer.Option(None),
    repeats: Optional[int] = typer.Option(None, help="Independent runs per fold."),
    seed: Optional[int] = typer.Option(None),
    resamples: Optional[int] = typer.Option(None, help="Bootstrap resamples."),
    block_size: Optional[int] = typer.Option(None, help="Test sheets per fold."),
    stride: Optional[int] = typer.Option(None, help="Sheet offset between folds."),
    start: Optional[int] = typer.Option(None, help="First test sheet (0-based)."),
    jobs: Optional[int] = typer.Option(None, help="Folds trained in parallel."),
    out: Optional[Path] = typer.Option(None, help="Output directory."),
    config: Optional[Path] = typer.Option(None, help="Replay a config_resolved.json."),
) -> None:
    """Grouped k-fold training; writes checkpoints, training log and metrics."""
    with _reported():
        _check_progression(progression)
        replay = _load_run_config(config)
        train_config = _train_config(
            replay,
            architecture=arch,
            progression=progression,
            folds=folds,
            epochs=epochs,
            learning_rate=lr,
            batch_size=batch_size,
            weight_decay=weight_decay,
            repeats=repeats,
            seed=seed,
            bootstrap_resamples=resamples,
            block_size=block_size,
            stride=stride,
            start=start,
        )
        source = _data_source(data, replay)
        out_dir = _output_dir(out, replay, "train")
        workers = jobs if jobs is not None else (replay.jobs if replay else 1)
        if workers < 1:
            raise UsageError(f"--jobs must be positive, got {workers}")
        run = RunConfig(
            command="train",
            train=train_config,
            data_dir=source,
            output_dir=out_dir,
            jobs=workers,
        )
        _write_config(run, out_dir)

        result = train_kfold(
            load_rounds(source),
            train_config,
            jobs=workers,
            show_progress=sys.stderr.isatty(),
        )
        for fold, model in zip(result.report.folds, result.models):
            save_checkpoint(
                model,
                out_dir / "checkpoints" / f"fold_{fold.fold_index}.json",
                progression=train_config.progression,
                feature_scale=train_config.feature_scale,
                seed=train_config.seed,
                fold_index=fold.fold_index,
                test_sheet_ids=fold.test_sheet_ids,
            )
        write_training_log(result.report, out_dir / "training_log.csv")
        write_metrics_json(metrics_report(result.report), out_dir / "metrics.json")
        _write_json(
            result.report.model_dump(mode="json"), out_dir / "train_report.json"
        )

        table = Table(
            title=f"{train_config.architecture.value} p={train_config.progression}"
        )
        for column in ("fold", "n_test", "AUC", "95% CI", "accuracy"):
            table.add_column(column)
        for fold in result.report.folds:
            table.add_row(
                str(fold.fold_index),
                str(fold.n_test),
                f"{fold.auc:.4f}",
                f"[{fold.ci_lo:.4f}, {fold.ci_hi:.4f}]",
                f"{fold.accuracy:.4f}",
            )
        stderr_console.print(table)
        stderr_console.print(f"mean AUC {result.report.mean_auc:.4f}")


@app.command(name="eval")
def evaluate(
    checkpoint: Optional[Path] = typer.Option(None, help="Checkpoint from train."),
    data: Optional[Path] = typer.Option(None, help="Dataset directory, CSV or .jsonl."),
    progression: Optional[float] = typer.Option(
        None, help="Defaults to the checkpoint's."
    ),
    resamples: Optional[int] = typer.Option(None, help="Bootstrap resamples."),
    seed: Optional[int] = typer.Option(None),
    all_rounds: bool = typer.Option(
        False, help="Score every round, not only the checkpoint's held-out sheets."
    ),
    out: Optional[Path] = typer.Option(None, help="Output directory."),
    config: Optional[Path] = typer.Option(None, help="Replay a config_resolved.json."),
) -> None:
    """Score a checkpoint; writes metrics.json and roc.csv."""
    with _reported():
        _check_progression(progression)
        replay = _load_run_config(config)
        checkpoint = _checkpoint_path(checkpoint, replay)
        all_rounds = all_rounds or bool(_option(None, replay, "all_rounds", False))
        model, meta = load_checkpoint(checkpoint)
        p = progression
        if p is None:
            p = replay.train.progression if replay else meta.progression
        if p != meta.progression:
            logger.warning(
                "Checkpoint was trained at progression %s, evaluating at %s",
                meta.progression,
                p,
            )
        eval_config = _train_config(
            replay,
            architecture=model.architecture.value,
            progression=p,
            seed=seed,
            bootstrap_resamples=resamples,
        )
        source = _data_source(data, replay)
        out_dir = _output_dir(out, replay, "eval")
        options = {"all_rounds": all_rounds}
        _write_config(
            RunConfig(
                command="eval",
                train=eval_config,
                data_dir=source,
                output_dir=out_dir,
                checkpoint=checkpoint,
                options=options,
            ),
            out_dir,
        )

        rounds = load_rounds(source)
        held_out = set(meta.test_sheet_ids or [])
        selected = [r for r in rounds if r.sheet_id in held_out]
        if held_out and not all_rounds and selected:
            rounds = selected
        elif held_out:
            logger.warning("Scoring rounds from sheets this checkpoint was trained on")
        rounds = truncate_rounds(rounds, p)
        scores = score_rounds(model, rounds, meta.feature_scale)
        labels = [r.winner for r in rounds]
        estimate = roc_auc_ci(
            scores, labels, eval_config.bootstrap_resamples, SeededRng(eval_config.seed)
        )
        report = MetricsReport(
            model=model.architecture.value,
            progression=p,
            folds=[
                FoldMetrics(
                    fold_index=meta.fold_index if meta.fold_index is not None else 0,
                    auc=estimate.auc,
                    ci_lo=estimate.lo,
                    ci_hi=estimate.hi,
                    auc_std=estimate.std,
                    accuracy=accuracy_at(scores, labels),
                    n_test=len(rounds),
                )
            ],
        )
        write_metrics_json(report, out_dir / "metrics.json")
        write_roc_csv(roc_curve(scores, labels), out_dir / "roc.csv")
        stderr_console.print(
            f"AUC {estimate.auc:.4f} [{estimate.lo:.4f}, {estimate.hi:.4f}] "
            f"on {len(rounds)} rounds"
        )


@app.command()
def predict(
    checkpoint: Optional[Path] = typer.Option(None, help="Checkpoint from train."),
    round_file: Optional[Path] = typer.Option(None, help="Rounds in JSON-lines form."),
    progression: Optional[float] = typer.Option(
        None, help="Truncate each round first; by default rounds are used as given."
    ),
    out: Optional[Path] = typer.Option(None, help="Where config_resolved.json goes."),
    config: Optional[Path] = typer.Option(None, help="Replay a config_resolved.json."),
) -> None:
    """Print `sheet_id,round_index,probability` for each round."""
    with _reported():
        replay = _load_run_config(config)
        checkpoint = _checkpoint_path(checkpoint, replay)
        source = _option(round_file, replay, "round_file", None)
        if source is None:
            raise UsageError("no rounds given: pass --round-file")
        round_file = Path(source)
        progression = _option(progression, replay, "progression", None)
        _check_progression(progression)
        model, meta = load_checkpoint(checkpoint)
        out_dir = _output_dir(out, replay, "predict")
        _write_config(
            RunConfig(
                command="predict",
                train=_train_config(replay, architecture=model.architecture.value),
                output_dir=out_dir,
                checkpoint=checkpoint,
                options={"round_file": str(round_file), "progression": progression},
            ),
            out_dir,
        )
        rounds = read_rounds(round_file)
        if progression is not None:
            rounds = truncate_rounds(rounds, progression)
        probabilities = score_rounds(model, rounds, meta.feature_scale)
        for r, probability in zip(rounds, probabilities):
            typer.echo(f"{r.sheet_id},{r.round_index},{float(probability)!r}")


@app.command()
def bench(
    checkpoint: Optional[Path] = typer.Option(None, help="Checkpoint from train."),
    data: Optional[Path] = typer.Option(
        None, help="Rounds to time; synthetic rounds when omitted."
    ),
    progression: Optional[List[float]] = typer.Option(
        None, help="Repeatable; defaults to 0.25, 0.75 and 0.95."
    ),
    reps: Optional[int] = typer.Option(
        None, help="Timed forward passes per progression [default: 100]."
    ),
    warmup: Optional[int] = typer.Option(None, help="Untimed passes [default: 10]."),
    batch_size: Optional[int] = typer.Option(
        None, help="Rounds per timed forward pass [default: 1]."
    ),
    seed: Optional[int] = typer.Option(None, help="Seed for synthetic rounds."),
    out: Optional[Path] = typer.Option(None, help="Output directory."),
    config: Optional[Path] = typer.Option(None, help="Replay a config_resolved.json."),
) -> None:
    """Inference latency per progression; writes latency.json."""
    with _reported():
        replay = _load_run_config(config)
        progressions = list(
            progression
            or _option(None, replay, "progressions", DEFAULT_BENCH_PROGRESSIONS)
        )
        for value in progressions:
            _check_progression(value)
        reps = int(_option(reps, replay, "reps", 100))
        warmup = int(_option(warmup, replay, "warmup", 10))
        batch_size = int(_option(batch_size, replay, "batch_size", 1))
        if batch_size < 1:
            raise UsageError(f"--batch-size must be positive, got {batch_size}")
        data = data or (replay.data_dir if replay else None)
        checkpoint = _checkpoint_path(checkpoint, replay)
        model, meta = load_checkpoint(checkpoint)
        bench_config = _train_config(
            replay, architecture=model.architecture.value, seed=seed
        )
        seed = bench_config.seed
        out_dir = _output_dir(out, replay, "bench")
        _write_config(
            RunConfig(
                command="bench",
                train=bench_config,
                data_dir=data,
                output_dir=out_dir,
                checkpoint=checkpoint,
                options={
                    "progressions": progressions,
                    "reps": reps,
                    "warmup": warmup,
                    "batch_size": batch_size,
                },
            ),
            out_dir,
        )
        if data is not None:
            rounds = load_rounds(data)
        else:
            rounds = synth_generate(max(batch_size, SYNTH_SHEETS), seed)
        # Longest rounds first so every progression times a full-length prefix.
        rounds = sorted(rounds, key=lambda r: -r.length)
        rows = bench_progressions(
            model,
            rounds,
            progressions,
            repetitions=reps,
            warmup=warmup,
            feature_scale=meta.feature_scale,
            batch_size=batch_size,
        )
        monotone = latency_trend_ok(rows)
        if not monotone:
            logger.warning("Mean latency is not non-decreasing in progression")
        report = LatencyReport(
            model=model.architecture.value, rows=rows, monotone=monotone
        )
        path = out_dir / "latency.json"
        try:
            path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"Cannot write {path}: {exc}") from exc

        table = Table(title=f"{model.architecture.value} inference latency")
        for column in ("progression", "B", "T", "mean ms", "std ms"):
            table.add_column(column)
        for row in rows:
            table.add_row(
                f"{row.progression:.2f}",
                str(row.batch_size),
                str(row.seq_len),
                f"{row.mean_ms:.3f}",
                f"{row.std_ms:.3f}",
            )
        stderr_console.print(table)


@app.command()
def baselines(
    data: Optional[Path] = typer.Option(None, help="Dataset directory, CSV or .jsonl."),
    progression: Optional[float] = typer.Option(None, help="Kept share of each round."),
    models: Optional[List[str]] = typer.Option(None, help="Repeatable: knn, svm, rf."),
    folds: Optional[int] = typer.Option(None),
    seed: Optional[int] = typer.Option(None),
    resamples: Optional[int] = typer.Option(None, help="Bootstrap resamples."),
    k: Optional[int] = typer.Option(None, help="KNN neighbours."),
    trees: Optional[int] = typer.Option(None, help="Random forest size."),
    svm_reg: Optional[float] = typer.Option(None, help="SVM regularization."),
    svm_epochs: Optional[int] = typer.Option(None),
    block_size: Optional[int] = typer.Option(None, help="Test sheets per fold."),
    stride: Optional[int] = typer.Option(None, help="Sheet offset between folds."),
    start: Optional[int] = typer.Option(None, help="First test sheet (0-based)."),
    out: Optional[Path] = typer.Option(None, help="Output directory."),
    config: Optional[Path] = typer.Option(None, help="Replay a config_resolved.json."),
) -> None:
    """KNN, SVM and random forest under the same grouped folds."""
    with _reported():
        _check_progression(progression)
        replay = _load_run_config(config)
        chosen = list(models or _option(None, replay, "models", list(BASELINE_MODELS)))
        unknown = [name for name in chosen if name not in BASELINE_MODELS]
        if unknown:
            raise UsageError(
                f"unknown baseline(s) {unknown}; choose from {BASELINE_MODELS}"
            )
        train_config = _train_config(
            replay,
            progression=progression,
            folds=folds,
            seed=seed,
            bootstrap_resamples=resamples,
            block_size=block_size,
            stride=stride,
            start=start,
        )
        defaults = BaselineConfig()
        try:
            baseline_config = BaselineConfig(
                k=_option(k, replay, "k", defaults.k),
                svm_reg=_option(svm_reg, replay, "svm_reg", defaults.svm_reg),
                svm_epochs=_option(
                    svm_epochs, replay, "svm_epochs", defaults.svm_epochs
                ),
                n_trees=_option(trees, replay, "n_trees", defaults.n_trees),
            )
        except ValidationError as exc:
            raise UsageError(f"invalid baseline options: {exc}") from exc
        source = _data_source(data, replay)
        out_dir = _output_dir(out, replay, "baselines")
        _write_config(
            RunConfig(
                command="baselines",
                train=train_config,
                data_dir=source,
                output_dir=out_dir,
                options={"models": chosen, **baseline_config.model_dump()},
            ),
            out_dir,
        )
        reports = evaluate_baselines(
            load_rounds(source), train_config, baseline_config, chosen
        )
        _write_json(
            [report.model_dump(mode="json") for report in reports],
            out_dir / "baselines.json",
        )
        table = Table(title=f"baselines p={train_config.progression}")
        table.add_column("model")
        table.add_column("mean AUC")
        for report in reports:
            table.add_row(report.model, f"{report.mean_auc:.4f}")
        stderr_console.print(table)


@app.command()
def summary(
    data: Optional[Path] = typer.Option(None, help="Dataset directory or CSV."),
    progression: Optional[float] = typer.Option(
        None, help="Truncation used for max length [default: 0.75]."
    ),
    out: Optional[Path] = typer.Option(None, help="Where config_resolved.json goes."),
    config: Optional[Path] = typer.Option(None, help="Replay a config_resolved.json."),
) -> None:
    """Dataset bookkeeping as JSON on stdout."""
    with _reported():
        _check_progression(progression)
        replay = _load_run_config(config)
        summary_config = _train_config(replay, progression=progression)
        source = _data_source(data, replay)
        out_dir = _output_dir(out, replay, "summary")
        _write_config(
            RunConfig(
                command="summary",
                train=summary_config,
                data_dir=source,
                output_dir=out_dir,
            ),
            out_dir,
        )
        report = dataset_summary(source, summary_config.progression)
        typer.echo(report.model_dump_json(indent=2))


def run() -> None:
    """Console-script entry point; parse errors exit with the usage code."""
    try:
        code = app(standalone_mode=False)
    except click.exceptions.UsageError as exc:
        exc.show()
        sys.exit(UsageError.exit_code)
    except click.exceptions.Abort:
        sys.exit(UsageError.exit_code)
    sys.exit(code if isinstance(code, int) else 0)
