"""Command-line driver: seed-archive, run, validate, analyze, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from statistics import fmean
from typing import Any, Mapping, Sequence

from .archive import Archive, load_archive, save_archive, seed_archive
from .backends import DEFAULT_MAX_TOKENS, BackendSuite, ModelHandle
from .backends.mock import BASE_MODEL_ID, MockBackend
from .backends.remote import RemoteBackend
from .errors import (
    BackendUnavailable,
    ConfigError,
    DomainError,
    FormatError,
    SelfEditError,
)
from .metrics import (
    REPORT_COLUMNS,
    IterationReport,
    emit_report,
    intra_iteration_hp_similarity,
    intra_iteration_text_similarity,
    mean_and_ci,
    passage_accuracy,
)
from .model import Hyperparameters, Passage, RunConfig
from .pipeline import IterationState, run_training_iteration, run_validation
from .prompts import PromptLibrary
from .runlog import RunLog, read_log
from .squad import ingest_squad, select_passages

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_PIPELINE = 4

BACKEND_GROUPS = ("generate", "train", "judge", "embed")


@dataclass
class CliConfig:
    run: RunConfig
    train_dataset: Path
    validation_dataset: Path | None = None
    train_ids_file: Path | None = None
    validation_ids_file: Path | None = None
    validation_passages: int | None = None
    archive_path: Path | None = None
    out_dir: Path = Path("out")
    backends: dict[str, str] = field(default_factory=lambda: {g: "mock" for g in BACKEND_GROUPS})
    max_tokens: int = DEFAULT_MAX_TOKENS
    fixture_overrides: dict[str, str] = field(default_factory=dict)
    base_model_id: str = BASE_MODEL_ID

    def __post_init__(self) -> None:
        unknown = set(self.backends) - set(BACKEND_GROUPS)
        if unknown:
            raise ConfigError(f"unknown backend groups: {sorted(unknown)}")
        for group in BACKEND_GROUPS:
            self.backends.setdefault(group, "mock")
        if self.run.mode == "with_archive" and self.archive_path is None:
            raise ConfigError("with_archive mode requires archive_path")

    def library(self) -> PromptLibrary:
        return PromptLibrary(self.fixture_overrides or None)

    def to_json_dict(self) -> dict[str, Any]:
        """The config-file shape; load_cli_config(write(this)) is identity."""
        data: dict[str, Any] = {
            "run": self.run.to_json_dict(),
            "train_dataset": str(self.train_dataset),
            "backends": dict(self.backends),
            "out_dir": str(self.out_dir),
            "max_tokens": self.max_tokens,
            "fixture_overrides": dict(self.fixture_overrides),
            "base_model_id": self.base_model_id,
        }
        for key in ("validation_dataset", "train_ids_file", "validation_ids_file", "archive_path"):
            value = getattr(self, key)
            if value is not None:
                data[key] = str(value)
        if self.validation_passages is not None:
            data["validation_passages"] = self.validation_passages
        return data


def load_cli_config(path: Path | str | None, overrides: Mapping[str, Any]) -> CliConfig:
    """File values first, then flag overrides; flags win."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    run_data = dict(data.get("run", {}))
    for key in ("mode", "rng_seed", "parallelism"):
        if overrides.get(key) is not None:
            run_data[key] = overrides[key]
    try:
        run = RunConfig.from_json_dict(run_data)
    except (DomainError, TypeError, KeyError) as exc:
        raise ConfigError(f"bad run config: {exc}") from exc
    backends = dict(data.get("backends", {}))
    for group in BACKEND_GROUPS:
        value = overrides.get(f"backend_{group}")
        if value is not None:
            backends[group] = value

    def setting(key: str) -> Any:
        # argparse produces None entries for unset flags; fall through to file.
        value = overrides.get(key)
        return data.get(key) if value is None else value

    def path_of(key: str) -> Path | None:
        value = setting(key)
        return Path(value) if value is not None else None

    train_dataset = path_of("train_dataset")
    if train_dataset is None:
        raise ConfigError("train_dataset is required")
    out_dir = path_of("out_dir") or Path("out")
    return CliConfig(
        run=run,
        train_dataset=train_dataset,
        validation_dataset=path_of("validation_dataset"),
        train_ids_file=path_of("train_ids_file"),
        validation_ids_file=path_of("validation_ids_file"),
        validation_passages=setting("validation_passages"),
        archive_path=path_of("archive_path"),
        out_dir=out_dir,
        backends=backends,
        max_tokens=int(data.get("max_tokens", DEFAULT_MAX_TOKENS)),
        fixture_overrides=dict(data.get("fixture_overrides", {})),
        base_model_id=str(data.get("base_model_id", BASE_MODEL_ID)),
    )


def build_suite(cfg: CliConfig, mock_passages: Sequence[Passage]) -> BackendSuite:
    """Wire the four capability groups; 'mock' shares one in-process backend."""
    mock: MockBackend | None = None
    remotes: dict[str, RemoteBackend] = {}

    def backend_for(group: str):
        nonlocal mock
        target = cfg.backends[group]
        if target == "mock":
            if mock is None:
                mock = MockBackend(mock_passages, state_dir=cfg.out_dir / "mock_state")
            return mock
        if target not in remotes:
            remotes[target] = RemoteBackend(target)
        return remotes[target]

    return BackendSuite(
        generation=backend_for("generate"),
        adapters=backend_for("train"),
        judge=backend_for("judge"),
        embedder=backend_for("embed"),
    )


def _load_train_passages(cfg: CliConfig) -> list[Passage]:
    passages = ingest_squad(cfg.train_dataset)
    return select_passages(passages, cfg.run.N_passages, cfg.train_ids_file)


def _load_validation_passages(cfg: CliConfig) -> list[Passage]:
    if cfg.validation_dataset is None:
        raise ConfigError("validation_dataset is required for validate")
    passages = ingest_squad(cfg.validation_dataset)
    if cfg.validation_ids_file is not None:
        return select_passages(passages, len(passages), cfg.validation_ids_file)
    if cfg.validation_passages is not None:
        return select_passages(passages, int(cfg.validation_passages))
    return passages


def cmd_seed_archive(cfg: CliConfig, force: bool) -> int:
    if cfg.archive_path is None:
        raise ConfigError("archive_path is required for seed-archive")
    if cfg.archive_path.exists() and not force:
        raise ConfigError(f"{cfg.archive_path} exists; pass --force to overwrite")
    save_archive(seed_archive(), cfg.archive_path)
    logger.info("seeded archive at %s", cfg.archive_path)
    return EXIT_OK


def cmd_run(cfg: CliConfig, iterations: int) -> int:
    passages = _load_train_passages(cfg)
    suite = build_suite(cfg, passages)
    library = cfg.library()
    cfg.out_dir.mkdir(parents=True, exist_ok=True)

    archive: Archive | None = None
    if cfg.run.mode == "with_archive":
        if cfg.archive_path.exists():
            archive = load_archive(cfg.archive_path)
        else:
            archive = seed_archive()
            save_archive(archive, cfg.archive_path)

    state = IterationState(
        iteration=0,
        model=ModelHandle(id=cfg.base_model_id, kind="base_checkpoint"),
        archive=archive,
        rng_seed=cfg.run.rng_seed,
    )
    reports: list[IterationReport] = []
    checkpoint_lines = []
    with RunLog(cfg.out_dir / "run_log.jsonl") as log:
        log.log(
            "run_config",
            run=cfg.run.to_json_dict(),
            max_tokens=cfg.max_tokens,
            passage_ids=[p.id for p in passages],
            backends={g: ("mock" if cfg.backends[g] == "mock" else cfg.backends[g]) for g in BACKEND_GROUPS},
        )
        for _ in range(iterations):
            state, results = run_training_iteration(
                state, cfg.run, passages, suite,
                library=library, max_tokens=cfg.max_tokens, log=log,
            )
            reports.append(results.report)
            checkpoint_lines.append(f"{state.iteration - 1}\t{state.model.id}")
            if cfg.run.mode == "with_archive":
                save_archive(state.archive, cfg.archive_path)
                save_archive(state.archive, cfg.out_dir / f"archive_iter_{state.iteration - 1}.json")
    emit_report(reports, "csv", cfg.out_dir / "reports.csv")
    emit_report(reports, "markdown", cfg.out_dir / "reports.md")
    (cfg.out_dir / "checkpoints.txt").write_text("\n".join(checkpoint_lines) + "\n", encoding="utf-8")
    logger.info("run complete: %d iterations, final checkpoint %s", iterations, state.model.id)
    return EXIT_OK


def cmd_validate(cfg: CliConfig, checkpoint_id: str) -> int:
    passages = _load_validation_passages(cfg)
    suite = build_suite(cfg, passages)
    library = cfg.library()
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    archive = None
    if cfg.run.mode == "with_archive":
        if not cfg.archive_path.exists():
            raise ConfigError(f"archive {cfg.archive_path} not found")
        archive = load_archive(cfg.archive_path)
    checkpoint = ModelHandle(id=checkpoint_id, kind="base_checkpoint")
    with RunLog(cfg.out_dir / "validation_log.jsonl") as log:
        log.log("run_config", run=cfg.run.to_json_dict(), checkpoint=checkpoint_id,
                passage_ids=[p.id for p in passages], max_tokens=cfg.max_tokens)
        report = run_validation(
            checkpoint, passages, cfg.run, suite,
            archive=archive, library=library, max_tokens=cfg.max_tokens, log=log,
        )
    emit_report([report], "csv", cfg.out_dir / "validation_report.csv")
    logger.info("validation: mean=%.4f delta=%.4f", report.mean_accuracy, report.ci_delta)
    return EXIT_OK


def recompute_reports(events: Sequence[Mapping[str, Any]], embedder) -> dict[int, dict[str, Any]]:
    """Rebuild per-iteration report fields from raw log events only."""
    templates: dict[int, list[tuple[int, str, dict]]] = {}
    grids: dict[int, dict[str, list[float]]] = {}
    chars: dict[int, list[int]] = {}
    for event in events:
        kind = event.get("event")
        iteration = event.get("iteration")
        if kind == "template_created":
            templates.setdefault(iteration, []).append(
                (event["template_index"], event["instruction"], event["hyperparameters"])
            )
        elif kind == "self_edit_evaluated":
            grids.setdefault(iteration, {}).setdefault(event["passage_id"], []).extend(
                event["run_accuracies"]
            )
            if event.get("data_chars") is not None:
                chars.setdefault(iteration, []).append(event["data_chars"])
    recomputed: dict[int, dict[str, Any]] = {}
    for iteration in sorted(set(templates) | set(grids)):
        row: dict[str, Any] = {
            "mean_accuracy": None,
            "ci_delta": None,
            "text_similarity": None,
            "hp_similarity": None,
            "avg_synth_chars": None,
            "per_passage_accuracy": None,
        }
        grid = grids.get(iteration)
        if grid:
            per_passage = {pid: passage_accuracy(values) for pid, values in grid.items()}
            mean, delta = mean_and_ci(list(per_passage.values()))
            row.update(mean_accuracy=mean, ci_delta=delta, per_passage_accuracy=per_passage)
            row["avg_synth_chars"] = fmean(chars[iteration]) if chars.get(iteration) else 0.0
        slots = sorted(templates.get(iteration, []))
        if len(slots) >= 2:
            row["text_similarity"] = intra_iteration_text_similarity(
                [instruction for _, instruction, _ in slots], embedder
            )
            row["hp_similarity"] = intra_iteration_hp_similarity(
                [Hyperparameters.from_json_dict(hp) for _, _, hp in slots]
            )
        recomputed[iteration] = row
    return recomputed


def diff_reports(
    events: Sequence[Mapping[str, Any]], recomputed: Mapping[int, Mapping[str, Any]]
) -> list[str]:
    """Field-by-field differences between logged and recomputed reports."""
    diffs: list[str] = []
    for event in events:
        if event.get("event") != "iteration_report":
            continue
        iteration = event["iteration"]
        logged = event["report"]
        fresh = recomputed.get(iteration)
        if fresh is None:
            diffs.append(f"iteration {iteration}: logged report has no recomputable events")
            continue
        for key in ("mean_accuracy", "ci_delta", "text_similarity", "hp_similarity", "avg_synth_chars", "per_passage_accuracy"):
            if logged.get(key) != fresh.get(key):
                diffs.append(f"iteration {iteration} {key}: logged={logged.get(key)!r} recomputed={fresh.get(key)!r}")
    return diffs


def _cell(value: Any) -> str:
    return "" if value is None else f"{value:.6g}"


def write_recomputed_csv(recomputed: Mapping[int, Mapping[str, Any]], path: Path) -> None:
    lines = [",".join(REPORT_COLUMNS)]
    for iteration in sorted(recomputed):
        row = recomputed[iteration]
        lines.append(
            ",".join(
                [
                    str(iteration),
                    _cell(row["mean_accuracy"]),
                    _cell(row["ci_delta"]),
                    _cell(row["text_similarity"]),
                    _cell(row["hp_similarity"]),
                    _cell(row["avg_synth_chars"]),
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_analyze(log_path: Path, out_csv: Path | None, embed_target: str = "mock") -> int:
    events = read_log(log_path)
    if embed_target == "mock":
        embedder_backend = MockBackend([])
    else:
        embedder_backend = RemoteBackend(embed_target)
    recomputed = recompute_reports(events, lambda text: embedder_backend.embed(text).components)
    if out_csv is not None:
        write_recomputed_csv(recomputed, out_csv)
    diffs = diff_reports(events, recomputed)
    for diff in diffs:
        print(f"MISMATCH {diff}")
    if diffs:
        return EXIT_PIPELINE
    print(f"analyze: {len(recomputed)} iteration(s), zero diffs")
    return EXIT_OK


def cmd_report(log_path: Path, out_dir: Path, fmt: str) -> int:
    events = read_log(log_path)
    reports = [
        IterationReport.from_json_dict(e["report"]) for e in events if e.get("event") == "iteration_report"
    ]
    out_dir.mkdir(parents=True, exist_ok=True)
    suffix = "csv" if fmt == "csv" else "md"
    emit_report(reports, fmt, out_dir / f"reports.{suffix}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfedit", description=__doc__)
    parser.add_argument("--config", type=Path, default=None, help="JSON config file")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--mode", choices=("no_archive", "with_archive", "baseline_implications", "baseline_rewrite"))
        p.add_argument("--seed", type=int, dest="rng_seed")
        p.add_argument("--parallelism", type=int)
        p.add_argument("--out", type=Path, dest="out_dir")
        p.add_argument("--train-dataset", type=Path, dest="train_dataset")
        p.add_argument("--validation-dataset", type=Path, dest="validation_dataset")
        p.add_argument("--validation-passages", type=int, dest="validation_passages")
        p.add_argument("--archive", type=Path, dest="archive_path")
        for group in BACKEND_GROUPS:
            p.add_argument(f"--backend-{group}", dest=f"backend_{group}", metavar="mock|URL")

    p_seed = sub.add_parser("seed-archive", help="write the seeded archive file")
    add_common(p_seed)
    p_seed.add_argument("--force", action="store_true")

    p_run = sub.add_parser("run", help="execute training iterations")
    add_common(p_run)
    p_run.add_argument("--iterations", type=int, default=1)

    p_val = sub.add_parser("validate", help="score a checkpoint on the validation split")
    add_common(p_val)
    p_val.add_argument("--checkpoint", required=True)

    p_an = sub.add_parser("analyze", help="recompute reports from a run log and diff")
    add_common(p_an)
    p_an.add_argument("--log", type=Path, required=True)
    p_an.add_argument("--out-csv", type=Path, default=None)

    p_rep = sub.add_parser("report", help="render report rows from a run log")
    add_common(p_rep)
    p_rep.add_argument("--log", type=Path, required=True)
    p_rep.add_argument("--format", choices=("csv", "markdown"), default="csv")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        if args.command == "analyze":
            embed_target = overrides.get("backend_embed") or "mock"
            return cmd_analyze(args.log, args.out_csv, embed_target)
        if args.command == "report":
            out_dir = overrides.get("out_dir") or Path("out")
            return cmd_report(args.log, out_dir, args.format)
        cfg = load_cli_config(args.config, overrides)
        if args.command == "seed-archive":
            return cmd_seed_archive(cfg, args.force)
        if args.command == "run":
            return cmd_run(cfg, args.iterations)
        if args.command == "validate":
            return cmd_validate(cfg, args.checkpoint)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, FormatError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except BackendUnavailable as exc:
        logger.error("backend unavailable: %s", exc)
        return EXIT_BACKEND
    except SelfEditError as exc:
        logger.error("pipeline failure: %s", exc)
        return EXIT_PIPELINE
    except OSError as exc:
        logger.error("io failure: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
