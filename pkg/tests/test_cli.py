from __future__ import annotations

import json
from pathlib import Path

import pytest

from selfedit.backends.mock import MockBackend, synthetic_squad_dict
from selfedit.cli import main, recompute_reports
from selfedit.errors import FormatError
from selfedit.runlog import read_log
from selfedit.squad import ingest_squad, select_passages

FIXTURES = Path(__file__).parent / "fixtures"


def write_dataset(path: Path, n: int = 4, q: int = 2, seed: int = 3) -> Path:
    path.write_text(json.dumps(synthetic_squad_dict(n, q, seed=seed)), encoding="utf-8")
    return path


def write_config(path: Path, dataset: Path, out: Path, archive: Path, **run_overrides) -> Path:
    run = dict(
        N_passages=4, M_templates=3, C_completions=2, C_b_baseline_completions=2,
        E_eval_runs=2, k_top=2, exploit_count=2, explore_count=1,
        mode="with_archive", parallelism=1, rng_seed=11,
    )
    run.update(run_overrides)
    config = {
        "run": run,
        "train_dataset": str(dataset),
        "validation_dataset": str(dataset),
        "validation_passages": 4,
        "archive_path": str(archive),
        "out_dir": str(out),
        "max_tokens": 512,
    }
    path.write_text(json.dumps(config), encoding="utf-8")
    return path


class TestIngestSquad:
    def test_minimal_fixture(self, tmp_path) -> None:
        data = {
            "data": [
                {
                    "title": "Topic",
                    "paragraphs": [
                        {
                            "context": "Something true.",
                            "qas": [
                                {"question": "What?", "answers": [{"text": "true", "answer_start": 10}]}
                            ],
                        }
                    ],
                }
            ]
        }
        path = tmp_path / "d.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        passages = ingest_squad(path)
        assert len(passages) == 1
        assert passages[0].id == "Topic#p0"
        assert passages[0].questions[0].gold_answer == "true"

    def test_paragraph_without_questions_skipped(self, tmp_path, caplog) -> None:
        data = {
            "data": [
                {
                    "title": "T",
                    "paragraphs": [
                        {"context": "No questions here.", "qas": []},
                        {
                            "context": "Kept.",
                            "qas": [{"question": "Q?", "answers": [{"text": "Kept", "answer_start": 0}]}],
                        },
                    ],
                }
            ]
        }
        path = tmp_path / "d.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        passages = ingest_squad(path)
        assert len(passages) == 1
        assert passages[0].body == "Kept."

    def test_multi_answer_uses_first(self, tmp_path) -> None:
        data = {
            "data": [
                {
                    "title": "T",
                    "paragraphs": [
                        {
                            "context": "a b c",
                            "qas": [
                                {
                                    "question": "Q?",
                                    "answers": [
                                        {"text": "first", "answer_start": 0},
                                        {"text": "second", "answer_start": 2},
                                    ],
                                }
                            ],
                        }
                    ],
                }
            ]
        }
        path = tmp_path / "d.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        assert ingest_squad(path)[0].questions[0].gold_answer == "first"

    def test_malformed_reports_json_path(self, tmp_path) -> None:
        path = tmp_path / "d.json"
        path.write_text(json.dumps({"data": [{"title": "T", "paragraphs": [{"context": 5, "qas": []}]}]}))
        with pytest.raises(FormatError) as info:
            ingest_squad(path)
        assert "$.data[0].paragraphs[0].context" in str(info.value)

    def test_select_first_n_and_ids_file(self, tmp_path) -> None:
        dataset = write_dataset(tmp_path / "d.json", n=6)
        passages = ingest_squad(dataset)
        first = select_passages(passages, 3)
        assert [p.id for p in first] == [p.id for p in passages[:3]]
        ids_file = tmp_path / "ids.txt"
        ids_file.write_text(f"{passages[4].id}\n{passages[1].id}\n", encoding="utf-8")
        chosen = select_passages(passages, 2, ids_file)
        assert [p.id for p in chosen] == [passages[4].id, passages[1].id]


class TestSeedArchiveCommand:
    def test_fresh_and_refuse_and_force(self, tmp_path) -> None:
        dataset = write_dataset(tmp_path / "d.json")
        archive = tmp_path / "archive.json"
        config = write_config(tmp_path / "cfg.json", dataset, tmp_path / "out", archive)
        assert main(["--config", str(config), "seed-archive"]) == 0
        entries = json.loads(archive.read_text(encoding="utf-8"))
        assert len(entries) == 4
        assert main(["--config", str(config), "seed-archive"]) == 2
        assert main(["--config", str(config), "seed-archive", "--force"]) == 0


class TestRunCommand:
    def test_run_writes_artifacts(self, tmp_path) -> None:
        dataset = write_dataset(tmp_path / "d.json")
        out = tmp_path / "out"
        archive = tmp_path / "archive.json"
        config = write_config(tmp_path / "cfg.json", dataset, out, archive)
        assert main(["--config", str(config), "run", "--iterations", "2"]) == 0
        assert (out / "run_log.jsonl").exists()
        assert (out / "reports.csv").exists()
        assert (out / "reports.md").exists()
        checkpoints = (out / "checkpoints.txt").read_text(encoding="utf-8").splitlines()
        assert len(checkpoints) == 2
        archive_entries = json.loads(archive.read_text(encoding="utf-8"))
        assert len(archive_entries) == 4 + 2 * 3  # seeds + M per iteration

    def test_baseline_rewrite_mode(self, tmp_path) -> None:
        dataset = write_dataset(tmp_path / "d.json")
        out = tmp_path / "out"
        config = write_config(
            tmp_path / "cfg.json", dataset, out, tmp_path / "archive.json",
            mode="baseline_rewrite",
        )
        assert main(["--config", str(config), "run", "--iterations", "1"]) == 0
        events = read_log(out / "run_log.jsonl")
        created = [e for e in events if e["event"] == "template_created"]
        assert len(created) == 1
        assert created[0]["instruction"].startswith("Let's read the following passage and rewrite")

    def test_same_seed_same_bytes(self, tmp_path) -> None:
        dataset = write_dataset(tmp_path / "d.json")
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / name
            archive = out / "archive.json"
            config = write_config(tmp_path / f"cfg_{name}.json", dataset, out, archive)
            assert main(["--config", str(config), "run", "--iterations", "2"]) == 0
            outputs.append(
                (
                    (out / "reports.csv").read_bytes(),
                    (out / "run_log.jsonl").read_bytes(),
                    archive.read_bytes(),
                )
            )
        assert outputs[0] == outputs[1]


class TestValidateCommand:
    def test_validate_after_run(self, tmp_path) -> None:
        dataset = write_dataset(tmp_path / "d.json")
        out = tmp_path / "out"
        archive = tmp_path / "archive.json"
        config = write_config(tmp_path / "cfg.json", dataset, out, archive)
        assert main(["--config", str(config), "run", "--iterations", "1"]) == 0
        checkpoint = (out / "checkpoints.txt").read_text().split()[-1]
        assert main(["--config", str(config), "validate", "--checkpoint", checkpoint]) == 0
        row = (out / "validation_report.csv").read_text(encoding="utf-8").splitlines()[1]
        assert row.startswith("0,")
        events = read_log(out / "validation_log.jsonl")
        evaluated = [e for e in events if e["event"] == "self_edit_evaluated"]
        assert len(evaluated) == 4  # one per validation passage
        first = (out / "validation_report.csv").read_bytes()
        assert main(["--config", str(config), "validate", "--checkpoint", checkpoint]) == 0
        assert (out / "validation_report.csv").read_bytes() == first

    def test_missing_checkpoint_nonzero_exit(self, tmp_path) -> None:
        dataset = write_dataset(tmp_path / "d.json")
        out = tmp_path / "out"
        archive = tmp_path / "archive.json"
        config = write_config(tmp_path / "cfg.json", dataset, out, archive)
        assert main(["--config", str(config), "seed-archive"]) == 0
        code = main(["--config", str(config), "validate", "--checkpoint", "ckpt-missing"])
        assert code != 0


class TestAnalyzeCommand:
    def test_untampered_log_zero_diffs(self, tmp_path) -> None:
        dataset = write_dataset(tmp_path / "d.json")
        out = tmp_path / "out"
        config = write_config(tmp_path / "cfg.json", dataset, out, tmp_path / "archive.json")
        assert main(["--config", str(config), "run", "--iterations", "2"]) == 0
        assert main(["analyze", "--log", str(out / "run_log.jsonl")]) == 0

    def test_tampered_log_reports_one_diff(self, tmp_path, capsys) -> None:
        dataset = write_dataset(tmp_path / "d.json")
        out = tmp_path / "out"
        config = write_config(tmp_path / "cfg.json", dataset, out, tmp_path / "archive.json")
        assert main(["--config", str(config), "run", "--iterations", "1"]) == 0
        log_path = out / "run_log.jsonl"
        lines = log_path.read_text(encoding="utf-8").splitlines()
        for i, line in enumerate(lines):
            event = json.loads(line)
            if event["event"] == "self_edit_evaluated" and event["mean_accuracy"] > 0:
                event["run_accuracies"] = [0.0 for _ in event["run_accuracies"]]
                event["mean_accuracy"] = 0.0
                lines[i] = json.dumps(event)
                break
        log_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        assert main(["analyze", "--log", str(log_path)]) == 4
        stdout = capsys.readouterr().out
        assert "MISMATCH" in stdout

    def test_template_corpus_reproduces_hp_column(self, tmp_path) -> None:
        # Log with only template_created events, one iteration per corpus row.
        corpus = json.loads((FIXTURES / "template_corpus_no_archive.json").read_text(encoding="utf-8"))
        log_path = tmp_path / "log.jsonl"
        with log_path.open("w", encoding="utf-8") as fh:
            for iteration, templates in enumerate(corpus):
                for index, template in enumerate(templates):
                    fh.write(
                        json.dumps(
                            {
                                "event": "template_created",
                                "iteration": iteration,
                                "template_index": index,
                                "decoding_mode": "exploit",
                                "instruction": template["data_creation_instruction"],
                                "hyperparameters": template["hyperparameters"],
                            }
                        )
                        + "\n"
                    )
        out_csv = tmp_path / "recomputed.csv"
        assert main(["analyze", "--log", str(log_path), "--out-csv", str(out_csv)]) == 0
        mock = MockBackend([])
        recomputed = recompute_reports(read_log(log_path), lambda t: mock.embed(t).components)
        expected = [0.83549, 0.92889, 0.92690, 0.91786, 0.97500]
        for iteration, value in enumerate(expected):
            assert recomputed[iteration]["hp_similarity"] == pytest.approx(value, abs=1e-3)
        rows = out_csv.read_text(encoding="utf-8").splitlines()[1:]
        assert len(rows) == 5


class TestReportCommand:
    def test_report_renders_from_log(self, tmp_path) -> None:
        dataset = write_dataset(tmp_path / "d.json")
        out = tmp_path / "out"
        config = write_config(tmp_path / "cfg.json", dataset, out, tmp_path / "archive.json")
        assert main(["--config", str(config), "run", "--iterations", "1"]) == 0
        report_dir = tmp_path / "rendered"
        assert main(["report", "--log", str(out / "run_log.jsonl"), "--out", str(report_dir)]) == 0
        rendered = (report_dir / "reports.csv").read_text(encoding="utf-8")
        assert rendered == (out / "reports.csv").read_text(encoding="utf-8")


class TestConfigErrors:
    def test_missing_dataset_is_config_error(self, tmp_path) -> None:
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"run": {
            "N_passages": 1, "M_templates": 1, "C_completions": 1, "C_b_baseline_completions": 1,
            "E_eval_runs": 1, "k_top": 1, "exploit_count": 1, "explore_count": 0,
            "mode": "no_archive",
        }}), encoding="utf-8")
        assert main(["--config", str(config), "run"]) == 2

    def test_with_archive_requires_archive_path(self, tmp_path) -> None:
        dataset = write_dataset(tmp_path / "d.json")
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({
            "run": {
                "N_passages": 4, "M_templates": 2, "C_completions": 1, "C_b_baseline_completions": 1,
                "E_eval_runs": 1, "k_top": 1, "exploit_count": 1, "explore_count": 1,
                "mode": "with_archive",
            },
            "train_dataset": str(dataset),
        }), encoding="utf-8")
        assert main(["--config", str(config), "run"]) == 2


class TestConfigRoundTrip:
    def test_parse_serialize_parse_identity(self, tmp_path) -> None:
        from selfedit.cli import load_cli_config

        dataset = write_dataset(tmp_path / "d.json")
        first_path = write_config(tmp_path / "cfg.json", dataset, tmp_path / "out", tmp_path / "archive.json")
        first = load_cli_config(first_path, {})
        second_path = tmp_path / "cfg2.json"
        second_path.write_text(json.dumps(first.to_json_dict()), encoding="utf-8")
        second = load_cli_config(second_path, {})
        assert second == first
