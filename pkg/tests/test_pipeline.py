from __future__ import annotations

import json

import pytest

from conftest import make_hp, make_run_config
from selfedit.archive import archive_to_json, seed_archive
from selfedit.backends import BackendSuite, ModelHandle
from selfedit.backends.mock import MockBackend
from selfedit.errors import DomainError, EmptyAfterSplit, TemplateBudgetExhausted, TrainingError
from selfedit.model import Provenance, SelfEdit, SelfEditTemplate
from selfedit.pipeline import (
    BASELINE_HYPERPARAMETERS,
    CompletionSlot,
    IterationState,
    RETRY_BUDGET,
    apply_and_evaluate,
    complete_templates,
    create_self_edit_templates,
    evaluate_baseline_accuracy,
    fixed_baseline_template,
    run_training_iteration,
    run_validation,
    split_baseline_completion,
    train_model,
)
from selfedit.runlog import RunLog, read_log

BASE = ModelHandle(id="base", kind="base_checkpoint")


def make_state(archive=None, seed: int = 7) -> IterationState:
    return IterationState(iteration=0, model=BASE, archive=archive, rng_seed=seed)


class GarbageGeneration:
    """Never produces JSON; exercises the retry budget."""

    def __init__(self):
        self.calls = 0

    def generate(self, model, prompt, d, seed) -> str:
        self.calls += 1
        return "nothing useful"


class FailingTrainer:
    def train_adapter(self, base, sequences, h):
        raise TrainingError("scripted failure")

    def answer(self, model, question):
        return "unknown"

    def drop_adapter(self, handle):
        pass

    def sft(self, base, examples):
        raise TrainingError("scripted failure")


class TestCreateTemplates:
    def test_split_counts_and_modes(self, passages, mock_suite) -> None:
        cfg = make_run_config(M_templates=5, exploit_count=3, explore_count=2)
        templates, meta = create_self_edit_templates(make_state(), cfg, mock_suite)
        assert len(templates) == 5
        assert [t.provenance.decoding_mode for t in templates] == ["exploit"] * 3 + ["explore"] * 2
        assert all(t.provenance.iteration == 0 for t in templates)
        assert meta.kind == "template_meta"

    def test_single_template_for_validation(self, passages, mock_suite) -> None:
        cfg = make_run_config()
        templates, _ = create_self_edit_templates(
            make_state(), cfg, mock_suite, m_templates=1, exploit_count=1
        )
        assert len(templates) == 1
        assert templates[0].provenance.decoding_mode == "exploit"

    def test_deterministic_across_calls(self, passages, mock_suite) -> None:
        cfg = make_run_config()
        a, _ = create_self_edit_templates(make_state(), cfg, mock_suite)
        b, _ = create_self_edit_templates(make_state(), cfg, mock_suite)
        assert a == b

    def test_budget_exhaustion_is_fatal(self, mock_suite) -> None:
        garbage = GarbageGeneration()
        suite = BackendSuite(
            generation=garbage, adapters=mock_suite.adapters,
            judge=mock_suite.judge, embedder=mock_suite.embedder,
        )
        cfg = make_run_config()
        with pytest.raises(TemplateBudgetExhausted):
            create_self_edit_templates(make_state(), cfg, suite)
        assert garbage.calls == RETRY_BUDGET

    def test_with_archive_embeds_view(self, passages, mock_suite) -> None:
        cfg = make_run_config(mode="with_archive")
        _, meta = create_self_edit_templates(make_state(archive=seed_archive()), cfg, mock_suite)
        assert "Repeat the passage verbatim." in meta.text

    def test_baseline_mode_rejected(self, mock_suite) -> None:
        cfg = make_run_config(mode="baseline_rewrite")
        with pytest.raises(DomainError):
            create_self_edit_templates(make_state(), cfg, mock_suite)


class TestCompleteTemplates:
    def test_learned_counts(self, passages, mock_suite) -> None:
        cfg = make_run_config(N_passages=len(passages))
        templates, _ = create_self_edit_templates(make_state(), cfg, mock_suite)
        slots = complete_templates(make_state(), passages, templates, 2, mock_suite, cfg)
        assert len(slots) == len(passages) * len(templates) * 2
        keys = [s.key() for s in slots]
        assert len(set(keys)) == len(keys)

    def test_single_cell(self, passages, mock_suite) -> None:
        cfg = make_run_config(N_passages=1, M_templates=1, exploit_count=1, explore_count=0, k_top=1)
        templates, _ = create_self_edit_templates(make_state(), cfg, mock_suite, m_templates=1, exploit_count=1)
        slots = complete_templates(make_state(), passages[:1], templates[:1], 1, mock_suite, cfg)
        assert len(slots) == 1

    def test_baseline_counts_and_split(self, passages, mock_suite) -> None:
        cfg = make_run_config(mode="baseline_rewrite", N_passages=len(passages), C_b_baseline_completions=3)
        template = fixed_baseline_template(cfg, 0)
        slots = complete_templates(make_state(), passages, [template], 3, mock_suite, cfg)
        assert len(slots) == len(passages) * 3
        produced = [s for s in slots if s.edit is not None]
        assert produced, "baseline completions should mostly parse"
        for slot in produced:
            for seq in slot.edit.training_sequences:
                assert "\n" not in seq and seq.strip() == seq

    def test_decoding_follows_template_provenance(self, passages) -> None:
        recorded = []

        class Recorder:
            def generate(self, model, prompt, d, seed):
                recorded.append(d.temperature)
                return json.dumps({"training_sequences": ["x"]})

        suite = BackendSuite(
            generation=Recorder(), adapters=FailingTrainer(), judge=MockBackend([]), embedder=MockBackend([])
        )
        cfg = make_run_config(N_passages=1)
        explore_template = SelfEditTemplate(
            "plan", make_hp(), Provenance(iteration=0, decoding_mode="explore")
        )
        complete_templates(make_state(), passages[:1], [explore_template], 1, suite, cfg)
        assert recorded == [1.3]


class TestSplitBaselineCompletion:
    def test_splits_and_drops_empty(self) -> None:
        assert split_baseline_completion("a\nb\n\nc") == ["a", "b", "c"]

    def test_single_line(self) -> None:
        assert split_baseline_completion("single line") == ["single line"]

    def test_all_empty_raises(self) -> None:
        with pytest.raises(EmptyAfterSplit):
            split_baseline_completion("\n\n")


class GoldenAnswerer:
    """Answers every question with its gold (or half of them, by index)."""

    def __init__(self, passage, every_other: bool = False):
        self._gold = {qa.question: qa.gold_answer for qa in passage.questions}
        self._skip = every_other

    def answer(self, model, question):
        if self._skip and list(self._gold).index(question) % 2 == 1:
            return "unknown"
        return self._gold.get(question, "unknown")

    def train_adapter(self, base, sequences, h):
        raise NotImplementedError

    def drop_adapter(self, handle):
        pass

    def sft(self, base, examples):
        raise NotImplementedError


class TestEvaluate:
    def test_unedited_model_scores_zero(self, passages, mock_suite) -> None:
        assert evaluate_baseline_accuracy(BASE, passages[0], 2, mock_suite) == 0.0

    def test_gold_verbatim_model_scores_one(self, passages, mock_suite) -> None:
        p = passages[0]
        suite = BackendSuite(
            generation=mock_suite.generation, adapters=GoldenAnswerer(p),
            judge=mock_suite.judge, embedder=mock_suite.embedder,
        )
        assert evaluate_baseline_accuracy(BASE, p, 3, suite) == 1.0

    def test_half_correct_fraction(self, mock_suite) -> None:
        # Brute-force count: 2 of 4 questions correct on every run -> 0.5.
        from conftest import make_passage

        p = make_passage("half", 4)
        suite = BackendSuite(
            generation=mock_suite.generation, adapters=GoldenAnswerer(p, every_other=True),
            judge=mock_suite.judge, embedder=mock_suite.embedder,
        )
        assert evaluate_baseline_accuracy(BASE, p, 2, suite) == 0.5

    def test_full_coverage_scores_one(self, passages, mock_suite) -> None:
        p = passages[0]
        template = SelfEditTemplate("plan", make_hp(), Provenance(iteration=0, decoding_mode="exploit"))
        edit = SelfEdit(template=template, passage=p, training_sequences=(p.body,), completion_index=0)
        slot = CompletionSlot(passage=p, template_index=0, completion_index=0, edit=edit)
        result = apply_and_evaluate(BASE, slot, 3, 0.0, mock_suite)
        assert result.mean_accuracy == 1.0
        assert result.run_accuracies == (1.0, 1.0, 1.0)
        assert not result.failed

    def test_collapse_learning_rate_scores_zero(self, passages, mock_suite) -> None:
        p = passages[0]
        template = SelfEditTemplate(
            "plan", make_hp(learning_rate=5e-3), Provenance(iteration=0, decoding_mode="exploit")
        )
        edit = SelfEdit(template=template, passage=p, training_sequences=(p.body,), completion_index=0)
        slot = CompletionSlot(passage=p, template_index=0, completion_index=0, edit=edit)
        result = apply_and_evaluate(BASE, slot, 3, 0.0, mock_suite)
        assert result.mean_accuracy == 0.0

    def test_partial_coverage_fraction(self, passages, mock_suite) -> None:
        p = passages[0]  # three questions; cover exactly two facts
        lines = p.body.split("\n")
        template = SelfEditTemplate("plan", make_hp(), Provenance(iteration=0, decoding_mode="exploit"))
        edit = SelfEdit(template=template, passage=p, training_sequences=tuple(lines[:2]), completion_index=0)
        slot = CompletionSlot(passage=p, template_index=0, completion_index=0, edit=edit)
        result = apply_and_evaluate(BASE, slot, 2, 0.0, mock_suite)
        assert result.mean_accuracy == pytest.approx(2 / 3)

    def test_training_failure_yields_flagged_zeros(self, passages, mock_suite) -> None:
        p = passages[0]
        template = SelfEditTemplate("plan", make_hp(), Provenance(iteration=0, decoding_mode="exploit"))
        edit = SelfEdit(template=template, passage=p, training_sequences=("x",), completion_index=0)
        slot = CompletionSlot(passage=p, template_index=0, completion_index=0, edit=edit)
        suite = BackendSuite(
            generation=mock_suite.generation, adapters=FailingTrainer(),
            judge=mock_suite.judge, embedder=mock_suite.embedder,
        )
        result = apply_and_evaluate(BASE, slot, 2, 0.0, suite)
        assert result.failed
        assert result.run_accuracies == (0.0, 0.0)
        assert result.self_edit is edit

    def test_failed_generation_slot(self, passages, mock_suite) -> None:
        slot = CompletionSlot(passage=passages[0], template_index=1, completion_index=2, edit=None)
        result = apply_and_evaluate(BASE, slot, 2, 0.0, mock_suite)
        assert result.failed and result.self_edit is None
        assert result.sort_key() == (passages[0].id, 1, 2)

    def test_adapter_released_after_evaluation(self, passages) -> None:
        mock = MockBackend(passages)
        suite = BackendSuite(generation=mock, adapters=mock, judge=mock, embedder=mock)
        p = passages[0]
        template = SelfEditTemplate("plan", make_hp(), Provenance(iteration=0, decoding_mode="exploit"))
        edit = SelfEdit(template=template, passage=p, training_sequences=(p.body,), completion_index=0)
        slot = CompletionSlot(passage=p, template_index=0, completion_index=0, edit=edit)
        apply_and_evaluate(BASE, slot, 1, 0.0, suite)
        assert mock._adapters == {}


class TestTrainModel:
    def test_empty_dataset_is_noop(self, mock_suite) -> None:
        state = make_state()
        assert train_model(state, [], mock_suite) is BASE

    def test_nonempty_dataset_returns_new_checkpoint(self, mock_suite) -> None:
        from selfedit.model import SftExample

        state = make_state()
        handle = train_model(state, [SftExample(prompt_text="p", target_text="t", kind="template_proposal")], mock_suite)
        assert handle.id != BASE.id
        assert handle.kind == "base_checkpoint"


class TestTrainingIteration:
    def test_counts_and_state_advance(self, passages, mock_suite) -> None:
        cfg = make_run_config(N_passages=len(passages))
        state, results = run_training_iteration(make_state(), cfg, passages, mock_suite)
        assert len(results.eval_results) == len(passages) * cfg.M_templates * cfg.C_completions
        assert state.iteration == 1
        assert results.report.hp_similarity is not None

    def test_baseline_mode_counts(self, passages, mock_suite) -> None:
        cfg = make_run_config(mode="baseline_implications", N_passages=len(passages))
        state, results = run_training_iteration(make_state(), cfg, passages, mock_suite)
        assert len(results.eval_results) == len(passages) * cfg.C_b_baseline_completions
        assert results.report.hp_similarity is None
        assert results.report.text_similarity is None

    def test_with_archive_appends_m_entries(self, passages, mock_suite) -> None:
        cfg = make_run_config(mode="with_archive", N_passages=len(passages))
        state, _ = run_training_iteration(make_state(archive=seed_archive()), cfg, passages, mock_suite)
        assert len(state.archive.entries) == 4 + cfg.M_templates

    def test_archive_required_iff_with_archive(self, passages, mock_suite) -> None:
        with pytest.raises(DomainError):
            run_training_iteration(make_state(archive=seed_archive()), make_run_config(N_passages=len(passages)), passages, mock_suite)
        with pytest.raises(DomainError):
            run_training_iteration(make_state(), make_run_config(mode="with_archive", N_passages=len(passages)), passages, mock_suite)

    def test_deterministic_reports(self, passages) -> None:
        cfg = make_run_config(N_passages=len(passages))

        def one_run():
            mock = MockBackend(passages)
            suite = BackendSuite(generation=mock, adapters=mock, judge=mock, embedder=mock)
            _, results = run_training_iteration(make_state(), cfg, passages, suite)
            return results.report

        assert one_run() == one_run()

    def test_parallelism_does_not_change_output(self, passages) -> None:
        def run_with(parallelism: int):
            mock = MockBackend(passages)
            suite = BackendSuite(generation=mock, adapters=mock, judge=mock, embedder=mock)
            cfg = make_run_config(N_passages=len(passages), parallelism=parallelism)
            _, results = run_training_iteration(make_state(), cfg, passages, suite)
            return results

        serial = run_with(1)
        parallel = run_with(4)
        assert serial.report == parallel.report
        assert [r.sort_key() for r in serial.eval_results] == [r.sort_key() for r in parallel.eval_results]

    def test_adapters_never_compound_within_iteration(self, passages) -> None:
        seen_bases = set()

        class SpyMock(MockBackend):
            def train_adapter(self, base, sequences, h):
                seen_bases.add(base.id)
                return super().train_adapter(base, sequences, h)

        mock = SpyMock(passages)
        suite = BackendSuite(generation=mock, adapters=mock, judge=mock, embedder=mock)
        cfg = make_run_config(N_passages=len(passages))
        run_training_iteration(make_state(), cfg, passages, suite)
        assert seen_bases == {BASE.id}

    def test_log_events_cover_every_surface(self, passages, mock_suite, tmp_path) -> None:
        cfg = make_run_config(mode="with_archive", N_passages=len(passages))
        with RunLog(tmp_path / "log.jsonl") as log:
            run_training_iteration(make_state(archive=seed_archive()), cfg, passages, mock_suite, log=log)
        events = {e["event"] for e in read_log(tmp_path / "log.jsonl")}
        assert {"template_created", "baseline_evaluated", "self_edit_evaluated",
                "iteration_report", "sft_built", "checkpoint", "archive_updated"} <= events


class TestValidation:
    def test_one_result_per_passage_and_no_archive_mutation(self, passages, mock_suite) -> None:
        archive = seed_archive()
        before = archive_to_json(archive)
        cfg = make_run_config(mode="with_archive", N_passages=len(passages))
        report = run_validation(BASE, passages, cfg, mock_suite, archive=archive)
        assert len(report.per_passage_accuracy) == len(passages)
        assert archive_to_json(archive) == before
        assert report.text_similarity is None  # single template

    def test_baseline_validation_uses_fixed_template(self, passages, mock_suite) -> None:
        cfg = make_run_config(mode="baseline_rewrite", N_passages=len(passages))
        report = run_validation(BASE, passages, cfg, mock_suite)
        assert len(report.per_passage_accuracy) == len(passages)

    def test_validation_deterministic(self, passages, mock_suite) -> None:
        cfg = make_run_config(N_passages=len(passages))
        a = run_validation(BASE, passages, cfg, mock_suite)
        b = run_validation(BASE, passages, cfg, mock_suite)
        assert a == b


class TestBaselineTemplate:
    def test_fixed_hyperparameters(self) -> None:
        assert BASELINE_HYPERPARAMETERS.lora_rank == 32
        assert BASELINE_HYPERPARAMETERS.lora_alpha == 64
        assert BASELINE_HYPERPARAMETERS.learning_rate == 1e-3
        assert BASELINE_HYPERPARAMETERS.num_epochs == 10
        assert BASELINE_HYPERPARAMETERS.gradient_accumulation_steps == 1

    def test_instruction_matches_mode(self) -> None:
        cfg = make_run_config(mode="baseline_implications")
        t = fixed_baseline_template(cfg, 0)
        assert t.data_creation_instruction.startswith("Let's read the following passage and produce")
        assert t.provenance.decoding_mode == "baseline"
