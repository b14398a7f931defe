"""The outer loop: propose templates, fill them per passage, apply each
resulting self-edit to a cloned model, score it, distill the winners back
into the proposer, and (optionally) grow the archive."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from statistics import fmean
from typing import Sequence

from .archive import Archive, aggregate_template_metrics, archive_view, normalized_gain, update_archive
from .backends import DEFAULT_MAX_TOKENS, BackendSuite, ModelHandle, decoding_for_mode
from .errors import (
    BackendUnavailable,
    DegenerateBaseline,
    DomainError,
    EmptyAfterSplit,
    GenerationError,
    JudgeFormatError,
    ParseError,
    SchemaError,
    TemplateBudgetExhausted,
    TrainingError,
)
from .hashing import stable_int
from .metrics import IterationReport, avg_synth_chars, intra_iteration_hp_similarity, intra_iteration_text_similarity, mean_and_ci, passage_accuracy
from .model import (
    EvalResult,
    Hyperparameters,
    Passage,
    Provenance,
    RunConfig,
    SelfEdit,
    SelfEditTemplate,
    SftExample,
    canonical_completion_json,
)
from .prompts import (
    PromptLibrary,
    PromptText,
    ArchiveView,
    baseline_instruction,
    build_baseline_completion_prompt,
    build_completion_prompt,
    build_template_meta_prompt,
    default_library,
    parse_completion_json,
    parse_template_json,
)
from .runlog import NullRunLog, RunLog

# Attempts per generation slot before giving up on it.
RETRY_BUDGET = 3

# Fixed fine-tuning settings used by both baseline modes (the original
# single-passage recipe: rank 32, alpha 64, lr 1e-3, 10 epochs, batch 1).
BASELINE_HYPERPARAMETERS = Hyperparameters(
    lora_rank=32,
    lora_alpha=64,
    lora_dropout=0.0,
    learning_rate=1e-3,
    num_epochs=10,
    gradient_accumulation_steps=1,
)


@dataclass(frozen=True)
class IterationState:
    iteration: int
    model: ModelHandle
    archive: Archive | None
    rng_seed: int


@dataclass(frozen=True)
class CompletionSlot:
    """One (passage, template, completion) cell; ``edit`` is None when the
    completion could not be turned into a valid self-edit."""

    passage: Passage
    template_index: int
    completion_index: int
    edit: SelfEdit | None

    def key(self) -> tuple[str, int, int]:
        return (self.passage.id, self.template_index, self.completion_index)


@dataclass(frozen=True)
class IterationResults:
    templates: tuple[SelfEditTemplate, ...]
    meta_prompt: PromptText | None
    eval_results: tuple[EvalResult, ...]
    report: IterationReport


def _slot_mode(cfg: RunConfig, slot: int) -> str:
    return "exploit" if slot < cfg.exploit_count else "explore"


def create_self_edit_templates(
    s: IterationState,
    cfg: RunConfig,
    suite: BackendSuite,
    *,
    library: PromptLibrary | None = None,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    view: ArchiveView | None = None,
    m_templates: int | None = None,
    exploit_count: int | None = None,
    log: RunLog | None = None,
) -> tuple[list[SelfEditTemplate], PromptText]:
    """Sample templates for this iteration: exploit slots first, then explore.

    Each slot gets up to RETRY_BUDGET generations (fresh seed per attempt);
    a slot that never parses is fatal for the iteration.
    """
    if cfg.mode not in ("no_archive", "with_archive"):
        raise DomainError("mode", f"template creation requires a learned mode, got {cfg.mode!r}")
    library = library or default_library()
    log = log or NullRunLog()
    if view is None and cfg.mode == "with_archive":
        if s.archive is None:
            raise DomainError("archive", "with_archive mode requires an archive")
        view = archive_view(s.archive)
    meta_prompt = build_template_meta_prompt(view, library)
    m = cfg.M_templates if m_templates is None else m_templates
    exploit = cfg.exploit_count if exploit_count is None else exploit_count
    templates: list[SelfEditTemplate] = []
    for slot in range(m):
        mode = "exploit" if slot < exploit else "explore"
        params = decoding_for_mode(mode, max_tokens)
        template = None
        for attempt in range(RETRY_BUDGET):
            seed = stable_int(str(s.rng_seed), "template", str(s.iteration), str(slot), str(attempt))
            raw = suite.generation.generate(s.model, meta_prompt, params, seed)
            try:
                template = parse_template_json(raw, Provenance(iteration=s.iteration, decoding_mode=mode))
                break
            except (ParseError, SchemaError, DomainError) as exc:
                log.log(
                    "generation_rejected",
                    iteration=s.iteration,
                    stage="template",
                    slot=slot,
                    attempt=attempt,
                    reason=f"{type(exc).__name__}: {exc}",
                )
        if template is None:
            raise TemplateBudgetExhausted(f"template slot {slot} failed {RETRY_BUDGET} attempts")
        templates.append(template)
        log.log(
            "template_created",
            iteration=s.iteration,
            template_index=slot,
            decoding_mode=mode,
            instruction=template.data_creation_instruction,
            hyperparameters=template.hyperparameters.to_json_dict(),
        )
    return templates, meta_prompt


def fixed_baseline_template(cfg: RunConfig, iteration: int, library: PromptLibrary | None = None) -> SelfEditTemplate:
    return SelfEditTemplate(
        data_creation_instruction=baseline_instruction(cfg.mode, library),
        hyperparameters=BASELINE_HYPERPARAMETERS,
        provenance=Provenance(iteration=iteration, decoding_mode="baseline"),
    )


def split_baseline_completion(raw: str) -> list[str]:
    """Newline-split a fixed-template completion into training sequences."""
    lines = [line.strip() for line in raw.split("\n")]
    lines = [line for line in lines if line]
    if not lines:
        raise EmptyAfterSplit("completion had no non-empty lines")
    return lines


def complete_templates(
    s: IterationState,
    passages: Sequence[Passage],
    templates: Sequence[SelfEditTemplate],
    C: int,
    suite: BackendSuite,
    cfg: RunConfig,
    *,
    library: PromptLibrary | None = None,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    log: RunLog | None = None,
) -> list[CompletionSlot]:
    """Fill every (passage, template) pair C times.

    Unparseable completions are retried up to RETRY_BUDGET times, then kept
    as failed slots so downstream grids stay complete.
    """
    library = library or default_library()
    log = log or NullRunLog()
    baseline = cfg.is_baseline
    slots: list[CompletionSlot] = []
    for passage in passages:
        for j, template in enumerate(templates):
            if baseline:
                prompt = build_baseline_completion_prompt(cfg.mode, passage, library)
            else:
                prompt = build_completion_prompt(passage, template.data_creation_instruction, library)
            params = decoding_for_mode(template.provenance.decoding_mode, max_tokens)
            for k in range(C):
                edit = None
                for attempt in range(RETRY_BUDGET):
                    seed = stable_int(
                        str(s.rng_seed), "complete", str(s.iteration), passage.id, str(j), str(k), str(attempt)
                    )
                    raw = suite.generation.generate(s.model, prompt, params, seed)
                    try:
                        if baseline:
                            sequences = split_baseline_completion(raw)
                        else:
                            sequences = parse_completion_json(raw)
                        edit = SelfEdit(
                            template=template,
                            passage=passage,
                            training_sequences=tuple(sequences),
                            completion_index=k,
                        )
                        break
                    except (ParseError, SchemaError, DomainError, EmptyAfterSplit) as exc:
                        log.log(
                            "generation_rejected",
                            iteration=s.iteration,
                            stage="completion",
                            passage_id=passage.id,
                            template_index=j,
                            completion_index=k,
                            attempt=attempt,
                            reason=f"{type(exc).__name__}: {exc}",
                        )
                slots.append(
                    CompletionSlot(passage=passage, template_index=j, completion_index=k, edit=edit)
                )
    return slots


def _answer_correct(suite: BackendSuite, model: ModelHandle, question: str, gold: str, log: RunLog) -> bool:
    try:
        prediction = suite.adapters.answer(model, question)
    except (BackendUnavailable, GenerationError) as exc:
        log.log("question_failed", stage="answer", reason=f"{type(exc).__name__}: {exc}")
        return False
    try:
        return suite.judge.judge(question, gold, prediction)
    except JudgeFormatError as exc:
        log.log("question_failed", stage="judge", reason=f"{type(exc).__name__}: {exc}")
        return False


def _run_accuracies(suite: BackendSuite, model: ModelHandle, passage: Passage, E: int, log: RunLog) -> list[float]:
    runs = []
    for _ in range(E):
        correct = sum(
            _answer_correct(suite, model, qa.question, qa.gold_answer, log) for qa in passage.questions
        )
        runs.append(correct / len(passage.questions))
    return runs


def evaluate_baseline_accuracy(
    model: ModelHandle, p: Passage, E: int, suite: BackendSuite, log: RunLog | None = None
) -> float:
    """Unedited-model QA accuracy on one passage, averaged over E runs."""
    return fmean(_run_accuracies(suite, model, p, E, log or NullRunLog()))


def apply_and_evaluate(
    model: ModelHandle,
    slot: CompletionSlot,
    E: int,
    baseline: float,
    suite: BackendSuite,
    log: RunLog | None = None,
) -> EvalResult:
    """Train the slot's adapter, score it E times, release the adapter."""
    log = log or NullRunLog()
    if slot.edit is None:
        return _failed_result(slot, E, baseline)
    try:
        adapter = suite.adapters.train_adapter(
            model, slot.edit.training_sequences, slot.edit.template.hyperparameters
        )
    except TrainingError as exc:
        log.log(
            "training_failed",
            passage_id=slot.passage.id,
            template_index=slot.template_index,
            completion_index=slot.completion_index,
            reason=str(exc),
        )
        return _failed_result(slot, E, baseline, edit=slot.edit)
    try:
        runs = _run_accuracies(suite, adapter, slot.edit.passage, E, log)
    finally:
        suite.adapters.drop_adapter(adapter)
    return EvalResult(
        passage_id=slot.passage.id,
        template_index=slot.template_index,
        completion_index=slot.completion_index,
        run_accuracies=tuple(runs),
        mean_accuracy=fmean(runs),
        baseline_accuracy=baseline,
        self_edit=slot.edit,
    )


def _failed_result(slot: CompletionSlot, E: int, baseline: float, edit: SelfEdit | None = None) -> EvalResult:
    return EvalResult(
        passage_id=slot.passage.id,
        template_index=slot.template_index,
        completion_index=slot.completion_index,
        run_accuracies=(0.0,) * E,
        mean_accuracy=0.0,
        baseline_accuracy=baseline,
        self_edit=edit,
        failed=True,
    )


def _positive_gain(accuracy: float, baseline: float) -> bool:
    try:
        return normalized_gain(accuracy, baseline) > 0.0
    except DegenerateBaseline:
        return False


def build_sft_dataset(
    results: IterationResults,
    cfg: RunConfig,
    *,
    library: PromptLibrary | None = None,
) -> list[SftExample]:
    """Distillation set: per passage, the top-k positive-gain templates.

    For each selected template one proposal example (meta-prompt -> template
    JSON) and one completion example (completion prompt -> best completion's
    JSON); ranking by per-passage accuracy, ties by template then completion
    index. Baseline modes emit only the k best completions per passage.
    """
    library = library or default_library()
    by_passage: dict[str, list[EvalResult]] = {}
    passages: dict[str, Passage] = {}
    for result in sorted(results.eval_results, key=EvalResult.sort_key):
        by_passage.setdefault(result.passage_id, []).append(result)
        if result.self_edit is not None:
            passages[result.passage_id] = result.self_edit.passage
    examples: list[SftExample] = []
    for passage_id, passage_results in by_passage.items():
        if cfg.is_baseline:
            examples.extend(_baseline_passage_examples(passage_results, cfg, passages.get(passage_id), library))
        else:
            examples.extend(
                _learned_passage_examples(results, passage_results, cfg, passages.get(passage_id), library)
            )
    return examples


def _learned_passage_examples(
    results: IterationResults,
    passage_results: list[EvalResult],
    cfg: RunConfig,
    passage: Passage | None,
    library: PromptLibrary,
) -> list[SftExample]:
    baseline = passage_results[0].baseline_accuracy
    by_template: dict[int, list[EvalResult]] = {}
    for result in passage_results:
        by_template.setdefault(result.template_index, []).append(result)
    ranked: list[tuple[float, int]] = []
    for template_index, group in sorted(by_template.items()):
        accuracy = fmean(r.mean_accuracy for r in group)
        if _positive_gain(accuracy, baseline):
            ranked.append((accuracy, template_index))
    ranked.sort(key=lambda pair: (-pair[0], pair[1]))
    examples: list[SftExample] = []
    for _, template_index in ranked[: cfg.k_top]:
        template = results.templates[template_index]
        best = _best_completion(by_template[template_index])
        if best is None or passage is None or results.meta_prompt is None:
            continue
        examples.append(
            SftExample(
                prompt_text=results.meta_prompt.text,
                target_text=template.canonical_json(),
                kind="template_proposal",
            )
        )
        completion_prompt = build_completion_prompt(passage, template.data_creation_instruction, library)
        examples.append(
            SftExample(
                prompt_text=completion_prompt.text,
                target_text=canonical_completion_json(best.self_edit.training_sequences),
                kind="template_completion",
            )
        )
    return examples


def _baseline_passage_examples(
    passage_results: list[EvalResult],
    cfg: RunConfig,
    passage: Passage | None,
    library: PromptLibrary,
) -> list[SftExample]:
    if passage is None:
        return []
    prompt = build_baseline_completion_prompt(cfg.mode, passage, library)
    successes = [r for r in passage_results if r.self_edit is not None and not r.failed]
    successes.sort(key=lambda r: (-r.mean_accuracy, r.completion_index))
    return [
        SftExample(
            prompt_text=prompt.text,
            target_text="\n".join(r.self_edit.training_sequences),
            kind="template_completion",
        )
        for r in successes[: cfg.k_top]
    ]


def _best_completion(group: list[EvalResult]) -> EvalResult | None:
    candidates = [r for r in group if r.self_edit is not None and not r.failed]
    if not candidates:
        return None
    return min(candidates, key=lambda r: (-r.mean_accuracy, r.completion_index))


def train_model(s: IterationState, ds: Sequence[SftExample], suite: BackendSuite) -> ModelHandle:
    """SFT the proposer on the distillation set; empty set is a no-op."""
    if not ds:
        return s.model
    return suite.adapters.sft(s.model, list(ds))


def _compute_report(
    eval_results: Sequence[EvalResult],
    templates: Sequence[SelfEditTemplate],
    suite: BackendSuite,
    learned: bool,
) -> IterationReport:
    by_passage: dict[str, list[float]] = {}
    for result in sorted(eval_results, key=EvalResult.sort_key):
        by_passage.setdefault(result.passage_id, []).extend(result.run_accuracies)
    per_passage = {pid: passage_accuracy(values) for pid, values in by_passage.items()}
    mean, delta = mean_and_ci(list(per_passage.values()))
    text_sim = hp_sim = None
    if learned and len(templates) >= 2:
        text_sim = intra_iteration_text_similarity(
            [t.data_creation_instruction for t in templates],
            lambda text: suite.embedder.embed(text).components,
        )
        hp_sim = intra_iteration_hp_similarity([t.hyperparameters for t in templates])
    # Edits whose training failed still carry synthetic data; only slots that
    # never produced a valid self-edit are excluded from the length statistic.
    edits = [r.self_edit for r in eval_results if r.self_edit is not None]
    chars = avg_synth_chars(edits) if edits else 0.0
    return IterationReport(
        mean_accuracy=mean,
        ci_delta=delta,
        text_similarity=text_sim,
        hp_similarity=hp_sim,
        avg_synth_chars=chars,
        per_passage_accuracy=per_passage,
    )


def run_training_iteration(
    s: IterationState,
    cfg: RunConfig,
    passages: Sequence[Passage],
    suite: BackendSuite,
    *,
    library: PromptLibrary | None = None,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    log: RunLog | None = None,
) -> tuple[IterationState, IterationResults]:
    """One full training iteration; the returned state starts the next one."""
    if len(passages) != cfg.N_passages:
        raise DomainError("passages", f"expected {cfg.N_passages} passages, got {len(passages)}")
    if (s.archive is not None) != (cfg.mode == "with_archive"):
        raise DomainError("archive", "archive must be present iff mode is with_archive")
    library = library or default_library()
    log = log or NullRunLog()

    if cfg.is_baseline:
        templates = [fixed_baseline_template(cfg, s.iteration, library)]
        meta_prompt = None
        completions_per_pair = cfg.C_b_baseline_completions
        for j, template in enumerate(templates):
            log.log(
                "template_created",
                iteration=s.iteration,
                template_index=j,
                decoding_mode="baseline",
                instruction=template.data_creation_instruction,
                hyperparameters=template.hyperparameters.to_json_dict(),
            )
    else:
        templates, meta_prompt = create_self_edit_templates(
            s, cfg, suite, library=library, max_tokens=max_tokens, log=log
        )
        completions_per_pair = cfg.C_completions

    slots = complete_templates(
        s, passages, templates, completions_per_pair, suite, cfg,
        library=library, max_tokens=max_tokens, log=log,
    )
    expected = len(passages) * len(templates) * completions_per_pair
    if len(slots) != expected:
        raise DomainError("slots", f"expected {expected} self-edit slots, got {len(slots)}")

    baselines: dict[str, float] = {}
    for passage in passages:
        baselines[passage.id] = evaluate_baseline_accuracy(s.model, passage, cfg.E_eval_runs, suite, log)
        log.log(
            "baseline_evaluated",
            iteration=s.iteration,
            passage_id=passage.id,
            baseline_accuracy=baselines[passage.id],
        )

    def evaluate(slot: CompletionSlot) -> EvalResult:
        return apply_and_evaluate(s.model, slot, cfg.E_eval_runs, baselines[slot.passage.id], suite, log)

    if cfg.parallelism > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
            eval_results = list(pool.map(evaluate, slots))
    else:
        eval_results = [evaluate(slot) for slot in slots]
    eval_results.sort(key=EvalResult.sort_key)
    for result in eval_results:
        log.log(
            "self_edit_evaluated",
            iteration=s.iteration,
            passage_id=result.passage_id,
            template_index=result.template_index,
            completion_index=result.completion_index,
            run_accuracies=list(result.run_accuracies),
            mean_accuracy=result.mean_accuracy,
            baseline_accuracy=result.baseline_accuracy,
            data_chars=result.self_edit.data_chars() if result.self_edit else None,
            failed=result.failed,
        )

    report = _compute_report(eval_results, templates, suite, learned=not cfg.is_baseline)
    log.log("iteration_report", iteration=s.iteration, report=report.to_json_dict())

    results = IterationResults(
        templates=tuple(templates),
        meta_prompt=meta_prompt,
        eval_results=tuple(eval_results),
        report=report,
    )

    sft_examples = build_sft_dataset(results, cfg, library=library)
    log.log(
        "sft_built",
        iteration=s.iteration,
        num_examples=len(sft_examples),
        kinds=[e.kind for e in sft_examples],
    )
    next_model = train_model(s, sft_examples, suite)
    log.log("checkpoint", iteration=s.iteration, model_id=next_model.id)

    next_archive = s.archive
    if cfg.mode == "with_archive":
        by_template: dict[int, list[EvalResult]] = {}
        for result in eval_results:
            by_template.setdefault(result.template_index, []).append(result)
        new_entries = [
            aggregate_template_metrics(by_template[j], templates[j]) for j in sorted(by_template)
        ]
        next_archive = update_archive(s.archive, new_entries)
        log.log(
            "archive_updated",
            iteration=s.iteration,
            num_entries=len(next_archive.entries),
            new_entries=[e.to_json_dict() for e in new_entries],
        )

    next_state = IterationState(
        iteration=s.iteration + 1,
        model=next_model,
        archive=next_archive,
        rng_seed=s.rng_seed,
    )
    return next_state, results


def run_validation(
    checkpoint: ModelHandle,
    passages: Sequence[Passage],
    cfg: RunConfig,
    suite: BackendSuite,
    *,
    archive: Archive | None = None,
    library: PromptLibrary | None = None,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    log: RunLog | None = None,
    iteration: int = 0,
) -> IterationReport:
    """Score a checkpoint: one template, one completion per passage, no
    training and no archive mutation."""
    library = library or default_library()
    log = log or NullRunLog()
    if cfg.mode == "with_archive" and archive is None:
        raise DomainError("archive", "with_archive validation needs the archive for the meta-prompt")
    # Validation draws from its own seed stream so it never aliases training.
    val_seed = stable_int(str(cfg.rng_seed), "validation")
    state = IterationState(iteration=iteration, model=checkpoint, archive=archive, rng_seed=val_seed)
    if cfg.is_baseline:
        templates = [fixed_baseline_template(cfg, iteration, library)]
    else:
        # One template per checkpoint evaluation, sampled conservatively.
        templates, _ = create_self_edit_templates(
            state, cfg, suite,
            library=library, max_tokens=max_tokens,
            view=archive_view(archive) if cfg.mode == "with_archive" else None,
            m_templates=1, exploit_count=1, log=log,
        )
    slots = complete_templates(
        state, passages, templates, 1, suite, cfg, library=library, max_tokens=max_tokens, log=log
    )
    eval_results = []
    for slot in slots:
        baseline = evaluate_baseline_accuracy(checkpoint, slot.passage, cfg.E_eval_runs, suite, log)
        result = apply_and_evaluate(checkpoint, slot, cfg.E_eval_runs, baseline, suite, log)
        eval_results.append(result)
    eval_results.sort(key=EvalResult.sort_key)
    for result in eval_results:
        log.log(
            "self_edit_evaluated",
            iteration=iteration,
            passage_id=result.passage_id,
            template_index=result.template_index,
            completion_index=result.completion_index,
            run_accuracies=list(result.run_accuracies),
            mean_accuracy=result.mean_accuracy,
            baseline_accuracy=result.baseline_accuracy,
            data_chars=result.self_edit.data_chars() if result.self_edit else None,
            failed=result.failed,
        )
    report = _compute_report(eval_results, templates, suite, learned=not cfg.is_baseline)
    log.log("iteration_report", iteration=iteration, report=report.to_json_dict())
    return report
