"""Randomized comparison of the distillation selection against a brute-force
oracle: positive-gain filter, accuracy ranking, tie-breaks by template then
completion index, at most k proposal/completion pairs per passage."""

from __future__ import annotations

import random

from conftest import make_hp, make_run_config
from oracles import oracle_sft_selection
from selfedit.model import (
    EvalResult,
    Passage,
    Provenance,
    QAItem,
    SelfEdit,
    SelfEditTemplate,
    canonical_completion_json,
)
from selfedit.pipeline import IterationResults, build_sft_dataset
from selfedit.prompts import build_baseline_completion_prompt, build_completion_prompt, build_template_meta_prompt
from selfedit.metrics import IterationReport

ACCURACY_LEVELS = (0.0, 0.0, 0.25, 0.5, 0.5, 0.75, 1.0)
BASELINE_LEVELS = (0.0, 0.0, 0.25, 0.5, 0.5, 0.9, 1.0)


def random_scenario(rng: random.Random, mode: str):
    n_passages = rng.randrange(1, 4)
    m = rng.randrange(1, 6)
    c = rng.randrange(1, 4)
    k = rng.randrange(1, m + 1)
    cfg = make_run_config(
        N_passages=n_passages,
        M_templates=m,
        C_completions=c,
        C_b_baseline_completions=c,
        E_eval_runs=1,
        k_top=k,
        exploit_count=m,
        explore_count=0,
        mode=mode,
    )
    templates = tuple(
        SelfEditTemplate(f"plan {j}", make_hp(), Provenance(iteration=0, decoding_mode="exploit"))
        for j in range(m)
    )
    if mode == "baseline_rewrite":
        templates = templates[:1]
    meta_prompt = build_template_meta_prompt()
    results = []
    scenarios = {}
    for i in range(n_passages):
        passage = Passage(
            id=f"pass-{i}",
            title=f"T{i}",
            body=f"Body {i}",
            questions=(QAItem(question=f"q{i}?", gold_answer=f"g{i}"),),
        )
        baseline = rng.choice(BASELINE_LEVELS)
        scenario = {"baseline": baseline, "templates": {}}
        for j in range(len(templates)):
            completions = {}
            for completion_index in range(c):
                failed = rng.random() < 0.2
                accuracy = 0.0 if failed else rng.choice(ACCURACY_LEVELS)
                completions[completion_index] = {"accuracy": accuracy, "failed": failed}
                edit = None
                if not failed:
                    edit = SelfEdit(
                        template=templates[j],
                        passage=passage,
                        training_sequences=(f"seq-{i}-{j}-{completion_index}",),
                        completion_index=completion_index,
                    )
                results.append(
                    EvalResult(
                        passage_id=passage.id,
                        template_index=j,
                        completion_index=completion_index,
                        run_accuracies=(accuracy,),
                        mean_accuracy=accuracy,
                        baseline_accuracy=baseline,
                        self_edit=edit,
                        failed=failed,
                    )
                )
            scenario["templates"][j] = {"completions": completions}
        scenario["passage"] = passage
        scenarios[passage.id] = scenario
    report = IterationReport(
        mean_accuracy=0.0, ci_delta=0.0, text_similarity=None, hp_similarity=None,
        avg_synth_chars=0.0, per_passage_accuracy={},
    )
    iteration_results = IterationResults(
        templates=templates,
        meta_prompt=meta_prompt if mode != "baseline_rewrite" else None,
        eval_results=tuple(results),
        report=report,
    )
    return cfg, iteration_results, scenarios, templates, meta_prompt


def expected_learned_examples(cfg, scenarios, templates, meta_prompt):
    expected = []
    for passage_id in sorted(scenarios):
        scenario = scenarios[passage_id]
        for j, best_c in oracle_sft_selection(scenario, cfg.k_top):
            template = templates[j]
            expected.append(("template_proposal", meta_prompt.text, template.canonical_json()))
            prompt = build_completion_prompt(scenario["passage"], template.data_creation_instruction)
            target = canonical_completion_json((f"seq-{scenario['passage'].id.split('-')[1]}-{j}-{best_c}",))
            expected.append(("template_completion", prompt.text, target))
    return expected


def test_matches_oracle_on_200_random_scenarios() -> None:
    rng = random.Random(1234)
    for trial in range(200):
        cfg, iteration_results, scenarios, templates, meta_prompt = random_scenario(rng, "no_archive")
        got = build_sft_dataset(iteration_results, cfg)
        expected = expected_learned_examples(cfg, scenarios, templates, meta_prompt)
        actual = [(e.kind, e.prompt_text, e.target_text) for e in got]
        assert actual == expected, f"trial {trial}"
        # Per-passage cap: one proposal + one completion per selection, at
        # most k selections, so never more than 2k examples per passage.
        for pid, scenario in scenarios.items():
            selections = oracle_sft_selection(scenario, cfg.k_top)
            assert 2 * len(selections) <= 2 * cfg.k_top


def test_all_nonpositive_gains_produce_empty_dataset() -> None:
    rng = random.Random(5)
    cfg, iteration_results, scenarios, templates, meta_prompt = random_scenario(rng, "no_archive")
    flat = []
    for result in iteration_results.eval_results:
        flat.append(
            EvalResult(
                passage_id=result.passage_id,
                template_index=result.template_index,
                completion_index=result.completion_index,
                run_accuracies=(0.0,),
                mean_accuracy=0.0,
                baseline_accuracy=0.5,
                self_edit=result.self_edit,
                failed=result.failed,
            )
        )
    neutered = IterationResults(
        templates=iteration_results.templates,
        meta_prompt=iteration_results.meta_prompt,
        eval_results=tuple(flat),
        report=iteration_results.report,
    )
    assert build_sft_dataset(neutered, cfg) == []


def test_single_positive_template_emits_one_pair() -> None:
    rng = random.Random(6)
    while True:
        cfg, iteration_results, scenarios, templates, meta_prompt = random_scenario(rng, "no_archive")
        if cfg.k_top >= 2 and cfg.M_templates >= 2 and len(scenarios) == 1:
            break
    (pid, scenario), = scenarios.items()
    # Rewrite accuracies: template 0 wins, everything else at baseline.
    rebuilt = []
    for result in iteration_results.eval_results:
        accuracy = 0.9 if result.template_index == 0 else 0.1
        rebuilt.append(
            EvalResult(
                passage_id=result.passage_id,
                template_index=result.template_index,
                completion_index=result.completion_index,
                run_accuracies=(accuracy,),
                mean_accuracy=accuracy,
                baseline_accuracy=0.1,
                self_edit=result.self_edit,
                failed=False if result.self_edit else True,
            )
        )
    working = IterationResults(
        templates=iteration_results.templates,
        meta_prompt=iteration_results.meta_prompt,
        eval_results=tuple(rebuilt),
        report=iteration_results.report,
    )
    got = build_sft_dataset(working, cfg)
    kinds = [e.kind for e in got]
    assert kinds == ["template_proposal", "template_completion"]


def test_baseline_mode_emits_top_k_completions() -> None:
    rng = random.Random(9)
    cfg, iteration_results, scenarios, templates, _ = random_scenario(rng, "baseline_rewrite")
    got = build_sft_dataset(iteration_results, cfg)
    assert all(e.kind == "template_completion" for e in got)
    for pid in sorted(scenarios):
        scenario = scenarios[pid]
        prompt = build_baseline_completion_prompt(cfg.mode, scenario["passage"]).text
        mine = [e for e in got if e.prompt_text == prompt]
        completions = scenario["templates"][0]["completions"]
        successes = sorted(
            (c for c in completions if not completions[c]["failed"]),
            key=lambda c: (-completions[c]["accuracy"], c),
        )
        expected_targets = [
            f"seq-{pid.split('-')[1]}-0-{c}" for c in successes[: cfg.k_top]
        ]
        assert [e.target_text for e in mine] == expected_targets
        assert len(mine) <= 2 * cfg.k_top
