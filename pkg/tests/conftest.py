from __future__ import annotations

import pytest

from selfedit.backends import BackendSuite, ModelHandle
from selfedit.backends.mock import MockBackend, make_synthetic_passages
from selfedit.model import Hyperparameters, Passage, QAItem, RunConfig


def make_hp(**overrides) -> Hyperparameters:
    base = dict(
        lora_rank=32,
        lora_alpha=64,
        lora_dropout=0.0,
        learning_rate=1e-3,
        num_epochs=10,
        gradient_accumulation_steps=1,
    )
    base.update(overrides)
    return Hyperparameters(**base)


def make_passage(pid: str = "p1", n_questions: int = 2) -> Passage:
    questions = tuple(
        QAItem(question=f"What is fact {i} of {pid}?", gold_answer=f"gold-{pid}-{i}")
        for i in range(n_questions)
    )
    body = "\n".join(f"Fact {i} of {pid} is gold-{pid}-{i}." for i in range(n_questions))
    return Passage(id=pid, title=f"Title {pid}", body=body, questions=questions)


def make_run_config(**overrides) -> RunConfig:
    base = dict(
        N_passages=4,
        M_templates=5,
        C_completions=2,
        C_b_baseline_completions=3,
        E_eval_runs=2,
        k_top=2,
        exploit_count=3,
        explore_count=2,
        mode="no_archive",
        parallelism=1,
        rng_seed=7,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture
def passages() -> list[Passage]:
    return make_synthetic_passages(4, 3, seed=5)


@pytest.fixture
def mock_suite(passages) -> BackendSuite:
    mock = MockBackend(passages)
    return BackendSuite(generation=mock, adapters=mock, judge=mock, embedder=mock)


@pytest.fixture
def base_model() -> ModelHandle:
    return ModelHandle(id="base", kind="base_checkpoint")
