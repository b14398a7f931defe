"""Core domain types shared by every module.

All types are immutable after construction and validate their invariants in
``__post_init__``, so an instance that exists is an instance that is legal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from statistics import fmean
from typing import Any

from .errors import DomainError

HYPERPARAMETER_KEYS = (
    "lora_rank",
    "lora_alpha",
    "lora_dropout",
    "learning_rate",
    "num_epochs",
    "gradient_accumulation_steps",
)

DECODING_MODES = ("exploit", "explore", "baseline", "seed")

RUN_MODES = ("no_archive", "with_archive", "baseline_implications", "baseline_rewrite")

LEARNED_MODES = ("no_archive", "with_archive")

SFT_EXAMPLE_KINDS = ("template_proposal", "template_completion")


def _require_int(field_name: str, value: Any) -> int:
    # bool is an int subclass; a JSON true/false here is a type error, not 1/0.
    if isinstance(value, bool) or not isinstance(value, int):
        raise DomainError(field_name, f"expected an integer, got {value!r}")
    return value


def _require_number(field_name: str, value: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DomainError(field_name, f"expected a number, got {value!r}")
    return value


@dataclass(frozen=True)
class Hyperparameters:
    """The NTP fine-tuning knobs a template is allowed to choose.

    Values are stored exactly as parsed; no clamping. Range normalization for
    similarity scoring lives in :mod:`selfedit.metrics`.
    """

    lora_rank: int
    lora_alpha: int
    lora_dropout: float
    learning_rate: float
    num_epochs: int
    gradient_accumulation_steps: int

    def __post_init__(self) -> None:
        for name in ("lora_rank", "lora_alpha", "num_epochs", "gradient_accumulation_steps"):
            value = _require_int(name, getattr(self, name))
            if value < 1:
                raise DomainError(name, f"must be >= 1, got {value}")
        dropout = _require_number("lora_dropout", self.lora_dropout)
        if not 0.0 <= dropout <= 1.0:
            raise DomainError("lora_dropout", f"must be in [0, 1], got {dropout}")
        lr = _require_number("learning_rate", self.learning_rate)
        if not lr > 0.0:
            raise DomainError("learning_rate", f"must be > 0, got {lr}")

    def to_json_dict(self) -> dict[str, Any]:
        return {key: getattr(self, key) for key in HYPERPARAMETER_KEYS}

    @classmethod
    def from_json_dict(cls, data: dict[str, Any]) -> "Hyperparameters":
        return cls(**{key: data[key] for key in HYPERPARAMETER_KEYS})


def validate_hyperparameters(h: Hyperparameters) -> Hyperparameters:
    """Return ``h`` unchanged if every invariant holds.

    Constructors already validate; this re-checks an instance that may have
    been built through a bypassing path (e.g. ``object.__setattr__``).
    """
    Hyperparameters(**h.to_json_dict())
    return h


@dataclass(frozen=True)
class Provenance:
    """Where a template came from; set at creation and never changed."""

    iteration: int | str  # non-negative iteration index, or "seed"
    decoding_mode: str

    def __post_init__(self) -> None:
        if self.iteration != "seed":
            if isinstance(self.iteration, bool) or not isinstance(self.iteration, int):
                raise DomainError("iteration", f"expected an integer or 'seed', got {self.iteration!r}")
            if self.iteration < 0:
                raise DomainError("iteration", f"must be >= 0, got {self.iteration}")
        if self.decoding_mode not in DECODING_MODES:
            raise DomainError("decoding_mode", f"unknown mode {self.decoding_mode!r}")

    def to_json_dict(self) -> dict[str, Any]:
        return {"iteration": self.iteration, "decoding_mode": self.decoding_mode}

    @classmethod
    def from_json_dict(cls, data: dict[str, Any]) -> "Provenance":
        return cls(iteration=data["iteration"], decoding_mode=data["decoding_mode"])


SEED_PROVENANCE = Provenance(iteration="seed", decoding_mode="seed")


@dataclass(frozen=True)
class SelfEditTemplate:
    """A data-creation instruction plus fine-tuning hyperparameters."""

    data_creation_instruction: str
    hyperparameters: Hyperparameters
    provenance: Provenance = SEED_PROVENANCE

    def __post_init__(self) -> None:
        if not isinstance(self.data_creation_instruction, str):
            raise DomainError("data_creation_instruction", "expected a string")
        # The empty instruction is reserved for the seeded no-guidance analogue.
        if not self.data_creation_instruction and self.provenance.decoding_mode != "seed":
            raise DomainError("data_creation_instruction", "empty instruction is only legal for seed templates")

    def canonical_json(self) -> str:
        """Compact JSON used as SFT target and archive-prompt payload."""
        return json.dumps(
            {
                "data_creation_instruction": self.data_creation_instruction,
                "hyperparameters": self.hyperparameters.to_json_dict(),
            },
            separators=(",", ":"),
            ensure_ascii=False,
        )

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "data_creation_instruction": self.data_creation_instruction,
            "hyperparameters": self.hyperparameters.to_json_dict(),
            "provenance": self.provenance.to_json_dict(),
        }

    @classmethod
    def from_json_dict(cls, data: dict[str, Any]) -> "SelfEditTemplate":
        return cls(
            data_creation_instruction=data["data_creation_instruction"],
            hyperparameters=Hyperparameters.from_json_dict(data["hyperparameters"]),
            provenance=Provenance.from_json_dict(data["provenance"]),
        )


@dataclass(frozen=True)
class QAItem:
    question: str
    gold_answer: str

    def __post_init__(self) -> None:
        if not self.question:
            raise DomainError("question", "must be non-empty")
        if not self.gold_answer:
            raise DomainError("gold_answer", "must be non-empty")

    def to_json_dict(self) -> dict[str, Any]:
        return {"question": self.question, "gold_answer": self.gold_answer}

    @classmethod
    def from_json_dict(cls, data: dict[str, Any]) -> "QAItem":
        return cls(question=data["question"], gold_answer=data["gold_answer"])


@dataclass(frozen=True)
class Passage:
    """A source text with the questions used to score knowledge incorporation."""

    id: str
    title: str
    body: str
    questions: tuple[QAItem, ...]

    def __post_init__(self) -> None:
        if not self.id:
            raise DomainError("id", "must be non-empty")
        if not self.questions:
            raise DomainError("questions", "must be non-empty")
        object.__setattr__(self, "questions", tuple(self.questions))

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "title": self.title,
            "body": self.body,
            "questions": [q.to_json_dict() for q in self.questions],
        }

    @classmethod
    def from_json_dict(cls, data: dict[str, Any]) -> "Passage":
        return cls(
            id=data["id"],
            title=data["title"],
            body=data["body"],
            questions=tuple(QAItem.from_json_dict(q) for q in data["questions"]),
        )


@dataclass(frozen=True)
class SelfEdit:
    """A template bound to a passage, with the generated training sequences."""

    template: SelfEditTemplate
    passage: Passage
    training_sequences: tuple[str, ...]
    completion_index: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "training_sequences", tuple(self.training_sequences))
        if not self.training_sequences:
            raise DomainError("training_sequences", "must be non-empty")
        for i, seq in enumerate(self.training_sequences):
            if not isinstance(seq, str) or not seq.strip():
                raise DomainError("training_sequences", f"element {i} is empty after trimming")
        if isinstance(self.completion_index, bool) or not isinstance(self.completion_index, int):
            raise DomainError("completion_index", "expected an integer")
        if self.completion_index < 0:
            raise DomainError("completion_index", f"must be >= 0, got {self.completion_index}")

    def data_chars(self) -> int:
        """Total Unicode scalar count over the training sequences (no separators)."""
        return sum(len(seq) for seq in self.training_sequences)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "template": self.template.to_json_dict(),
            "passage": self.passage.to_json_dict(),
            "training_sequences": list(self.training_sequences),
            "completion_index": self.completion_index,
        }

    @classmethod
    def from_json_dict(cls, data: dict[str, Any]) -> "SelfEdit":
        return cls(
            template=SelfEditTemplate.from_json_dict(data["template"]),
            passage=Passage.from_json_dict(data["passage"]),
            training_sequences=tuple(data["training_sequences"]),
            completion_index=data["completion_index"],
        )


@dataclass(frozen=True)
class EvalResult:
    """Judged accuracies for one self-edit across the configured eval runs.

    ``self_edit`` is absent for edits whose generation or training failed;
    those carry all-zero accuracies and ``failed=True`` so grids stay complete.
    The explicit key triple keeps results sortable regardless of completion
    order or failure.
    """

    passage_id: str
    template_index: int
    completion_index: int
    run_accuracies: tuple[float, ...]
    mean_accuracy: float
    baseline_accuracy: float
    self_edit: SelfEdit | None = None
    failed: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "run_accuracies", tuple(self.run_accuracies))
        if not self.run_accuracies:
            raise DomainError("run_accuracies", "must be non-empty")
        for value in self.run_accuracies:
            if not 0.0 <= value <= 1.0:
                raise DomainError("run_accuracies", f"accuracy {value} outside [0, 1]")
        if not 0.0 <= self.mean_accuracy <= 1.0:
            raise DomainError("mean_accuracy", f"{self.mean_accuracy} outside [0, 1]")
        if abs(self.mean_accuracy - fmean(self.run_accuracies)) > 1e-12:
            raise DomainError("mean_accuracy", "does not equal the mean of run_accuracies")
        if not 0.0 <= self.baseline_accuracy <= 1.0:
            raise DomainError("baseline_accuracy", f"{self.baseline_accuracy} outside [0, 1]")

    def sort_key(self) -> tuple[str, int, int]:
        return (self.passage_id, self.template_index, self.completion_index)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "passage_id": self.passage_id,
            "template_index": self.template_index,
            "completion_index": self.completion_index,
            "run_accuracies": list(self.run_accuracies),
            "mean_accuracy": self.mean_accuracy,
            "baseline_accuracy": self.baseline_accuracy,
            "self_edit": self.self_edit.to_json_dict() if self.self_edit else None,
            "failed": self.failed,
        }

    @classmethod
    def from_json_dict(cls, data: dict[str, Any]) -> "EvalResult":
        edit = data.get("self_edit")
        return cls(
            passage_id=data["passage_id"],
            template_index=data["template_index"],
            completion_index=data["completion_index"],
            run_accuracies=tuple(data["run_accuracies"]),
            mean_accuracy=data["mean_accuracy"],
            baseline_accuracy=data["baseline_accuracy"],
            self_edit=SelfEdit.from_json_dict(edit) if edit else None,
            failed=data["failed"],
        )


@dataclass(frozen=True)
class ArchiveEntry:
    """An evaluated template with its accuracy and normalized gain."""

    template: SelfEditTemplate
    accuracy: float
    normalized_gain: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.accuracy <= 1.0:
            raise DomainError("accuracy", f"{self.accuracy} outside [0, 1]")
        if self.normalized_gain > 1.0:
            raise DomainError("normalized_gain", f"{self.normalized_gain} exceeds 1")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "data_creation_instruction": self.template.data_creation_instruction,
            "hyperparameters": self.template.hyperparameters.to_json_dict(),
            "accuracy": self.accuracy,
            "normalized_gain": self.normalized_gain,
        }

    @classmethod
    def from_json_dict(cls, data: dict[str, Any], provenance: Provenance = SEED_PROVENANCE) -> "ArchiveEntry":
        template = SelfEditTemplate(
            data_creation_instruction=data["data_creation_instruction"],
            hyperparameters=Hyperparameters.from_json_dict(data["hyperparameters"]),
            provenance=provenance,
        )
        return cls(template=template, accuracy=data["accuracy"], normalized_gain=data["normalized_gain"])


@dataclass(frozen=True)
class RunConfig:
    """Sizing and mode of one run; field names match the config file keys."""

    N_passages: int
    M_templates: int
    C_completions: int
    C_b_baseline_completions: int
    E_eval_runs: int
    k_top: int
    exploit_count: int
    explore_count: int
    mode: str
    parallelism: int = 1
    rng_seed: int = 0

    def __post_init__(self) -> None:
        for name in (
            "N_passages",
            "M_templates",
            "C_completions",
            "C_b_baseline_completions",
            "E_eval_runs",
            "k_top",
            "parallelism",
        ):
            value = _require_int(name, getattr(self, name))
            if value < 1:
                raise DomainError(name, f"must be >= 1, got {value}")
        for name in ("exploit_count", "explore_count"):
            value = _require_int(name, getattr(self, name))
            if value < 0:
                raise DomainError(name, f"must be >= 0, got {value}")
        _require_int("rng_seed", self.rng_seed)
        if self.mode not in RUN_MODES:
            raise DomainError("mode", f"unknown mode {self.mode!r}")
        if self.exploit_count + self.explore_count != self.M_templates:
            raise DomainError("exploit_count", "exploit_count + explore_count must equal M_templates")
        if self.k_top > self.M_templates:
            raise DomainError("k_top", "must not exceed M_templates")

    @property
    def is_baseline(self) -> bool:
        return self.mode in ("baseline_implications", "baseline_rewrite")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "N_passages": self.N_passages,
            "M_templates": self.M_templates,
            "C_completions": self.C_completions,
            "C_b_baseline_completions": self.C_b_baseline_completions,
            "E_eval_runs": self.E_eval_runs,
            "k_top": self.k_top,
            "exploit_count": self.exploit_count,
            "explore_count": self.explore_count,
            "mode": self.mode,
            "parallelism": self.parallelism,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_json_dict(cls, data: dict[str, Any]) -> "RunConfig":
        return cls(**{f: data[f] for f in cls.__dataclass_fields__ if f in data})


@dataclass(frozen=True)
class SftExample:
    """One supervised pair for the proposer update; loss covers the target only."""

    prompt_text: str
    target_text: str
    kind: str

    def __post_init__(self) -> None:
        if not self.prompt_text:
            raise DomainError("prompt_text", "must be non-empty")
        if not self.target_text:
            raise DomainError("target_text", "must be non-empty")
        if self.kind not in SFT_EXAMPLE_KINDS:
            raise DomainError("kind", f"unknown kind {self.kind!r}")

    def to_json_dict(self) -> dict[str, Any]:
        return {"prompt_text": self.prompt_text, "target_text": self.target_text, "kind": self.kind}

    @classmethod
    def from_json_dict(cls, data: dict[str, Any]) -> "SftExample":
        return cls(prompt_text=data["prompt_text"], target_text=data["target_text"], kind=data["kind"])


def canonical_completion_json(training_sequences: tuple[str, ...] | list[str]) -> str:
    """Compact JSON form of a completion, used as the SFT completion target."""
    return json.dumps({"training_sequences": list(training_sequences)}, separators=(",", ":"), ensure_ascii=False)
