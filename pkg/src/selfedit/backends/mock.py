"""Deterministic in-process backends and the surrogate knowledge task.

Every output is a pure function of the call arguments plus the immutable
dataset, so a whole run's transcript is reproducible from (config, dataset,
seed). The surrogate task makes adaptation observable: an adapter answers a
question correctly iff its training data covers the gold answer and its
hyperparameters are sane (learning rate within [1e-4, 2e-3], at most 15
epochs); everything else answers "unknown".
"""

from __future__ import annotations

import json
import math
import random
import threading
from pathlib import Path
from typing import Any, Sequence

from ..errors import DomainError, GenerationError, TrainingError
from ..hashing import stable_digest, stable_int, unit_interval
from ..model import Hyperparameters, Passage, QAItem, SftExample
from ..prompts import PromptText
from . import DecodingParams, EmbeddingVector, ModelHandle

SURROGATE_LR_RANGE = (1e-4, 2e-3)
SURROGATE_MAX_EPOCHS = 15

BASE_MODEL_ID = "base"

EMBEDDING_DIM = 64


_ADJECTIVES = (
    "amber", "basalt", "cedar", "drift", "ember", "fjord", "garnet", "harbor",
    "iron", "juniper", "kiln", "lantern", "marble", "north", "onyx", "prairie",
)
_NOUNS = (
    "archive", "beacon", "causeway", "dam", "estuary", "foundry", "granary",
    "hall", "institute", "junction", "keep", "lighthouse", "mill", "network",
    "observatory", "pier",
)
_ATTRIBUTES = (
    "founder", "call sign", "charter year", "motto", "chief engineer",
    "paint color", "power source", "mascot",
)
_SYLLABLES = (
    "ba", "ce", "di", "fo", "gu", "ha", "je", "ki", "lo", "mu",
    "ne", "pi", "ro", "sa", "te", "vu", "wa", "xi", "yo", "zu",
)


def _gold_token(rng: random.Random, taken: set[str]) -> str:
    while True:
        token = "".join(rng.choice(_SYLLABLES) for _ in range(3)) + f"-{rng.randrange(10, 99)}"
        if token not in taken:
            taken.add(token)
            return token


def make_synthetic_passages(n: int, questions_per_passage: int = 3, seed: int = 0) -> list[Passage]:
    """Fact-sheet passages: one fact per body line, one question per fact."""
    rng = random.Random(seed)
    taken: set[str] = set()
    passages = []
    for i in range(n):
        topic = f"the {rng.choice(_ADJECTIVES)} {rng.choice(_NOUNS)}"
        attrs = rng.sample(_ATTRIBUTES, questions_per_passage)
        facts, questions = [], []
        for attr in attrs:
            gold = _gold_token(rng, taken)
            facts.append(f"The {attr} of {topic} is {gold}.")
            questions.append(QAItem(question=f"What is the {attr} of {topic}?", gold_answer=gold))
        passages.append(
            Passage(
                id=f"syn-{i:04d}",
                title=f"Record {i:03d}: {topic}",
                body="\n".join(facts),
                questions=tuple(questions),
            )
        )
    return passages


def synthetic_squad_dict(n: int, questions_per_passage: int = 3, seed: int = 0) -> dict[str, Any]:
    """The same passages in standard SQuAD JSON structure."""
    data = []
    for p in make_synthetic_passages(n, questions_per_passage, seed):
        qas = []
        for j, qa in enumerate(p.questions):
            qas.append(
                {
                    "id": f"{p.id}-q{j}",
                    "question": qa.question,
                    "answers": [{"text": qa.gold_answer, "answer_start": p.body.find(qa.gold_answer)}],
                }
            )
        data.append({"title": p.title, "paragraphs": [{"context": p.body, "qas": qas}]})
    return {"version": "synthetic-1.0", "data": data}


def _pool_entry(instruction: str, rank: int, alpha: int, dropout: float, lr: float, epochs: int, ga: int, coverage: float):
    hp = {
        "lora_rank": rank,
        "lora_alpha": alpha,
        "lora_dropout": dropout,
        "learning_rate": lr,
        "num_epochs": epochs,
        "gradient_accumulation_steps": ga,
    }
    return {"instruction": instruction, "hyperparameters": hp, "coverage": coverage}


# Conservative pool: content-preserving instructions, sane hyperparameters.
_EXPLOIT_POOL = (
    _pool_entry("Restate every fact from the passage in plain words, one fact per line.", 64, 128, 0.1, 1e-3, 10, 1, 0.95),
    _pool_entry("Write each fact as a question followed by its exact answer.", 32, 64, 0.0, 1e-3, 10, 1, 0.9),
    _pool_entry("List every name, number, and term the passage mentions, with what it refers to.", 64, 128, 0.1, 5e-4, 10, 2, 0.85),
    _pool_entry("Rewrite the passage twice: once as short notes, once as full sentences.", 32, 64, 0.05, 1e-3, 5, 1, 0.8),
    _pool_entry("Copy each sentence and add a short explanation of what it means.", 64, 64, 0.1, 2e-3, 15, 1, 0.9),
    _pool_entry("Turn the passage into flashcards: term on the front, definition on the back.", 16, 32, 0.0, 5e-4, 10, 4, 0.75),
)

# Wider pool mixed in at higher temperature: lossy strategies and unstable
# hyperparameters (extreme learning rates, too many epochs) appear here.
_EXPLORE_POOL = _EXPLOIT_POOL + (
    _pool_entry("Compress the passage into ten keywords.", 64, 128, 0.2, 1e-3, 10, 1, 0.2),
    _pool_entry("Describe the passage from memory without reusing any of its words.", 64, 128, 0.1, 1e-3, 10, 1, 0.1),
    _pool_entry("Encode the passage as a dialogue between two students quizzing each other.", 128, 256, 0.1, 5e-3, 15, 2, 0.9),
    _pool_entry("Write one exhaustive paragraph repeating every detail three times.", 64, 128, 0.1, 1e-3, 20, 1, 0.95),
    _pool_entry("Translate each fact into a riddle whose answer is the fact itself.", 8, 16, 0.3, 5e-5, 10, 8, 0.6),
    _pool_entry("Make a table of every entity and its attributes, one row per line.", 64, 128, 0.1, 1e-3, 12, 2, 0.85),
)

_COVERAGE_HINTS = {entry["instruction"]: entry["coverage"] for entry in _EXPLORE_POOL}

_BASELINE_COVERAGE = {"Implications:": 0.45, "Rewritten passages:": 0.9}


def _norm_question(question: str) -> str:
    return " ".join(question.lower().split())


class MockBackend:
    """One object implementing all four capability protocols."""

    def __init__(self, passages: Sequence[Passage], state_dir: Path | str | None = None):
        self._qa = {
            _norm_question(qa.question): qa.gold_answer
            for p in passages
            for qa in p.questions
        }
        self._adapters: dict[str, dict[str, Any]] = {}
        self._checkpoints: dict[str, dict[str, Any]] = {}
        self._lock = threading.Lock()
        self._state_path = Path(state_dir) / "checkpoints.json" if state_dir is not None else None
        if self._state_path is not None and self._state_path.exists():
            self._checkpoints = json.loads(self._state_path.read_text(encoding="utf-8"))

    # -- generation ---------------------------------------------------------

    def generate(self, model: ModelHandle, prompt: PromptText, d: DecodingParams, seed: int) -> str:
        if model.kind != "base_checkpoint":
            raise GenerationError(f"generate requires a base checkpoint, got {model.kind}")
        self._require_known_checkpoint(model.id)
        key = stable_digest(model.id, prompt.text, str(seed), repr(d.temperature))
        text = prompt.text
        if "[BEGINNING OF INSTRUCTION]" in text:
            return self._generate_completion(model, text, d, key)
        if "learning plan template" in text:
            return self._generate_template(model, d, key)
        for marker in _BASELINE_COVERAGE:
            if text.rstrip().endswith(marker):
                return self._generate_baseline(text, marker, key)
        return f"mock-text-{key[:12]}"

    def _generate_template(self, model: ModelHandle, d: DecodingParams, key: str) -> str:
        if stable_int(key, "garble") % 23 == 0:
            return "Let me think about the best plan before writing anything down."
        record = self._checkpoint_record(model.id)
        targets = record.get("template_targets", []) if record else []
        if targets and stable_int(key, "use-target") % 4 != 0:
            body = targets[stable_int(key, "which-target") % len(targets)]
        else:
            pool = _EXPLOIT_POOL if d.temperature <= 1.0 else _EXPLORE_POOL
            entry = pool[stable_int(key, "pool") % len(pool)]
            body = json.dumps(
                {
                    "data_creation_instruction": entry["instruction"],
                    "hyperparameters": entry["hyperparameters"],
                },
                indent=4,
            )
        return self._with_preamble(key, body)

    def _generate_completion(self, model: ModelHandle, prompt_text: str, d: DecodingParams, key: str) -> str:
        if stable_int(key, "garble") % 29 == 0:
            return "The passage is interesting but I am not sure what to output."
        record = self._checkpoint_record(model.id)
        if record:
            target = record.get("completion_targets", {}).get(stable_digest(prompt_text))
            if target is not None and stable_int(key, "use-target") % 4 != 0:
                return self._with_preamble(key, target)
        region = _between(prompt_text, "[BEGINNING OF PASSAGE]\n\n", "\n\n[END OF PASSAGE]")
        instruction = _between(prompt_text, "[BEGINNING OF INSTRUCTION]\n\n", "\n\n[END OF INSTRUCTION]")
        _, sep, body = region.partition("\n\n")  # title precedes the body
        if not sep:
            body = region
        lines = [ln for ln in body.split("\n") if ln.strip()]
        coverage = _COVERAGE_HINTS.get(instruction)
        if coverage is None:
            coverage = 0.05 if not instruction else 0.3 + 0.65 * unit_interval(instruction, "coverage")
        selected = [ln for ln in lines if unit_interval(key, ln, "pick") < coverage]
        if not selected and lines and stable_int(key, "rescue") % 5 != 0:
            selected = [lines[stable_int(key, "fallback") % len(lines)]]
        sequences = [f"Note {i + 1}: {ln}" for i, ln in enumerate(selected)]
        if sequences and stable_int(key, "filler") % 2 == 0:
            sequences.append(f"These notes follow the instruction: {instruction[:60]}")
        return self._with_preamble(key, json.dumps({"training_sequences": sequences}))

    def _generate_baseline(self, prompt_text: str, marker: str, key: str) -> str:
        body = _between(prompt_text, "Passage:\n", f"\n{marker}")
        lines = [ln for ln in body.split("\n") if ln.strip()]
        coverage = _BASELINE_COVERAGE[marker]
        selected = [ln for ln in lines if unit_interval(key, ln, "pick") < coverage]
        if not selected and lines and stable_int(key, "rescue") % 7 != 0:
            selected = [lines[stable_int(key, "fallback") % len(lines)]]
        rendered = [f"{ln} In other words, the record stands." for ln in selected]
        rendered.append("The passage as a whole describes one facility.")
        return "\n".join(rendered)

    @staticmethod
    def _with_preamble(key: str, body: str) -> str:
        if stable_int(key, "think") % 3 == 0:
            return "<think>\nWeighing a few options for this material.\n</think>\n" + body
        return body

    # -- adapters -----------------------------------------------------------

    def train_adapter(self, base: ModelHandle, sequences: Sequence[str], h: Hyperparameters) -> ModelHandle:
        if base.kind != "base_checkpoint":
            raise TrainingError(f"train_adapter requires a base checkpoint, got {base.kind}")
        if not sequences:
            raise TrainingError("refusing to train on an empty sequence list")
        adapter_id = "adapter-" + stable_digest(base.id, json.dumps(list(sequences)), json.dumps(h.to_json_dict()))[:16]
        with self._lock:
            self._adapters[adapter_id] = {
                "base": base.id,
                "data": "\n".join(sequences).lower(),
                "h": h,
            }
        return ModelHandle(id=adapter_id, kind="adapter")

    def answer(self, model: ModelHandle, question: str) -> str:
        if model.kind == "base_checkpoint":
            self._require_known_checkpoint(model.id)
            return "unknown"
        with self._lock:
            record = self._adapters.get(model.id)
        if record is None:
            raise GenerationError(f"unknown adapter {model.id}")
        gold = self._qa.get(_norm_question(question))
        if gold is None:
            return "unknown"
        h: Hyperparameters = record["h"]
        lr_lo, lr_hi = SURROGATE_LR_RANGE
        if not (lr_lo <= h.learning_rate <= lr_hi and h.num_epochs <= SURROGATE_MAX_EPOCHS):
            return "unknown"
        if gold.lower() in record["data"]:
            return gold
        return "unknown"

    def drop_adapter(self, handle: ModelHandle) -> None:
        with self._lock:
            self._adapters.pop(handle.id, None)

    def sft(self, base: ModelHandle, examples: Sequence[SftExample]) -> ModelHandle:
        if base.kind != "base_checkpoint":
            raise TrainingError(f"sft requires a base checkpoint, got {base.kind}")
        if not examples:
            raise TrainingError("refusing SFT on an empty dataset")
        self._require_known_checkpoint(base.id)
        payload = json.dumps([e.to_json_dict() for e in examples], sort_keys=True)
        ckpt_id = "ckpt-" + stable_digest(base.id, payload)[:16]
        parent = self._checkpoint_record(base.id) or {}
        template_targets = list(parent.get("template_targets", []))
        completion_targets = dict(parent.get("completion_targets", {}))
        # Loss is over targets only; the generation tables shift toward them.
        for example in examples:
            if example.kind == "template_proposal":
                if example.target_text not in template_targets:
                    template_targets.append(example.target_text)
            else:
                completion_targets[stable_digest(example.prompt_text)] = example.target_text
        with self._lock:
            self._checkpoints[ckpt_id] = {
                "parent": base.id,
                "template_targets": template_targets,
                "completion_targets": completion_targets,
            }
            self._persist_checkpoints()
        return ModelHandle(id=ckpt_id, kind="base_checkpoint")

    # -- judging & embedding ------------------------------------------------

    def judge(self, question: str, gold: str, prediction: str) -> bool:
        return gold.lower() in prediction.lower()

    def embed(self, t: str) -> EmbeddingVector:
        if not t:
            raise DomainError("t", "cannot embed an empty string")
        counts = [0.0] * EMBEDDING_DIM
        grams = [t[i : i + 3] for i in range(len(t) - 2)] if len(t) >= 3 else [t]
        for gram in grams:
            counts[stable_int("embed", gram) % EMBEDDING_DIM] += 1.0
        norm = math.sqrt(sum(c * c for c in counts))
        return EmbeddingVector(components=tuple(c / norm for c in counts))

    # -- internals ----------------------------------------------------------

    def _checkpoint_record(self, model_id: str) -> dict[str, Any] | None:
        with self._lock:
            return self._checkpoints.get(model_id)

    def _require_known_checkpoint(self, model_id: str) -> None:
        if model_id == BASE_MODEL_ID:
            return
        if self._checkpoint_record(model_id) is None:
            raise GenerationError(f"unknown model id {model_id!r}")

    def _persist_checkpoints(self) -> None:
        if self._state_path is None:
            return
        self._state_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self._state_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self._checkpoints, indent=2, sort_keys=True), encoding="utf-8")
        tmp.replace(self._state_path)


def _between(text: str, start: str, end: str) -> str:
    i = text.find(start)
    j = text.find(end, i + len(start)) if i != -1 else -1
    if i == -1 or j == -1:
        raise GenerationError("prompt does not follow a known fixture shape")
    return text[i + len(start) : j]
