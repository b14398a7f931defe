"""Capability interfaces the pipeline depends on, plus shared backend types.

Concrete implementations: :mod:`selfedit.backends.mock` (deterministic,
in-process) and :mod:`selfedit.backends.remote` (JSON-over-HTTP client).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Protocol, Sequence, runtime_checkable

from ..errors import DomainError
from ..model import Hyperparameters, SftExample
from ..prompts import PromptText

MODEL_KINDS = ("base_checkpoint", "adapter")

# Upper bound on generated tokens; no reference value exists for this knob,
# it is plain configuration.
DEFAULT_MAX_TOKENS = 2048


@dataclass(frozen=True)
class DecodingParams:
    """Sampling knobs; ``top_k=-1`` and ``None`` mean unset."""

    temperature: float
    top_p: float
    top_k: int = -1
    min_p: float | None = None
    presence_penalty: float | None = None
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self) -> None:
        if self.temperature < 0.0:
            raise DomainError("temperature", f"must be >= 0, got {self.temperature}")
        if not 0.0 < self.top_p <= 1.0:
            raise DomainError("top_p", f"must be in (0, 1], got {self.top_p}")
        if self.min_p is not None and not 0.0 <= self.min_p <= 1.0:
            raise DomainError("min_p", f"must be in [0, 1], got {self.min_p}")
        if self.max_tokens < 1:
            raise DomainError("max_tokens", f"must be >= 1, got {self.max_tokens}")

    def to_json_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "top_p": self.top_p,
            "top_k": self.top_k,
            "min_p": self.min_p,
            "presence_penalty": self.presence_penalty,
            "max_tokens": self.max_tokens,
        }


# Conservative sampling for the 60% "exploit" share of template slots.
EXPLOIT_DECODING = DecodingParams(temperature=0.6, top_p=0.95, top_k=-1, min_p=0.05, presence_penalty=0.0)
# Higher-temperature sampling for the 40% "explore" share.
EXPLORE_DECODING = DecodingParams(temperature=1.3, top_p=0.95, top_k=-1, min_p=0.1, presence_penalty=0.0)
# Original fixed-template sampling used by the baseline modes.
BASELINE_DECODING = DecodingParams(temperature=1.0, top_p=0.95, top_k=-1, min_p=None, presence_penalty=None)


def decoding_for_mode(decoding_mode: str, max_tokens: int = DEFAULT_MAX_TOKENS) -> DecodingParams:
    table = {
        "exploit": EXPLOIT_DECODING,
        "explore": EXPLORE_DECODING,
        "baseline": BASELINE_DECODING,
        "seed": EXPLOIT_DECODING,
    }
    if decoding_mode not in table:
        raise DomainError("decoding_mode", f"unknown mode {decoding_mode!r}")
    return replace(table[decoding_mode], max_tokens=max_tokens)


@dataclass(frozen=True)
class ModelHandle:
    id: str
    kind: str

    def __post_init__(self) -> None:
        if not self.id:
            raise DomainError("id", "must be non-empty")
        if self.kind not in MODEL_KINDS:
            raise DomainError("kind", f"unknown model kind {self.kind!r}")


@dataclass(frozen=True)
class EmbeddingVector:
    components: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "components", tuple(self.components))
        norm = math.sqrt(sum(c * c for c in self.components))
        if abs(norm - 1.0) > 1e-6:
            raise DomainError("components", f"vector norm {norm} is not 1 within 1e-6")

    def dot(self, other: "EmbeddingVector") -> float:
        return sum(a * b for a, b in zip(self.components, other.components))

    def __iter__(self):
        return iter(self.components)

    def __len__(self) -> int:
        return len(self.components)


@runtime_checkable
class GenerationBackend(Protocol):
    def generate(self, model: ModelHandle, prompt: PromptText, d: DecodingParams, seed: int) -> str: ...


@runtime_checkable
class AdapterBackend(Protocol):
    def train_adapter(self, base: ModelHandle, sequences: Sequence[str], h: Hyperparameters) -> ModelHandle: ...

    def answer(self, model: ModelHandle, question: str) -> str: ...

    def drop_adapter(self, handle: ModelHandle) -> None: ...

    def sft(self, base: ModelHandle, examples: Sequence[SftExample]) -> ModelHandle: ...


@runtime_checkable
class JudgeBackend(Protocol):
    def judge(self, question: str, gold: str, prediction: str) -> bool: ...


@runtime_checkable
class EmbeddingBackend(Protocol):
    def embed(self, t: str) -> EmbeddingVector: ...


@dataclass(frozen=True)
class BackendSuite:
    """The four capability surfaces a run needs, wired independently."""

    generation: GenerationBackend
    adapters: AdapterBackend
    judge: JudgeBackend
    embedder: EmbeddingBackend
