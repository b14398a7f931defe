"""Engine interface and the deterministic in-process stub engine.

The stub engine keeps the service fully functional without model weights:
ids are content digests, answers echo trained content, and the embedder is
a hashed-trigram scheme. The real engine lives in :mod:`refbackend.hf_engine`
and is loaded lazily.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
from typing import Any, Protocol, Sequence


class EngineError(Exception):
    """Invalid request content (maps to 400)."""


class NotFound(Exception):
    """Unknown model/adapter/checkpoint id (maps to 404)."""


class Engine(Protocol):
    def ready(self) -> bool: ...

    def generate(self, model_id: str, prompt: str, decoding: dict[str, Any], seed: int) -> str: ...

    def train_adapter(self, base_model_id: str, sequences: Sequence[str], hyperparameters: dict[str, Any]) -> str: ...

    def answer(self, model_id: str, adapter_id: str | None, question: str) -> str: ...

    def sft(self, base_model_id: str, examples: Sequence[dict[str, str]]) -> str: ...

    def judge(self, question: str, gold: str, prediction: str) -> bool: ...

    def embed(self, text: str) -> list[float]: ...

    def delete_adapter(self, adapter_id: str) -> bool: ...


def digest(*parts: str) -> str:
    return hashlib.sha256("\x1f".join(parts).encode("utf-8")).hexdigest()[:16]


def trigram_embedding(text: str, dim: int = 64) -> list[float]:
    counts = [0.0] * dim
    grams = [text[i : i + 3] for i in range(len(text) - 2)] if len(text) >= 3 else [text]
    for gram in grams:
        bucket = int(hashlib.sha256(("emb\x1f" + gram).encode("utf-8")).hexdigest()[:8], 16) % dim
        counts[bucket] += 1.0
    norm = math.sqrt(sum(c * c for c in counts))
    return [c / norm for c in counts]


class StubEngine:
    """Deterministic engine with content-addressed adapters and checkpoints."""

    def __init__(self):
        self._adapters: dict[str, dict[str, Any]] = {}
        self._checkpoints: set[str] = {"base"}
        self._lock = threading.Lock()
        self._ready = True

    def set_ready(self, value: bool) -> None:
        self._ready = value

    def ready(self) -> bool:
        return self._ready

    def generate(self, model_id: str, prompt: str, decoding: dict[str, Any], seed: int) -> str:
        self._require_checkpoint(model_id)
        return f"stub-{digest(model_id, prompt, json.dumps(decoding, sort_keys=True), str(seed))}"

    def train_adapter(self, base_model_id: str, sequences: Sequence[str], hyperparameters: dict[str, Any]) -> str:
        self._require_checkpoint(base_model_id)
        adapter_id = "adapter-" + digest(base_model_id, json.dumps(list(sequences)), json.dumps(hyperparameters, sort_keys=True))
        with self._lock:
            # Content-addressed: retraining identical content reuses the record.
            self._adapters[adapter_id] = {"base": base_model_id, "data": "\n".join(sequences).lower()}
        return adapter_id

    def answer(self, model_id: str, adapter_id: str | None, question: str) -> str:
        if adapter_id is None:
            self._require_checkpoint(model_id)
            return "unknown"
        with self._lock:
            record = self._adapters.get(adapter_id)
        if record is None:
            raise NotFound(f"unknown adapter {adapter_id}")
        # Echo semantics: answer with the first trained line mentioning a
        # question word, else admit ignorance.
        words = [w.strip("?.,").lower() for w in question.split() if len(w) > 3]
        for line in record["data"].split("\n"):
            if any(w in line for w in words):
                return line
        return "unknown"

    def sft(self, base_model_id: str, examples: Sequence[dict[str, str]]) -> str:
        self._require_checkpoint(base_model_id)
        payload = json.dumps(list(examples), sort_keys=True)
        checkpoint_id = "ckpt-" + digest(base_model_id, payload)
        with self._lock:
            self._checkpoints.add(checkpoint_id)
        return checkpoint_id

    def judge(self, question: str, gold: str, prediction: str) -> bool:
        return gold.lower() in prediction.lower()

    def embed(self, text: str) -> list[float]:
        return trigram_embedding(text)

    def delete_adapter(self, adapter_id: str) -> bool:
        with self._lock:
            return self._adapters.pop(adapter_id, None) is not None

    def _require_checkpoint(self, model_id: str) -> None:
        with self._lock:
            known = model_id in self._checkpoints
        if not known:
            raise NotFound(f"unknown model {model_id}")
