"""JSON-over-HTTP client for remote backends.

Every mutating request carries an Idempotency-Key header that stays fixed
across retries, so a retried training call is applied at most once server
side. 429/503 and transport failures are retried with exponential backoff;
other 4xx/5xx responses surface immediately as non-retryable errors.
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import httpx

from ..errors import BackendUnavailable, GenerationError, TrainingError
from ..model import Hyperparameters, SftExample
from ..prompts import PromptText
from . import DecodingParams, EmbeddingVector, ModelHandle

RETRYABLE_STATUS = (429, 503)


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    backoff_base: float = 0.25
    backoff_cap: float = 4.0

    def delay(self, attempt: int) -> float:
        return min(self.backoff_cap, self.backoff_base * (2**attempt))


class RemoteBackend:
    """Implements all four capability protocols against one service base URL."""

    def __init__(
        self,
        base_url: str,
        *,
        timeout: float = 60.0,
        retry: RetryPolicy = RetryPolicy(),
        max_in_flight: int = 8,
        client: httpx.Client | None = None,
        sleeper: Callable[[float], None] = time.sleep,
    ):
        self._client = client or httpx.Client(base_url=base_url, timeout=timeout)
        self._retry = retry
        self._sleep = sleeper
        self._in_flight = threading.Semaphore(max_in_flight)
        self._adapter_bases: dict[str, str] = {}

    def close(self) -> None:
        self._client.close()

    # -- capabilities ---------------------------------------------------------

    def generate(self, model: ModelHandle, prompt: PromptText, d: DecodingParams, seed: int) -> str:
        payload = {
            "model_id": model.id,
            "prompt": prompt.text,
            "decoding": d.to_json_dict(),
            "seed": seed,
        }
        data = self._request("POST", "/v1/generate", payload, error=GenerationError)
        return data["text"]

    def train_adapter(self, base: ModelHandle, sequences: Sequence[str], h: Hyperparameters) -> ModelHandle:
        payload = {
            "base_model_id": base.id,
            "sequences": list(sequences),
            "hyperparameters": h.to_json_dict(),
        }
        data = self._request("POST", "/v1/adapters", payload, error=TrainingError)
        adapter_id = data["adapter_id"]
        self._adapter_bases[adapter_id] = base.id
        return ModelHandle(id=adapter_id, kind="adapter")

    def answer(self, model: ModelHandle, question: str) -> str:
        if model.kind == "adapter":
            base_id = self._adapter_bases.get(model.id)
            if base_id is None:
                raise GenerationError(f"adapter {model.id} was not created by this client")
            payload: dict[str, Any] = {"model_id": base_id, "adapter_id": model.id, "question": question}
        else:
            payload = {"model_id": model.id, "question": question}
        data = self._request("POST", "/v1/answer", payload, error=GenerationError)
        return data["text"]

    def drop_adapter(self, handle: ModelHandle) -> None:
        self._request("DELETE", f"/v1/adapters/{handle.id}", None, error=GenerationError)
        self._adapter_bases.pop(handle.id, None)

    def sft(self, base: ModelHandle, examples: Sequence[SftExample]) -> ModelHandle:
        payload = {
            "base_model_id": base.id,
            "examples": [{"prompt": e.prompt_text, "target": e.target_text} for e in examples],
        }
        data = self._request("POST", "/v1/sft", payload, error=TrainingError)
        return ModelHandle(id=data["checkpoint_id"], kind="base_checkpoint")

    def judge(self, question: str, gold: str, prediction: str) -> bool:
        payload = {"question": question, "gold": gold, "prediction": prediction}
        data = self._request("POST", "/v1/judge", payload, error=GenerationError)
        return bool(data["correct"])

    def embed(self, t: str) -> EmbeddingVector:
        data = self._request("POST", "/v1/embed", {"text": t}, error=GenerationError)
        return EmbeddingVector(components=tuple(float(x) for x in data["vector"]))

    # -- transport ------------------------------------------------------------

    def _request(
        self,
        method: str,
        path: str,
        payload: dict[str, Any] | None,
        error: type[Exception],
    ) -> dict[str, Any]:
        idempotency_key = uuid.uuid4().hex
        last_failure = "no attempt made"
        for attempt in range(self._retry.max_attempts):
            if attempt:
                self._sleep(self._retry.delay(attempt - 1))
            try:
                with self._in_flight:
                    response = self._client.request(
                        method,
                        path,
                        json=payload,
                        headers={"Idempotency-Key": idempotency_key},
                    )
            except httpx.HTTPError as exc:
                last_failure = f"transport error: {exc}"
                continue
            if response.status_code in RETRYABLE_STATUS:
                last_failure = f"status {response.status_code}"
                continue
            if response.status_code >= 400:
                raise error(_error_message(response))
            if response.status_code == 204:
                return {}
            return response.json()
        raise BackendUnavailable(f"{method} {path} failed after {self._retry.max_attempts} attempts ({last_failure})")


def _error_message(response: httpx.Response) -> str:
    try:
        info = response.json()["error"]
        return f"{response.status_code} {info['code']}: {info['message']}"
    except Exception:
        return f"{response.status_code}: {response.text[:200]}"
