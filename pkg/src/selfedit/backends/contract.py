"""Wire-protocol contract suite.

A conforming server can be driven through any transport: the suite only needs
a ``send(method, path, body, headers) -> (status, parsed_json)`` callable.
Checks cover response schemas, error codes for malformed input, and
idempotent retry of training endpoints.
"""

from __future__ import annotations

import math
from typing import Any, Callable, Sequence

Send = Callable[[str, str, dict | None, dict[str, str]], tuple[int, Any]]

_HP_OK = {
    "lora_rank": 32,
    "lora_alpha": 64,
    "lora_dropout": 0.0,
    "learning_rate": 1e-3,
    "num_epochs": 10,
    "gradient_accumulation_steps": 1,
}

_DECODING_OK = {
    "temperature": 0.6,
    "top_p": 0.95,
    "top_k": -1,
    "min_p": 0.05,
    "presence_penalty": 0.0,
    "max_tokens": 256,
}


def _expect(failures: list[str], name: str, condition: bool, detail: str) -> None:
    if not condition:
        failures.append(f"{name}: {detail}")


def _expect_error_body(failures: list[str], name: str, body: Any) -> None:
    ok = (
        isinstance(body, dict)
        and isinstance(body.get("error"), dict)
        and isinstance(body["error"].get("code"), str)
        and isinstance(body["error"].get("message"), str)
    )
    _expect(failures, name, ok, f"error body must be {{error:{{code,message}}}}, got {body!r}")


def run_contract_suite(send: Send) -> list[str]:
    """Run every scenario; returns a list of failure descriptions (empty = pass)."""
    failures: list[str] = []

    def call(method: str, path: str, body: dict | None = None, key: str | None = None) -> tuple[int, Any]:
        headers = {"Idempotency-Key": key} if key else {}
        return send(method, path, body, headers)

    # generate: happy path and schema violation
    status, data = call(
        "POST",
        "/v1/generate",
        {"model_id": "base", "prompt": "Say something.", "decoding": _DECODING_OK, "seed": 7},
    )
    _expect(failures, "generate-ok", status == 200, f"expected 200, got {status}")
    _expect(failures, "generate-ok", isinstance(data, dict) and isinstance(data.get("text"), str), f"body {data!r}")

    status, data = call("POST", "/v1/generate", {"prompt": "no model", "decoding": _DECODING_OK, "seed": 1})
    _expect(failures, "generate-missing-model", status == 400, f"expected 400, got {status}")
    _expect_error_body(failures, "generate-missing-model", data)

    # adapters: creation, idempotent retry, validation errors
    adapter_req = {"base_model_id": "base", "sequences": ["alpha fact", "beta fact"], "hyperparameters": _HP_OK}
    status, data = call("POST", "/v1/adapters", adapter_req, key="contract-adapter-1")
    _expect(failures, "adapters-ok", status == 200, f"expected 200, got {status}")
    adapter_id = data.get("adapter_id") if isinstance(data, dict) else None
    _expect(failures, "adapters-ok", isinstance(adapter_id, str) and adapter_id != "", f"body {data!r}")

    status, data = call("POST", "/v1/adapters", adapter_req, key="contract-adapter-1")
    _expect(failures, "adapters-idempotent", status == 200, f"expected 200, got {status}")
    _expect(
        failures,
        "adapters-idempotent",
        isinstance(data, dict) and data.get("adapter_id") == adapter_id,
        f"retry returned {data!r}, first returned {adapter_id!r}",
    )

    bad_hp = dict(_HP_OK, lora_dropout=1.5)
    status, data = call(
        "POST", "/v1/adapters", {"base_model_id": "base", "sequences": ["x"], "hyperparameters": bad_hp}
    )
    _expect(failures, "adapters-bad-hp", status == 400, f"expected 400, got {status}")
    _expect_error_body(failures, "adapters-bad-hp", data)

    status, data = call(
        "POST", "/v1/adapters", {"base_model_id": "base", "sequences": [], "hyperparameters": _HP_OK}
    )
    _expect(failures, "adapters-empty-sequences", status == 400, f"expected 400, got {status}")
    _expect_error_body(failures, "adapters-empty-sequences", data)

    # answer: with and without an adapter
    if isinstance(adapter_id, str) and adapter_id:
        status, data = call(
            "POST", "/v1/answer", {"model_id": "base", "adapter_id": adapter_id, "question": "What is alpha?"}
        )
        _expect(failures, "answer-adapter", status == 200, f"expected 200, got {status}")
        _expect(failures, "answer-adapter", isinstance(data, dict) and isinstance(data.get("text"), str), f"body {data!r}")

    status, data = call("POST", "/v1/answer", {"model_id": "base", "question": "What is alpha?"})
    _expect(failures, "answer-base", status == 200, f"expected 200, got {status}")
    _expect(failures, "answer-base", isinstance(data, dict) and isinstance(data.get("text"), str), f"body {data!r}")

    # sft: creation, idempotent retry, empty dataset rejected
    sft_req = {"base_model_id": "base", "examples": [{"prompt": "p1", "target": "t1"}]}
    status, data = call("POST", "/v1/sft", sft_req, key="contract-sft-1")
    _expect(failures, "sft-ok", status == 200, f"expected 200, got {status}")
    checkpoint_id = data.get("checkpoint_id") if isinstance(data, dict) else None
    _expect(failures, "sft-ok", isinstance(checkpoint_id, str) and checkpoint_id != "", f"body {data!r}")

    status, data = call("POST", "/v1/sft", sft_req, key="contract-sft-1")
    _expect(failures, "sft-idempotent", status == 200, f"expected 200, got {status}")
    _expect(
        failures,
        "sft-idempotent",
        isinstance(data, dict) and data.get("checkpoint_id") == checkpoint_id,
        f"retry returned {data!r}, first returned {checkpoint_id!r}",
    )

    status, data = call("POST", "/v1/sft", {"base_model_id": "base", "examples": []})
    _expect(failures, "sft-empty", status == 400, f"expected 400, got {status}")
    _expect_error_body(failures, "sft-empty", data)

    # judge
    status, data = call(
        "POST", "/v1/judge", {"question": "Capital?", "gold": "Paris", "prediction": "paris is the capital"}
    )
    _expect(failures, "judge-ok", status == 200, f"expected 200, got {status}")
    _expect(failures, "judge-ok", isinstance(data, dict) and isinstance(data.get("correct"), bool), f"body {data!r}")

    # embed: unit-norm vector; empty text rejected
    status, data = call("POST", "/v1/embed", {"text": "hello contract"})
    _expect(failures, "embed-ok", status == 200, f"expected 200, got {status}")
    vector = data.get("vector") if isinstance(data, dict) else None
    if isinstance(vector, list) and vector and all(isinstance(x, (int, float)) for x in vector):
        norm = math.sqrt(sum(float(x) ** 2 for x in vector))
        _expect(failures, "embed-ok", abs(norm - 1.0) <= 1e-6, f"vector norm {norm}")
    else:
        failures.append(f"embed-ok: body {data!r}")

    status, data = call("POST", "/v1/embed", {"text": ""})
    _expect(failures, "embed-empty", status == 400, f"expected 400, got {status}")
    _expect_error_body(failures, "embed-empty", data)

    # adapter deletion: 204 then 404
    if isinstance(adapter_id, str) and adapter_id:
        status, _ = call("DELETE", f"/v1/adapters/{adapter_id}")
        _expect(failures, "adapters-delete", status == 204, f"expected 204, got {status}")
        status, data = call("DELETE", f"/v1/adapters/{adapter_id}")
        _expect(failures, "adapters-delete-missing", status == 404, f"expected 404, got {status}")
        _expect_error_body(failures, "adapters-delete-missing", data)

    return failures


def contract_case_names() -> Sequence[str]:
    return (
        "generate-ok",
        "generate-missing-model",
        "adapters-ok",
        "adapters-idempotent",
        "adapters-bad-hp",
        "adapters-empty-sequences",
        "answer-adapter",
        "answer-base",
        "sft-ok",
        "sft-idempotent",
        "sft-empty",
        "judge-ok",
        "embed-ok",
        "embed-empty",
        "adapters-delete",
        "adapters-delete-missing",
    )
