"""FastAPI application exposing the backend wire protocol.

Routes and schemas:
    POST /v1/generate  {model_id, prompt, decoding{...}, seed} -> {text}
    POST /v1/adapters  {base_model_id, sequences[], hyperparameters{6}} -> {adapter_id}
    POST /v1/answer    {model_id, adapter_id?, question} -> {text}
    POST /v1/sft       {base_model_id, examples[{prompt,target}]} -> {checkpoint_id}
    POST /v1/judge     {question, gold, prediction} -> {correct}
    POST /v1/embed     {text} -> {vector}
    DELETE /v1/adapters/{id} -> 204

Schema violations answer 400, unknown ids 404, training overload 429, and
engine warm-up 503 — every error body is {"error": {"code", "message"}}.
Requests may carry an Idempotency-Key header; a retried mutating request
returns the originally computed result without re-applying work.
"""

from __future__ import annotations

import logging
from typing import Any, Callable

from fastapi import FastAPI, Header, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .config import ServiceConfig
from .engines import Engine, EngineError, NotFound, StubEngine
from .jobs import IdempotencyStore, TrainingGate

logger = logging.getLogger(__name__)


class DecodingModel(BaseModel):
    temperature: float = Field(ge=0.0)
    top_p: float = Field(gt=0.0, le=1.0)
    top_k: int = -1
    min_p: float | None = Field(default=None, ge=0.0, le=1.0)
    presence_penalty: float | None = None
    max_tokens: int = Field(default=512, ge=1)


class GenerateRequest(BaseModel):
    model_id: str = Field(min_length=1)
    prompt: str = Field(min_length=1)
    decoding: DecodingModel
    seed: int = 0


class HyperparametersModel(BaseModel):
    model_config = {"extra": "forbid"}

    lora_rank: int = Field(ge=1)
    lora_alpha: int = Field(ge=1)
    lora_dropout: float = Field(ge=0.0, le=1.0)
    learning_rate: float = Field(gt=0.0)
    num_epochs: int = Field(ge=1)
    gradient_accumulation_steps: int = Field(ge=1)


class AdapterRequest(BaseModel):
    base_model_id: str = Field(min_length=1)
    sequences: list[str] = Field(min_length=1)
    hyperparameters: HyperparametersModel


class AnswerRequest(BaseModel):
    model_id: str = Field(min_length=1)
    adapter_id: str | None = None
    question: str = Field(min_length=1)


class SftExampleModel(BaseModel):
    prompt: str = Field(min_length=1)
    target: str = Field(min_length=1)


class SftRequest(BaseModel):
    base_model_id: str = Field(min_length=1)
    examples: list[SftExampleModel] = Field(min_length=1)


class JudgeRequest(BaseModel):
    question: str = Field(min_length=1)
    gold: str = Field(min_length=1)
    prediction: str = ""


class EmbedRequest(BaseModel):
    text: str = Field(min_length=1)


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": {"code": code, "message": message}})


def build_engine(config: ServiceConfig) -> Engine:
    if config.engine == "stub":
        return StubEngine()
    if config.engine == "hf":
        from .hf_engine import HFEngine

        return HFEngine(config)
    raise ValueError(f"unknown engine {config.engine!r}")


def create_app(config: ServiceConfig | None = None, engine: Engine | None = None) -> FastAPI:
    config = config or ServiceConfig.from_env()
    engine = engine or build_engine(config)
    app = FastAPI(title="refbackend", docs_url=None, redoc_url=None)
    store = IdempotencyStore()
    gate = TrainingGate(config.max_pending_training)
    app.state.engine = engine
    app.state.training_gate = gate

    @app.exception_handler(RequestValidationError)
    async def on_validation_error(request: Request, exc: RequestValidationError):
        return _error(400, "bad_request", str(exc.errors()[:3]))

    @app.exception_handler(EngineError)
    async def on_engine_error(request: Request, exc: EngineError):
        return _error(400, "bad_request", str(exc))

    @app.exception_handler(NotFound)
    async def on_not_found(request: Request, exc: NotFound):
        return _error(404, "not_found", str(exc))

    def guarded(
        request: Request,
        idempotency_key: str | None,
        handler: Callable[[], tuple[int, Any]],
        *,
        training: bool = False,
    ) -> Response:
        if not engine.ready():
            return _error(503, "loading", "engine is still loading")
        method, path = request.method, request.url.path
        done = store.lookup(method, path, idempotency_key)
        if done is not None:
            return JSONResponse(status_code=done.status, content=done.payload)
        if training:
            if not gate.enter():
                return _error(429, "overloaded", "training queue is full")
            try:
                with gate.serial:
                    status, payload = handler()
            finally:
                gate.leave()
        else:
            status, payload = handler()
        store.record(method, path, idempotency_key, status, payload)
        if payload is None:
            return Response(status_code=status)
        return JSONResponse(status_code=status, content=payload)

    @app.post("/v1/generate")
    def generate(
        body: GenerateRequest,
        request: Request,
        idempotency_key: str | None = Header(default=None, alias="Idempotency-Key"),
    ) -> Response:
        def handler() -> tuple[int, Any]:
            text = engine.generate(body.model_id, body.prompt, body.decoding.model_dump(), body.seed)
            return 200, {"text": text}

        return guarded(request, idempotency_key, handler)

    @app.post("/v1/adapters")
    def create_adapter(
        body: AdapterRequest,
        request: Request,
        idempotency_key: str | None = Header(default=None, alias="Idempotency-Key"),
    ) -> Response:
        def handler() -> tuple[int, Any]:
            adapter_id = engine.train_adapter(
                body.base_model_id, body.sequences, body.hyperparameters.model_dump()
            )
            return 200, {"adapter_id": adapter_id}

        return guarded(request, idempotency_key, handler, training=True)

    @app.post("/v1/answer")
    def answer(
        body: AnswerRequest,
        request: Request,
        idempotency_key: str | None = Header(default=None, alias="Idempotency-Key"),
    ) -> Response:
        def handler() -> tuple[int, Any]:
            return 200, {"text": engine.answer(body.model_id, body.adapter_id, body.question)}

        return guarded(request, idempotency_key, handler)

    @app.post("/v1/sft")
    def sft(
        body: SftRequest,
        request: Request,
        idempotency_key: str | None = Header(default=None, alias="Idempotency-Key"),
    ) -> Response:
        def handler() -> tuple[int, Any]:
            checkpoint_id = engine.sft(body.base_model_id, [e.model_dump() for e in body.examples])
            return 200, {"checkpoint_id": checkpoint_id}

        return guarded(request, idempotency_key, handler, training=True)

    @app.post("/v1/judge")
    def judge(
        body: JudgeRequest,
        request: Request,
        idempotency_key: str | None = Header(default=None, alias="Idempotency-Key"),
    ) -> Response:
        def handler() -> tuple[int, Any]:
            return 200, {"correct": engine.judge(body.question, body.gold, body.prediction)}

        return guarded(request, idempotency_key, handler)

    @app.post("/v1/embed")
    def embed(
        body: EmbedRequest,
        request: Request,
        idempotency_key: str | None = Header(default=None, alias="Idempotency-Key"),
    ) -> Response:
        def handler() -> tuple[int, Any]:
            return 200, {"vector": engine.embed(body.text)}

        return guarded(request, idempotency_key, handler)

    @app.delete("/v1/adapters/{adapter_id}")
    def delete_adapter(
        adapter_id: str,
        request: Request,
        idempotency_key: str | None = Header(default=None, alias="Idempotency-Key"),
    ) -> Response:
        def handler() -> tuple[int, Any]:
            if not engine.delete_adapter(adapter_id):
                raise NotFound(f"unknown adapter {adapter_id}")
            return 204, None

        return guarded(request, idempotency_key, handler)

    @app.get("/healthz")
    def health() -> Response:
        if not engine.ready():
            return _error(503, "loading", "engine is still loading")
        return JSONResponse(content={"status": "ok"})

    return app
