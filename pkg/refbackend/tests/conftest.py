from __future__ import annotations

import pytest
from fastapi.testclient import TestClient

from refbackend.app import create_app
from refbackend.config import ServiceConfig
from refbackend.engines import StubEngine


@pytest.fixture
def stub_engine() -> StubEngine:
    return StubEngine()


@pytest.fixture
def client(stub_engine) -> TestClient:
    app = create_app(ServiceConfig(engine="stub", max_pending_training=4), engine=stub_engine)
    return TestClient(app)


HP_OK = {
    "lora_rank": 32,
    "lora_alpha": 64,
    "lora_dropout": 0.0,
    "learning_rate": 1e-3,
    "num_epochs": 10,
    "gradient_accumulation_steps": 1,
}
