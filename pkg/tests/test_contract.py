from __future__ import annotations

import httpx
import pytest

from selfedit.backends.contract import contract_case_names, run_contract_suite
from selfedit.backends.mock import make_synthetic_passages
from wire_stub import WireStubServer


@pytest.fixture
def server():
    stub = WireStubServer(make_synthetic_passages(2, 2, seed=1))
    yield stub
    stub.close()


def test_stub_server_passes_contract_suite(server) -> None:
    with httpx.Client(base_url=server.base_url, timeout=10.0) as client:

        def send(method, path, body, headers):
            response = client.request(method, path, json=body, headers=headers)
            payload = response.json() if response.content else None
            return response.status_code, payload

        failures = run_contract_suite(send)
    assert failures == []


def test_case_list_is_stable() -> None:
    names = contract_case_names()
    assert "adapters-idempotent" in names
    assert "sft-idempotent" in names
    assert len(names) == len(set(names))
