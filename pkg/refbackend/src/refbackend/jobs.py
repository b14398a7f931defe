"""Idempotency bookkeeping and training backpressure."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any


@dataclass
class CompletedJob:
    status: int
    payload: Any


class IdempotencyStore:
    """Maps (method, path, Idempotency-Key) to the first completed response.

    A key admits at most one completed job; replays return the stored result
    without re-running the handler.
    """

    def __init__(self):
        self._done: dict[tuple[str, str, str], CompletedJob] = {}
        self._lock = threading.Lock()

    def lookup(self, method: str, path: str, key: str | None) -> CompletedJob | None:
        if not key:
            return None
        with self._lock:
            return self._done.get((method, path, key))

    def record(self, method: str, path: str, key: str | None, status: int, payload: Any) -> None:
        if not key or status >= 400:
            return
        with self._lock:
            self._done.setdefault((method, path, key), CompletedJob(status=status, payload=payload))


class TrainingGate:
    """Serializes training jobs; bounds how many may be admitted at once.

    ``enter`` fails (429 upstream) once running + waiting reaches the cap;
    the ``serial`` lock makes at most one job train at a time.
    """

    def __init__(self, max_pending: int):
        self.max_pending = max_pending
        self.serial = threading.Lock()
        self._pending = 0
        self._lock = threading.Lock()

    def enter(self) -> bool:
        with self._lock:
            if self._pending >= self.max_pending:
                return False
            self._pending += 1
            return True

    def leave(self) -> None:
        with self._lock:
            self._pending -= 1

    @property
    def pending(self) -> int:
        with self._lock:
            return self._pending
