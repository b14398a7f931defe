"""Append-only JSONL run log.

One record per event, carrying every metric input, so any report can be
recomputed offline from the log alone. Records contain no wall-clock data;
a run with a fixed seed logs byte-identical lines.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterator


class RunLog:
    def __init__(self, path: Path | str):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", encoding="utf-8")

    def log(self, event: str, **fields: Any) -> None:
        record = {"event": event, **fields}
        self._fh.write(json.dumps(record, ensure_ascii=False) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "RunLog":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()


class NullRunLog(RunLog):
    """Swallows events; used where callers opt out of logging."""

    def __init__(self):  # noqa: D107 - intentionally no file
        pass

    def log(self, event: str, **fields: Any) -> None:
        pass

    def close(self) -> None:
        pass


def read_log(path: Path | str) -> list[dict[str, Any]]:
    return list(iter_log(path))


def iter_log(path: Path | str) -> Iterator[dict[str, Any]]:
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)
