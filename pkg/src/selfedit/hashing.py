"""Stable hashing for seeds and ids.

Everything that needs per-item randomness derives it from these helpers so a
run is reproducible across processes and platforms (Python's ``hash`` is
salted per process and unusable for this).
"""

from __future__ import annotations

import hashlib


def stable_digest(*parts: str) -> str:
    joined = "\x1f".join(parts)
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()


def stable_int(*parts: str) -> int:
    return int(stable_digest(*parts)[:16], 16)


def unit_interval(*parts: str) -> float:
    return stable_int(*parts) / float(1 << 64)
