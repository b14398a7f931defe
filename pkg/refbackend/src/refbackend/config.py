"""Service configuration, resolved from environment variables."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class ServiceConfig:
    engine: str = "stub"  # "stub" or "hf"
    model_path: str | None = None
    work_dir: Path = field(default_factory=lambda: Path("refbackend-state"))
    port: int = 8080
    host: str = "127.0.0.1"
    # Training backpressure: one job trains at a time; at most this many may
    # be admitted (running + waiting) before the service answers 429.
    max_pending_training: int = 8
    judge_api_url: str | None = None
    judge_api_key: str | None = None
    embed_api_url: str | None = None
    embed_api_key: str | None = None
    device: str = "cpu"
    target_modules: tuple[str, ...] = ()  # empty: engine picks per architecture
    max_new_tokens: int = 512

    @classmethod
    def from_env(cls, env: dict[str, str] | None = None) -> "ServiceConfig":
        env = dict(os.environ if env is None else env)

        def get(name: str, default: str | None = None) -> str | None:
            return env.get(f"REFBACKEND_{name}", default)

        target = get("TARGET_MODULES")
        return cls(
            engine=get("ENGINE", "stub"),
            model_path=get("MODEL_PATH"),
            work_dir=Path(get("WORK_DIR", "refbackend-state")),
            port=int(get("PORT", "8080")),
            host=get("HOST", "127.0.0.1"),
            max_pending_training=int(get("MAX_PENDING_TRAINING", "8")),
            judge_api_url=get("JUDGE_API_URL"),
            judge_api_key=get("JUDGE_API_KEY"),
            embed_api_url=get("EMBED_API_URL"),
            embed_api_key=get("EMBED_API_KEY"),
            device=get("DEVICE", "cpu"),
            target_modules=tuple(target.split(",")) if target else (),
            max_new_tokens=int(get("MAX_NEW_TOKENS", "512")),
        )
