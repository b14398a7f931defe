"""Reference wire-protocol backend: real model serving behind the same
endpoints the orchestration engine's remote client speaks."""

from .app import create_app
from .config import ServiceConfig

__all__ = ["create_app", "ServiceConfig"]
