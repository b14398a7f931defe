"""Run the service: python -m refbackend"""

from __future__ import annotations

import logging

import uvicorn

from .app import create_app
from .config import ServiceConfig


def main() -> None:
    logging.basicConfig(level=logging.INFO)
    config = ServiceConfig.from_env()
    uvicorn.run(create_app(config), host=config.host, port=config.port)


if __name__ == "__main__":
    main()
