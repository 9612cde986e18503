"""Shared fixtures: in-process servers and connected sessions."""

from typing import Callable, Generator

import numpy as np
import pytest

from offload_bridge.client import BridgeContext
from offload_bridge.config import BridgeConfig, load_config
from offload_bridge.server import BridgeServer


@pytest.fixture
def make_server() -> Generator[Callable[..., BridgeServer], None, None]:
    """Start servers with the given pool size and overrides; stop them afterwards."""
    servers: list[BridgeServer] = []

    def start(num_workers: int = 4, *overrides: str) -> BridgeServer:
        config = load_config(
            overrides=[f"server.num_workers={num_workers}", *overrides]
        )
        server = BridgeServer(config).start()
        servers.append(server)
        return server

    yield start
    for server in servers:
        server.stop()


@pytest.fixture
def server(make_server: Callable[..., BridgeServer]) -> BridgeServer:
    """A running server with four workers."""
    return make_server(4)


@pytest.fixture
def ctx(server: BridgeServer) -> Generator[BridgeContext, None, None]:
    """A session holding two workers with the built-in library registered."""
    with BridgeContext.connect(server.endpoint, client_name="pytest") as context:
        context.request_workers(2)
        context.register_library("mathlib")
        yield context


@pytest.fixture
def config() -> BridgeConfig:
    """The default configuration."""
    return load_config()


@pytest.fixture
def rng() -> np.random.Generator:
    """A seeded generator."""
    return np.random.default_rng(4242)
