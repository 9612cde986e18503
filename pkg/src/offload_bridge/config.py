"""Configuration of the server, the client SDK and the built-in library.

The configuration is a tree of dataclasses, turned into an OmegaConf structured config
so that YAML files and ``key.sub=value`` overrides are type checked against it.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from .constants import (
    DEFAULT_BATCH_BYTES,
    DEFAULT_COLLECTIVE_TIMEOUT_S,
    DEFAULT_COMPLETENESS_TIMEOUT_S,
    DEFAULT_CONDEST_MAX_COLS,
    DEFAULT_GEMM_MEMORY_BUDGET_BYTES,
)
from .errors import ArgumentError

logger = logging.getLogger(__name__)


@dataclass
class ServerConfig:
    """Driver and worker pool settings."""

    host: str = "127.0.0.1"
    port: int = 0
    num_workers: int = 4
    worker_port_base: int = 0
    info_file: str | None = None
    plugins: list[str] = field(default_factory=list)


@dataclass
class CommConfig:
    """Worker group collectives."""

    transport: str = "stream"
    timeout_s: float = DEFAULT_COLLECTIVE_TIMEOUT_S


@dataclass
class ClientConfig:
    """Client SDK settings."""

    batch_bytes: int = DEFAULT_BATCH_BYTES
    rows_per_message: int | None = None
    connect_timeout_s: float = 10.0
    completeness_timeout_s: float = DEFAULT_COMPLETENESS_TIMEOUT_S


@dataclass
class MathlibConfig:
    """Numerical settings of the built-in library."""

    tol: float = 1e-10
    max_restarts: int = 10
    svd_seed: int = 0
    gemm_memory_budget_bytes: int = DEFAULT_GEMM_MEMORY_BUDGET_BYTES
    gemm_streaming: bool = True
    condest_max_cols: int = DEFAULT_CONDEST_MAX_COLS


@dataclass
class BridgeConfig:
    """Complete configuration."""

    server: ServerConfig = field(default_factory=ServerConfig)
    comm: CommConfig = field(default_factory=CommConfig)
    client: ClientConfig = field(default_factory=ClientConfig)
    mathlib: MathlibConfig = field(default_factory=MathlibConfig)


def load_config(
    path: Path | None = None, overrides: Iterable[str] = ()
) -> BridgeConfig:
    """Load the configuration.

    Defaults come from the dataclasses, then an optional YAML file and then dotlist
    overrides are merged on top.

    Args:
        path: Optional YAML file.
        overrides: Overrides of the form ``comm.timeout_s=5``.

    Returns:
        The merged configuration.

    Raises:
        ArgumentError: If the file or an override does not match the schema.

    >>> load_config(overrides=["server.num_workers=9"]).server.num_workers
    9
    """
    schema = OmegaConf.structured(BridgeConfig)
    try:
        layers = [schema]
        if path is not None:
            if not path.exists():
                raise FileNotFoundError(f"Config file not found: {path}")
            layers.append(OmegaConf.load(path))
        overrides = list(overrides)
        if overrides:
            layers.append(OmegaConf.from_dotlist(overrides))
        merged = OmegaConf.merge(*layers)
    except OmegaConfBaseException as exc:
        raise ArgumentError(f"Invalid configuration: {exc}") from exc

    config = OmegaConf.to_object(merged)
    assert isinstance(config, BridgeConfig)
    _validate(config)
    logger.debug(f"Loaded configuration: {config}")
    return config


def _validate(config: BridgeConfig) -> None:
    """Check value ranges the schema cannot express."""
    if config.server.num_workers < 1:
        raise ArgumentError("server.num_workers must be at least 1")
    if config.comm.transport not in ("stream", "queue"):
        raise ArgumentError(
            f"comm.transport must be 'stream' or 'queue', not {config.comm.transport!r}"
        )
    if config.client.batch_bytes < 8:
        raise ArgumentError("client.batch_bytes must hold at least one f64")
    rows_per_message = config.client.rows_per_message
    if rows_per_message is not None and rows_per_message < 1:
        raise ArgumentError("client.rows_per_message must be at least 1")
    if config.comm.timeout_s <= 0:
        raise ArgumentError("comm.timeout_s must be positive")


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    """Split a ``HOST:PORT`` endpoint.

    Raises:
        ArgumentError: If the endpoint is malformed.

    >>> parse_endpoint("127.0.0.1:7077")
    ('127.0.0.1', 7077)
    """
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ArgumentError(f"Endpoint {endpoint!r} is not of the form HOST:PORT")
    return host, int(port)


def read_info_file(path: Path) -> tuple[str, int]:
    """Read the driver address and port from a server info file.

    The file holds three lines: hostname, address and port.

    Raises:
        ArgumentError: If the file does not have that shape.
    """
    lines = path.read_text().split()
    if len(lines) < 3 or not lines[2].isdigit():
        raise ArgumentError(f"{path} is not a server info file")
    return lines[1], int(lines[2])
