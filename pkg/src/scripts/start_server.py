"""Start a bridge server and serve until interrupted.

Usage:
>>> python src/scripts/start_server.py \
        --workers=9 \
        --listen="0.0.0.0:24960" \
        --info-file="bridge.info"
"""

import logging
import signal
import threading
from pathlib import Path

import click

from offload_bridge.config import load_config, parse_endpoint
from offload_bridge.constants import FILE_NAMES
from offload_bridge.server import BridgeServer

logger = logging.getLogger(__name__)


@click.command()
@click.option(
    "--workers", default=None, type=int, help="Number of workers in the pool."
)
@click.option(
    "--listen",
    default=None,
    type=str,
    help="Driver endpoint as HOST:PORT. Port 0 picks a free port.",
)
@click.option(
    "--worker-port-base",
    default=None,
    type=int,
    help="Worker i listens on this port + i. If not specified, free ports are used.",
)
@click.option(
    "--info-file",
    default=FILE_NAMES["info_file"],
    type=click.Path(dir_okay=False, path_type=Path),
    help="File to write the driver's hostname, address and port to.",
)
@click.option(
    "--config",
    "config_file",
    default=None,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="YAML configuration file.",
)
@click.option(
    "--set",
    "overrides",
    multiple=True,
    help="Configuration override such as comm.timeout_s=30. Can be repeated.",
)
@click.option(
    "--log-level",
    default="INFO",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    help="Logging level.",
)
@click.option(
    "--log-file",
    default=None,
    type=click.Path(dir_okay=False, path_type=Path),
    help="Write the log to this file instead of stderr.",
)
def main(
    workers: int | None,
    listen: str | None,
    worker_port_base: int | None,
    info_file: Path,
    config_file: Path | None,
    overrides: tuple[str, ...],
    log_level: str,
    log_file: Path | None,
) -> None:
    """Start a bridge server."""
    logging.basicConfig(
        level=log_level.upper(),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        filename=log_file,
    )

    cli_overrides = list(overrides)
    if workers is not None:
        cli_overrides.append(f"server.num_workers={workers}")
    if listen is not None:
        host, port = parse_endpoint(listen)
        cli_overrides += [f"server.host={host}", f"server.port={port}"]
    if worker_port_base is not None:
        cli_overrides.append(f"server.worker_port_base={worker_port_base}")
    cli_overrides.append(f"server.info_file={info_file}")
    config = load_config(path=config_file, overrides=cli_overrides)

    stopped = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stopped.set())
    with BridgeServer(config) as server:
        logger.info(f"Serving on {server.endpoint}, info file {info_file}")
        try:
            stopped.wait()
        except KeyboardInterrupt:
            logger.info("Interrupted")


if __name__ == "__main__":
    main()
