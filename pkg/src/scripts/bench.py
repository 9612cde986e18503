"""Benchmark a running bridge server.

Usage:
>>> python src/scripts/bench.py run \
        --scenario="scenarios/gemm.txt" \
        --info-file="bridge.info" \
        --format=table

>>> python src/scripts/bench.py transfer \
        --server="127.0.0.1:24960" \
        --tall=512000x100 \
        --wide=4000x12800 \
        --batches=1row,1MiB
"""

import logging
from pathlib import Path

import click

from offload_bridge.bench import (
    format_report,
    load_scenario,
    parse_shape,
    run_scenario,
    transfer_experiment,
)
from offload_bridge.config import read_info_file
from offload_bridge.constants import FILE_NAMES

logger = logging.getLogger(__name__)


def _endpoint(server: str | None, info_file: Path) -> str:
    if server is not None:
        return server
    host, port = read_info_file(info_file)
    return f"{host}:{port}"


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        click.echo(text)
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    logger.info(f"Wrote report to {out}")


@click.group()
@click.option(
    "--server", default=None, type=str, help="Driver endpoint as HOST:PORT."
)
@click.option(
    "--info-file",
    default=FILE_NAMES["info_file"],
    type=click.Path(dir_okay=False, path_type=Path),
    help="Server info file, used when --server is not given.",
)
@click.option(
    "--format",
    "fmt",
    default="table",
    type=click.Choice(["table", "csv"]),
    help="Report format.",
)
@click.option(
    "--out",
    default=None,
    type=click.Path(dir_okay=False, path_type=Path),
    help="Write the report to this file instead of stdout.",
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
@click.pass_context
def main(
    ctx: click.Context,
    server: str | None,
    info_file: Path,
    fmt: str,
    out: Path | None,
    log_level: str,
    log_file: Path | None,
) -> None:
    """Benchmark a bridge server."""
    logging.basicConfig(
        level=log_level.upper(),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        filename=log_file,
    )
    ctx.obj = dict(server=server, info_file=info_file, fmt=fmt, out=out)


@main.command()
@click.option(
    "--scenario",
    "scenario_file",
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Scenario file of key=value lines.",
)
@click.option(
    "--set",
    "overrides",
    multiple=True,
    help="Scenario override such as reps=5. Can be repeated.",
)
@click.option(
    "--raw-log",
    default=None,
    type=click.Path(dir_okay=False, path_type=Path),
    help=f"Append every repetition to this JSON Lines file, e.g. "
    f"{FILE_NAMES['raw_log']}.",
)
@click.pass_obj
def run(
    opts: dict, scenario_file: Path, overrides: tuple[str, ...], raw_log: Path | None
) -> None:
    """Time send, compute and receive of a scenario."""
    scenario = load_scenario(scenario_file, overrides)
    endpoint = _endpoint(opts["server"], opts["info_file"])
    report = run_scenario(scenario, endpoint, raw_log=raw_log)
    if report.failed:
        logger.error(f"Every repetition failed: {report.failures}")
    _emit(format_report(report, opts["fmt"]), opts["out"])


@main.command()
@click.option("--tall", required=True, type=str, help="Tall shape as MxN.")
@click.option("--wide", required=True, type=str, help="Wide shape as MxN.")
@click.option(
    "--batches",
    default="1row,1MiB",
    type=str,
    help="Comma-separated batch settings: Nrows or a byte size such as 4KiB.",
)
@click.option("--workers", default=2, type=int, help="Workers to request.")
@click.option("--seed", default=0, type=int, help="Seed of the generated rows.")
@click.pass_obj
def transfer(
    opts: dict, tall: str, wide: str, batches: str, workers: int, seed: int
) -> None:
    """Compare message counts and send times of a tall and a wide matrix."""
    report = transfer_experiment(
        parse_shape(tall),
        parse_shape(wide),
        [batch for batch in batches.split(",") if batch.strip()],
        _endpoint(opts["server"], opts["info_file"]),
        workers=workers,
        seed=seed,
    )
    _emit(format_report(report, opts["fmt"]), opts["out"])


if __name__ == "__main__":
    main()
