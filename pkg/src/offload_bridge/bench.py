"""Benchmark harness.

Every repetition of a scenario opens a fresh session and times three phases at the
SDK call level: send (create, stream and await the inputs), compute (the RUN) and
receive (fetching the outputs). Input matrices are generated client-side with
`uniform_rows`, so every client process can produce its own rows without
coordination and the result can be checked against a dense NumPy oracle.

The transfer experiment sends two matrices of equal volume but different shape and
counts the messages each produces for several batch settings.
"""

import io
import logging
import math
import multiprocessing
import re
import time
from concurrent.futures import Executor, ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Literal

import jsonlines
import numpy as np
import pandas as pd
from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from .client import (
    BridgeContext,
    ClientProcess,
    LocalRowPartition,
    MathLib,
    SessionTicket,
)
from .config import ClientConfig
from .constants import DEFAULT_BATCH_BYTES, Command
from .distmatrix import LayoutDescriptor, count_messages, partition
from .errors import ArgumentError, BridgeError
from .mathlib import uniform_rows
from .protocol import F64, MatrixHandle, rows_per_batch

logger = logging.getLogger(__name__)

ROUTINES = ("gemm", "truncated_svd", "transpose", "condest")

# Rows generated and sent at a time by one client process.
GENERATE_CHUNK_ROWS = 8192

CSV_COLUMNS = [
    "routine",
    "m",
    "n",
    "k",
    "clients",
    "workers",
    "batch_bytes",
    "rows_per_message",
    "seed",
    "reps",
    "rep",
    "send_s",
    "compute_s",
    "receive_s",
    "total_s",
    "messages",
    "bytes_sent",
    "bytes_received",
    "check_error",
    "error",
]


@dataclass
class Scenario:
    """One benchmark configuration.

    For ``gemm`` the inputs are A (m x n) and B (n x k); for ``truncated_svd`` k is
    the rank; ``transpose`` and ``condest`` ignore k.
    """

    routine: str = "gemm"
    m: int = 64
    n: int = 64
    k: int = 64
    clients: int = 1
    workers: int = 2
    batch_bytes: int = DEFAULT_BATCH_BYTES
    rows_per_message: int | None = None
    seed: int = 0
    reps: int = 3
    timeout_s: float = 120.0
    check: bool = True

    def __post_init__(self) -> None:
        """Check the counts."""
        if self.routine not in ROUTINES:
            raise ArgumentError(
                f"Unknown routine {self.routine!r}, use one of {ROUTINES}"
            )
        for name in ("m", "n", "k", "clients", "workers", "reps", "batch_bytes"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"Scenario {name} must be at least 1")
        if self.rows_per_message is not None and self.rows_per_message < 1:
            raise ArgumentError("Scenario rows_per_message must be at least 1")

    @property
    def result_shape(self) -> tuple[int, int]:
        """Shape of the matrix the routine returns (1 x 1 for a scalar)."""
        match self.routine:
            case "gemm" | "truncated_svd":
                return self.m, self.k
            case "transpose":
                return self.n, self.m
            case _:
                return 1, 1

    @property
    def result_bytes(self) -> int:
        """Size of the result, m * k * 8 bytes for GEMM."""
        rows, cols = self.result_shape
        return rows * cols * F64.itemsize

    @property
    def dims(self) -> str:
        """The input dimensions as shown in reports."""
        if self.routine == "gemm":
            return f"{self.m}x{self.n} * {self.n}x{self.k}"
        if self.routine == "truncated_svd":
            return f"{self.m}x{self.n}, k={self.k}"
        return f"{self.m}x{self.n}"

    def client_config(self) -> ClientConfig:
        """Client settings of the scenario's batching."""
        return ClientConfig(
            batch_bytes=self.batch_bytes,
            rows_per_message=self.rows_per_message,
            completeness_timeout_s=self.timeout_s,
        )


def load_scenario(path: Path | None = None, overrides: Iterable[str] = ()) -> Scenario:
    """Read a scenario file of ``key=value`` lines, then apply overrides.

    Blank lines and lines starting with ``#`` are skipped.

    Raises:
        ArgumentError: On unknown keys, ill-typed values or invalid counts.

    >>> load_scenario(overrides=["routine=truncated_svd", "k=20"]).k
    20
    """
    lines: list[str] = []
    if path is not None:
        if not path.exists():
            raise ArgumentError(f"Scenario file not found: {path}")
        lines = [
            line.strip()
            for line in path.read_text().splitlines()
            if line.strip() and not line.strip().startswith("#")
        ]
    lines.extend(overrides)
    for line in lines:
        if "=" not in line:
            raise ArgumentError(f"Scenario line {line!r} is not key=value")
    try:
        merged = OmegaConf.merge(
            OmegaConf.structured(Scenario), OmegaConf.from_dotlist(lines)
        )
        scenario = OmegaConf.to_object(merged)
    except OmegaConfBaseException as exc:
        raise ArgumentError(f"Invalid scenario: {exc}") from exc
    assert isinstance(scenario, Scenario)
    return scenario


@dataclass
class Repetition:
    """Measurements of one repetition; `error` is set when it failed."""

    rep: int
    send_s: float = 0.0
    compute_s: float = 0.0
    receive_s: float = 0.0
    total_s: float = 0.0
    messages: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    check_error: float | None = None
    error: str | None = None
    messages_per_pair: dict[str, int] = field(default_factory=dict, compare=False)

    @property
    def ok(self) -> bool:
        """Whether the repetition completed."""
        return self.error is None

    @property
    def overhead(self) -> float:
        """Fraction of the total spent moving data."""
        if self.total_s <= 0:
            return 0.0
        return (self.send_s + self.receive_s) / self.total_s

    def phases_consistent(self, slack: float = 0.05) -> bool:
        """Whether send + compute + receive fits in the total, with some slack."""
        phases = self.send_s + self.compute_s + self.receive_s
        return phases <= self.total_s * (1 + slack)


def trimmed_mean(values: Iterable[float]) -> float:
    """Mean without the smallest and largest value, once there are three or more.

    >>> trimmed_mean([1.0, 2.0, 3.0, 100.0])
    2.5
    >>> trimmed_mean([4.0, 6.0])
    5.0
    """
    ordered = sorted(values)
    if not ordered:
        return math.nan
    if len(ordered) >= 3:
        ordered = ordered[1:-1]
    return sum(ordered) / len(ordered)


@dataclass
class TimingReport:
    """All repetitions of a scenario."""

    scenario: Scenario
    repetitions: list[Repetition] = field(default_factory=list)

    @property
    def successful(self) -> list[Repetition]:
        """The repetitions that completed."""
        return [rep for rep in self.repetitions if rep.ok]

    @property
    def failed(self) -> bool:
        """True when every repetition failed."""
        return bool(self.repetitions) and not self.successful

    @property
    def failures(self) -> list[str]:
        """Error messages of the failed repetitions."""
        return [rep.error for rep in self.repetitions if rep.error is not None]

    def mean(self, phase: str) -> float:
        """Mean of a phase (``send_s``, ...) over the successful repetitions."""
        values = [getattr(rep, phase) for rep in self.successful]
        return sum(values) / len(values) if values else math.nan

    def trimmed(self, phase: str) -> float:
        """Trimmed mean of a phase over the successful repetitions."""
        return trimmed_mean(getattr(rep, phase) for rep in self.successful)

    def to_frame(self) -> pd.DataFrame:
        """One row per repetition with the scenario fields in front."""
        head = {name: getattr(self.scenario, name) for name in CSV_COLUMNS[:10]}
        rows = [
            head | {name: getattr(rep, name) for name in CSV_COLUMNS[10:]}
            for rep in self.repetitions
        ]
        return pd.DataFrame(rows, columns=CSV_COLUMNS)

    def summary_frame(self) -> pd.DataFrame:
        """The scenario as one row: dims, size of result, nodes and phase means."""

        def seconds(phase: str) -> str:
            return "NA" if not self.successful else f"{self.mean(phase):.3f}"

        row = {
            "routine": self.scenario.routine,
            "dims": self.scenario.dims,
            "size of result (GB)": f"{self.scenario.result_bytes / 1e9:.3g}",
            "nodes": f"{self.scenario.clients}/{self.scenario.workers}",
            "send (s)": seconds("send_s"),
            "compute (s)": seconds("compute_s"),
            "receive (s)": seconds("receive_s"),
            "total (s)": seconds("total_s"),
            "trimmed total (s)": (
                "NA" if not self.successful else f"{self.trimmed('total_s'):.3f}"
            ),
            "runs": f"{len(self.successful)}/{len(self.repetitions)}",
        }
        return pd.DataFrame([row])


@dataclass(frozen=True)
class BatchSpec:
    """How rows are grouped into messages."""

    label: str
    batch_bytes: int = DEFAULT_BATCH_BYTES
    rows_per_message: int | None = None


_SIZE_UNITS = {"": 1, "b": 1, "kib": 1 << 10, "mib": 1 << 20, "gib": 1 << 30}


def parse_batch_spec(spec: str) -> BatchSpec:
    """Parse ``1row``, ``16rows`` or a byte size such as ``4KiB`` or ``1MiB``.

    >>> parse_batch_spec("1row").rows_per_message
    1
    >>> parse_batch_spec("4KiB").batch_bytes
    4096
    """
    text = spec.strip()
    match = re.fullmatch(r"(\d+)\s*rows?", text, flags=re.IGNORECASE)
    if match:
        return BatchSpec(text, rows_per_message=int(match.group(1)))
    match = re.fullmatch(r"(\d+)\s*([KMG]iB|B)?", text, flags=re.IGNORECASE)
    if not match:
        raise ArgumentError(f"Batch spec {spec!r} is neither Nrows nor a byte size")
    size = int(match.group(1)) * _SIZE_UNITS[(match.group(2) or "").lower()]
    return BatchSpec(text, batch_bytes=size)


def parse_shape(text: str) -> tuple[int, int]:
    """Parse ``MxN``.

    >>> parse_shape("512000x100")
    (512000, 100)
    """
    match = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", text)
    if not match:
        raise ArgumentError(f"Shape {text!r} is not of the form MxN")
    return int(match.group(1)), int(match.group(2))


def _send_generated(
    process: ClientProcess, handle: MatrixHandle, seed: int, lo: int, hi: int
) -> dict[int, int]:
    """Generate rows [lo, hi) and send them, chunked along owner boundaries.

    Chunks are multiples of the batch size within each owner's range, so the frame
    count is the same as sending the whole range at once.
    """
    layout = process.layout(handle)
    batch_rows = rows_per_batch(
        handle.cols, process.ticket.batch_bytes, process.ticket.rows_per_message
    )
    chunk = batch_rows * max(1, GENERATE_CHUNK_ROWS // batch_rows)
    counts: dict[int, int] = {}
    for rank in range(layout.p):
        start, stop = layout.row_range(rank)
        start, stop = max(start, lo), min(stop, hi)
        for first in range(start, stop, chunk):
            last = min(first + chunk, stop)
            part = LocalRowPartition(
                np.arange(first, last), uniform_rows(seed, first, last, handle.cols)
            )
            for owner, sent in process.send_rows(handle, part).items():
                counts[owner] = counts.get(owner, 0) + sent
    return counts


def _client_send(
    ticket: SessionTicket, handle: MatrixHandle, seed: int, lo: int, hi: int
) -> dict[int, int]:
    """Send rows from a separate client process."""
    with ClientProcess(ticket) as process:
        return _send_generated(process, handle, seed, lo, hi)


def _client_fetch(
    ticket: SessionTicket, handle: MatrixHandle, lo: int, hi: int
) -> np.ndarray:
    """Fetch rows [lo, hi) from a separate client process."""
    with ClientProcess(ticket) as process:
        return process.fetch_rows(handle, np.arange(lo, hi)).rows


class _Clients:
    """The client processes of a repetition; client 0 is the calling process."""

    def __init__(
        self, ctx: BridgeContext, count: int, executor: Executor | None
    ) -> None:
        self.ctx = ctx
        self.count = count
        self.executor = executor

    def send(self, handle: MatrixHandle, seed: int) -> dict[str, int]:
        bounds = partition(handle.rows, self.count)
        ticket = self.ctx.ticket()
        futures = [
            self.executor.submit(
                _client_send, ticket, handle, seed, bounds[c], bounds[c + 1]
            )
            for c in range(1, self.count)
            if self.executor is not None
        ]
        results = [_send_generated(self.ctx.data, handle, seed, bounds[0], bounds[1])]
        results.extend(future.result() for future in futures)
        self.ctx.await_matrix(handle)
        return {
            f"{client}:{rank}": sent
            for client, counts in enumerate(results)
            for rank, sent in sorted(counts.items())
        }

    def fetch(self, handle: MatrixHandle) -> np.ndarray:
        bounds = partition(handle.rows, min(self.count, handle.rows))
        ticket = self.ctx.ticket()
        futures = [
            self.executor.submit(
                _client_fetch, ticket, handle, bounds[c], bounds[c + 1]
            )
            for c in range(1, len(bounds) - 1)
            if self.executor is not None
        ]
        parts = [self.ctx.fetch_matrix(handle, np.arange(bounds[0], bounds[1])).rows]
        parts.extend(future.result() for future in futures)
        return np.vstack(parts)


def _relative_error(result: np.ndarray, expected: np.ndarray) -> float:
    scale = float(np.linalg.norm(expected))
    return float(np.linalg.norm(result - expected)) / (scale if scale > 0 else 1.0)


def _run_repetition(
    scenario: Scenario, endpoint: str, rep: int, executor: Executor | None
) -> Repetition:
    result = Repetition(rep=rep)
    s = scenario
    started = time.perf_counter()
    with BridgeContext.connect(
        endpoint, client_name=f"bench-{s.routine}-{rep}", config=s.client_config()
    ) as ctx:
        ctx.request_workers(s.workers)
        lib = MathLib(ctx)
        clients = _Clients(ctx, s.clients, executor)

        tick = time.perf_counter()
        a = ctx.create_matrix(s.m, s.n)
        pairs = clients.send(a, s.seed)
        if s.routine == "gemm":
            b = ctx.create_matrix(s.n, s.k)
            for pair, sent in clients.send(b, s.seed + 1).items():
                pairs[pair] = pairs.get(pair, 0) + sent
        result.send_s = time.perf_counter() - tick

        tick = time.perf_counter()
        match s.routine:
            case "gemm":
                output: Any = lib.gemm(a, b)
            case "truncated_svd":
                output = lib.truncated_svd(a, s.k)
            case "transpose":
                output = lib.transpose(a)
            case _:
                output = lib.condest(a)
        result.compute_s = time.perf_counter() - tick

        tick = time.perf_counter()
        if isinstance(output, MatrixHandle):
            fetched: Any = clients.fetch(output)
        elif s.routine == "truncated_svd":
            fetched = (clients.fetch(output.u), output.s, clients.fetch(output.v))
        else:
            fetched = output
        result.receive_s = time.perf_counter() - tick
        result.total_s = time.perf_counter() - started

        result.messages_per_pair = pairs
        result.messages = sum(pairs.values())
        result.bytes_sent = ctx.control_bytes_sent + ctx.data.bytes_sent
        result.bytes_received = ctx.control_bytes_received + ctx.data.bytes_received
    if s.check:
        result.check_error = _check(s, fetched)
    return result


def _check(s: Scenario, fetched: Any) -> float:
    """Error of the fetched result against a dense NumPy computation."""
    a = uniform_rows(s.seed, 0, s.m, s.n)
    match s.routine:
        case "gemm":
            return _relative_error(fetched, a @ uniform_rows(s.seed + 1, 0, s.n, s.k))
        case "truncated_svd":
            _, sigma, _ = fetched
            expected = np.linalg.svd(a, compute_uv=False)[: s.k]
            return _relative_error(sigma, expected)
        case "transpose":
            return _relative_error(fetched, a.T)
        case _:
            expected = float(np.linalg.cond(a))
            return abs(fetched - expected) / expected


def run_scenario(
    scenario: Scenario, endpoint: str, raw_log: Path | None = None
) -> TimingReport:
    """Run every repetition of a scenario against a server.

    A repetition that raises a bridge error is recorded with the error and the next
    one starts; the report of a scenario whose repetitions all failed has
    `failed` set.

    Args:
        scenario: What to run.
        endpoint: The driver as ``host:port``.
        raw_log: Optional JSON Lines file the repetitions are appended to.

    Returns:
        The report.
    """
    report = TimingReport(scenario)
    executor: Executor | None = None
    if scenario.clients > 1:
        executor = ProcessPoolExecutor(
            max_workers=scenario.clients - 1,
            mp_context=multiprocessing.get_context("spawn"),
        )
    try:
        for rep in range(scenario.reps):
            try:
                result = _run_repetition(scenario, endpoint, rep, executor)
            except BridgeError as exc:
                logger.warning(f"Repetition {rep} of {scenario.dims} failed: {exc}")
                result = Repetition(rep=rep, error=f"{type(exc).__name__}: {exc}")
            else:
                logger.info(
                    f"{scenario.routine} {scenario.dims} rep {rep}: "
                    f"send {result.send_s:.3f}s, compute {result.compute_s:.3f}s, "
                    f"receive {result.receive_s:.3f}s, total {result.total_s:.3f}s"
                )
            report.repetitions.append(result)
            if raw_log is not None:
                with jsonlines.open(raw_log, mode="a") as writer:
                    writer.write({**asdict(scenario), **asdict(result)})
    finally:
        if executor is not None:
            executor.shutdown()
    return report


@dataclass
class TransferRow:
    """Sending one shape with one batch setting."""

    shape: str
    m: int
    n: int
    batch: str
    rows_per_batch: int
    send_s: float
    messages: int
    expected_messages: int
    bytes_sent: int

    @property
    def law_holds(self) -> bool:
        """Whether the observed frame count matches the layout's run count."""
        return self.messages == self.expected_messages


@dataclass
class TransferReport:
    """Tall against wide, for every batch setting."""

    tall: tuple[int, int]
    wide: tuple[int, int]
    rows: list[TransferRow] = field(default_factory=list)

    def messages(self, shape: str, batch: str) -> int:
        """Frames sent for one shape and batch setting."""
        for row in self.rows:
            if (row.shape, row.batch) == (shape, batch):
                return row.messages
        raise KeyError((shape, batch))

    def ratio(self, batch: str) -> float:
        """Tall frames over wide frames for one batch setting."""
        return self.messages("tall", batch) / self.messages("wide", batch)

    def to_frame(self) -> pd.DataFrame:
        """One row per shape and batch setting."""
        frame = pd.DataFrame([asdict(row) for row in self.rows])
        if self.rows:
            frame["law_holds"] = [row.law_holds for row in self.rows]
        return frame


def _send_shape(
    endpoint: str,
    shape: str,
    m: int,
    n: int,
    batch: BatchSpec,
    workers: int,
    seed: int,
) -> TransferRow:
    config = ClientConfig(
        batch_bytes=batch.batch_bytes, rows_per_message=batch.rows_per_message
    )
    with BridgeContext.connect(
        endpoint, client_name=f"bench-transfer-{shape}", config=config
    ) as ctx:
        ctx.request_workers(workers)
        handle = ctx.create_matrix(m, n)
        tick = time.perf_counter()
        _send_generated(ctx.data, handle, seed, 0, m)
        ctx.await_matrix(handle)
        send_s = time.perf_counter() - tick
        batch_rows = rows_per_batch(n, batch.batch_bytes, batch.rows_per_message)
        layout = LayoutDescriptor.block_rows(m, n, workers)
        expected = count_messages(np.arange(m), layout, batch_rows)
        observed = ctx.data.frames_sent(Command.SEND_ROWS)
        row = TransferRow(
            shape=shape,
            m=m,
            n=n,
            batch=batch.label,
            rows_per_batch=batch_rows,
            send_s=send_s,
            messages=sum(observed.values()),
            expected_messages=sum(expected.values()),
            bytes_sent=ctx.data.bytes_sent,
        )
    if not row.law_holds:
        logger.warning(
            f"{shape} {m}x{n} with {batch.label}: sent {row.messages} frames, "
            f"expected {row.expected_messages}"
        )
    logger.info(
        f"{shape} {m}x{n} with {batch.label}: {row.messages} frames in {send_s:.3f}s"
    )
    return row


def transfer_experiment(
    tall: tuple[int, int],
    wide: tuple[int, int],
    batches: Iterable[str | BatchSpec],
    endpoint: str,
    workers: int = 2,
    seed: int = 0,
) -> TransferReport:
    """Send an equal volume as a tall and as a wide matrix, per batch setting.

    Raises:
        ArgumentError: If the two shapes do not hold the same number of entries.
    """
    if tall[0] * tall[1] != wide[0] * wide[1]:
        raise ArgumentError(
            f"Shapes {tall[0]}x{tall[1]} and {wide[0]}x{wide[1]} differ in volume"
        )
    report = TransferReport(tall, wide)
    for spec in batches:
        batch = spec if isinstance(spec, BatchSpec) else parse_batch_spec(spec)
        for shape, (m, n) in (("tall", tall), ("wide", wide)):
            report.rows.append(_send_shape(endpoint, shape, m, n, batch, workers, seed))
    return report


def format_report(
    report: TimingReport | TransferReport, fmt: Literal["table", "csv"] = "table"
) -> str:
    """Render a report.

    The table of a timing report has one summary row with the dims, size of result,
    nodes and phase columns; its csv has one row per repetition with a fixed header.
    """
    if isinstance(report, TransferReport):
        frame = report.to_frame()
    elif fmt == "csv":
        frame = report.to_frame()
    else:
        frame = report.summary_frame()
    if fmt == "csv":
        return frame.to_csv(index=False)
    if fmt != "table":
        raise ArgumentError(f"Unknown report format {fmt!r}")
    return frame.to_string(index=False)


def read_report_csv(text: str) -> TimingReport:
    """Parse the csv of a timing report back into a report.

    Raises:
        ArgumentError: If the header is not the report header or the csv is empty.
    """
    frame = pd.read_csv(
        io.StringIO(text),
        keep_default_na=False,
        na_values=[""],
        float_precision="round_trip",
    )
    if list(frame.columns) != CSV_COLUMNS:
        raise ArgumentError(f"Not a timing report csv, header: {list(frame.columns)}")
    if frame.empty:
        raise ArgumentError("The csv holds no repetitions")
    records = frame.astype(object).where(frame.notna(), None).to_dict("records")
    first = records[0]
    scenario_fields = {f.name for f in fields(Scenario)}
    scenario = Scenario(
        **{
            name: _scalar(first[name])
            for name in CSV_COLUMNS[:10]
            if name in scenario_fields
        }
    )
    repetitions = [
        Repetition(**{name: _scalar(record[name]) for name in CSV_COLUMNS[10:]})
        for record in records
    ]
    return TimingReport(scenario, repetitions)


def _scalar(value: Any) -> Any:
    """NumPy scalars to Python, floats holding integers to int."""
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and value.is_integer():
        return int(value)
    return value
