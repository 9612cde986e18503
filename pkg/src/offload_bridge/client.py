"""Client SDK.

A `BridgeContext` is one session: it owns the control connection to the driver and,
once workers are granted, a data connection to every worker of the group. Matrices
live on the server and are represented by `MatrixHandle` proxies; rows only move on
`send_matrix` and `fetch_matrix`.

Several client processes can feed one session: `BridgeContext.ticket()` returns a
picklable `SessionTicket` from which a `ClientProcess` in another process opens its
own data connections.

Example:
    >>> from offload_bridge.config import load_config
    >>> from offload_bridge.server import BridgeServer
    >>> server = BridgeServer(load_config(overrides=["server.num_workers=2"])).start()
    >>> with BridgeContext.connect(server.endpoint) as ctx:
    ...     _ = ctx.request_workers(2)
    ...     A = ctx.send_matrix(np.arange(6.0).reshape(3, 2))
    ...     ctx.fetch_matrix(A).to_dense().tolist()
    [[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]]
    >>> server.stop()
"""

import dataclasses
import logging
import socket
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from types import TracebackType
from typing import Any, Sequence

import numpy as np

from .config import ClientConfig, parse_endpoint, read_info_file
from .constants import (
    DEFAULT_BATCH_BYTES,
    MATHLIB_NAME,
    PROTOCOL_VERSION,
    Command,
    ValueTag,
)
from .distmatrix import LayoutDescriptor, row_runs
from .errors import (
    ArgumentError,
    BridgeError,
    ConnectError,
    ContextClosedError,
    HandleError,
    ProtocolError,
    SessionClosedError,
    SessionStateError,
    error_from_code,
)
from .protocol import (
    F64,
    FetchRequest,
    Frame,
    MatrixHandle,
    RowBatch,
    Value,
    decode_error,
    decode_row_batch,
    decode_values,
    encode_fetch_request,
    encode_row_batch,
    encode_values,
    recv_frame,
    rows_per_batch,
    send_frame,
    values_of,
)

logger = logging.getLogger(__name__)

DEFAULT_CLIENT_NAME = "offload_bridge-client"


@dataclass
class LocalRowPartition:
    """Rows of a matrix held by one client process.

    Args:
        indices: Global row indices, sorted and unique.
        rows: One row of length n per index.
    """

    indices: np.ndarray
    rows: np.ndarray

    def __post_init__(self) -> None:
        """Check the shapes and sort the rows by index."""
        self.indices = np.asarray(self.indices, dtype=np.int64).ravel()
        self.rows = np.ascontiguousarray(self.rows, dtype=F64)
        if self.rows.ndim != 2 or self.rows.shape[0] != self.indices.size:
            raise ArgumentError(
                f"Need one row per index: {self.indices.size} indices, rows of shape "
                f"{self.rows.shape}"
            )
        order = np.argsort(self.indices, kind="stable")
        if not np.array_equal(order, np.arange(self.indices.size)):
            self.indices, self.rows = self.indices[order], self.rows[order]
        if np.any(np.diff(self.indices) == 0):
            raise ArgumentError("Row indices must be unique")
        if self.indices.size and self.indices[0] < 0:
            raise ArgumentError("Row indices must be non-negative")

    @classmethod
    def from_dense(
        cls, matrix: np.ndarray, indices: Sequence[int] | np.ndarray | None = None
    ) -> "LocalRowPartition":
        """Take the given rows (default: all) of a dense matrix."""
        matrix = np.asarray(matrix, dtype=F64)
        if matrix.ndim != 2:
            raise ArgumentError(f"Expected a 2D matrix, got {matrix.ndim}D")
        if indices is None:
            indices = np.arange(matrix.shape[0])
        indices = np.asarray(indices, dtype=np.int64)
        return cls(indices, matrix[indices])

    @property
    def n(self) -> int:
        """Row length."""
        return self.rows.shape[1]

    def __len__(self) -> int:
        """Number of rows."""
        return int(self.indices.size)

    def to_dense(self) -> np.ndarray:
        """The rows as a dense matrix; they must be rows 0..len-1.

        Raises:
            ArgumentError: If the indices are not contiguous from 0.
        """
        if not np.array_equal(self.indices, np.arange(self.indices.size)):
            raise ArgumentError("to_dense needs the rows 0..m-1 without gaps")
        return self.rows.copy()


@dataclass(frozen=True)
class SessionTicket:
    """What another client process needs to join a session's data traffic."""

    session_id: int
    group_id: int
    endpoints: tuple[str, ...]
    client_name: str = DEFAULT_CLIENT_NAME
    batch_bytes: int = DEFAULT_BATCH_BYTES
    rows_per_message: int | None = None
    connect_timeout_s: float = 10.0


@dataclass(frozen=True)
class SVDResult:
    """Truncated SVD returned by `MathLib.truncated_svd`."""

    u: MatrixHandle
    s: np.ndarray
    v: MatrixHandle
    converged: bool


class _Channel:
    """A framed connection with byte counters."""

    def __init__(self, endpoint: str, timeout_s: float) -> None:
        host, port = parse_endpoint(endpoint)
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout_s)
        except OSError as exc:
            raise ConnectError(f"Cannot connect to {endpoint}: {exc}") from exc
        self.sock.settimeout(None)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.endpoint = endpoint
        self.bytes_sent = 0
        self.bytes_received = 0
        self.frames_sent: dict[Command, int] = {}

    def send(self, command: Command, session_id: int, payload: bytes = b"") -> None:
        try:
            self.bytes_sent += send_frame(self.sock, command, session_id, payload)
        except OSError as exc:
            raise SessionClosedError(
                f"Connection to {self.endpoint} lost: {exc}"
            ) from exc
        self.frames_sent[command] = self.frames_sent.get(command, 0) + 1

    def receive(self, expected: Command) -> Frame:
        """Read the next frame, raising the server's error if it is an ERROR."""
        try:
            frame = recv_frame(self.sock)
        except OSError as exc:
            raise SessionClosedError(
                f"Connection to {self.endpoint} lost: {exc}"
            ) from exc
        if frame is None:
            raise SessionClosedError(f"{self.endpoint} closed the connection")
        self.bytes_received += frame.size
        if frame.command == Command.ERROR:
            code, message = decode_error(frame.payload)
            raise error_from_code(code, message)
        if frame.command != expected:
            raise ProtocolError(
                f"Expected {expected.name} from {self.endpoint}, "
                f"got {frame.command.name}"
            )
        return frame

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class ClientProcess:
    """Data connections of one client process to every worker of a session.

    Args:
        ticket: The session to join.
    """

    def __init__(self, ticket: SessionTicket) -> None:
        """Connect and handshake with every worker of the group."""
        self.ticket = ticket
        self.channels: list[_Channel] = []
        hello = encode_values([Value.string(ticket.client_name)])
        try:
            for endpoint in ticket.endpoints:
                channel = _Channel(endpoint, ticket.connect_timeout_s)
                self.channels.append(channel)
                channel.send(Command.HANDSHAKE, ticket.session_id, hello)
                channel.receive(Command.HANDSHAKE_REPLY)
        except BridgeError:
            self.close()
            raise
        self.fetched_payload_bytes = 0

    def layout(self, handle: MatrixHandle) -> LayoutDescriptor:
        """The layout the server uses for a matrix of the group."""
        return LayoutDescriptor.block_rows(
            handle.rows, handle.cols, len(self.channels), self.ticket.group_id
        )

    def _rows_per_batch(self, n: int) -> int:
        return rows_per_batch(n, self.ticket.batch_bytes, self.ticket.rows_per_message)

    def send_rows(
        self, handle: MatrixHandle, part: LocalRowPartition
    ) -> dict[int, int]:
        """Stream rows to their owners, one thread per worker.

        Returns:
            Number of SEND_ROWS frames sent to each rank.

        Raises:
            ArgumentError: If the rows do not fit the matrix.
        """
        if len(part) and part.n != handle.cols:
            raise ArgumentError(
                f"Rows of length {part.n} do not fit a matrix with "
                f"{handle.cols} columns"
            )
        if len(part) and part.indices[-1] >= handle.rows:
            raise ArgumentError(
                f"Row {int(part.indices[-1])} out of range for {handle.rows} rows"
            )
        layout = self.layout(handle)
        batch_rows = self._rows_per_batch(handle.cols)
        runs = row_runs(part.indices, layout)

        def send_to(rank: int) -> int:
            channel = self.channels[rank]
            count = 0
            for position, first, length in runs.get(rank, []):
                for offset in range(0, length, batch_rows):
                    size = min(batch_rows, length - offset)
                    lo = position + offset
                    batch = RowBatch.from_array(
                        handle.id, first + offset, part.rows[lo : lo + size]
                    )
                    channel.send(
                        Command.SEND_ROWS,
                        self.ticket.session_id,
                        encode_row_batch(batch),
                    )
                    count += 1
            return count

        counts = self._per_rank(send_to, sorted(runs))
        logger.debug(f"Sent {len(part)} rows of matrix {handle.id}: {counts}")
        return counts

    def fetch_rows(
        self, handle: MatrixHandle, rows: Sequence[int] | np.ndarray | None = None
    ) -> LocalRowPartition:
        """Fetch rows (default: all) of a complete matrix from their owners."""
        indices = (
            np.arange(handle.rows, dtype=np.int64)
            if rows is None
            else np.unique(np.asarray(rows, dtype=np.int64))
        )
        if indices.size and (indices[0] < 0 or indices[-1] >= handle.rows):
            raise ArgumentError(f"Requested rows outside 0..{handle.rows - 1}")
        layout = self.layout(handle)
        batch_rows = self._rows_per_batch(handle.cols)
        runs = row_runs(indices, layout)
        out = np.empty((indices.size, handle.cols), dtype=F64)

        def fetch_from(rank: int) -> int:
            channel = self.channels[rank]
            payload_bytes = 0
            for position, first, length in runs[rank]:
                request = FetchRequest(handle.id, first, length, batch_rows)
                channel.send(
                    Command.FETCH_ROWS,
                    self.ticket.session_id,
                    encode_fetch_request(request),
                )
                for _ in range(request.num_batches):
                    frame = channel.receive(Command.FETCH_ROWS_REPLY)
                    batch = decode_row_batch(frame.payload)
                    lo = position + batch.start_row - first
                    out[lo : lo + batch.num_rows] = batch.array()
                    payload_bytes += len(batch.data)
            return payload_bytes

        received = self._per_rank(fetch_from, sorted(runs))
        self.fetched_payload_bytes += sum(received.values())
        return LocalRowPartition(indices, out)

    def _per_rank(self, fn: Any, ranks: list[int]) -> dict[int, int]:
        if len(ranks) <= 1:
            return {rank: fn(rank) for rank in ranks}
        with ThreadPoolExecutor(
            max_workers=len(ranks), thread_name_prefix="bridge-data"
        ) as executor:
            futures = {rank: executor.submit(fn, rank) for rank in ranks}
            return {rank: future.result() for rank, future in futures.items()}

    @property
    def bytes_sent(self) -> int:
        """Bytes sent on all data connections."""
        return sum(channel.bytes_sent for channel in self.channels)

    @property
    def bytes_received(self) -> int:
        """Bytes received on all data connections."""
        return sum(channel.bytes_received for channel in self.channels)

    def frames_sent(self, command: Command) -> dict[int, int]:
        """Number of frames of one command sent to each rank."""
        return {
            rank: channel.frames_sent.get(command, 0)
            for rank, channel in enumerate(self.channels)
        }

    def close(self) -> None:
        """Say goodbye to every worker and close the connections."""
        for channel in self.channels:
            try:
                channel.send(Command.CLOSE, self.ticket.session_id)
                channel.receive(Command.CLOSE_REPLY)
            except BridgeError:
                pass
            channel.close()
        self.channels = []

    def __enter__(self) -> "ClientProcess":
        """Use as a context manager."""
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        traceback: TracebackType | None,
    ) -> None:
        """Close the connections."""
        self.close()


class BridgeContext:
    """A session with a bridge server.

    Args:
        endpoint: The driver as ``host:port``.
        client_name: Name reported to the server.
        config: Client settings.
    """

    def __init__(
        self,
        endpoint: str,
        client_name: str = DEFAULT_CLIENT_NAME,
        config: ClientConfig | None = None,
    ) -> None:
        """Connect to the driver and open a session."""
        self.config = config if config is not None else ClientConfig()
        self.client_name = client_name
        self._lock = threading.Lock()
        self._closed = False
        self._process: ClientProcess | None = None
        self._group_id = 0
        self._endpoints: tuple[str, ...] = ()
        self.session_id = 0
        self._control = _Channel(endpoint, self.config.connect_timeout_s)
        try:
            reply = self._request(
                Command.HANDSHAKE,
                [Value.i32(PROTOCOL_VERSION), Value.string(client_name)],
            )
        except BridgeError:
            self._control.close()
            raise
        session_id, self.server_name, self.pool_size = values_of(
            reply, ValueTag.I64, ValueTag.STRING, ValueTag.I32
        )
        self.session_id = session_id
        logger.info(
            f"Connected to {self.server_name} at {endpoint}, session {session_id}"
        )

    @classmethod
    def connect(
        cls,
        endpoint: str | Path,
        client_name: str = DEFAULT_CLIENT_NAME,
        config: ClientConfig | None = None,
    ) -> "BridgeContext":
        """Connect to ``host:port`` or to the server described by an info file.

        Raises:
            ConnectError: If the info file cannot be read or the driver does not
                answer.
        """
        if isinstance(endpoint, Path) or ":" not in str(endpoint):
            try:
                host, port = read_info_file(Path(endpoint))
            except OSError as exc:
                raise ConnectError(
                    f"Cannot read server info file {endpoint}: {exc}"
                ) from exc
            endpoint = f"{host}:{port}"
        return cls(str(endpoint), client_name=client_name, config=config)

    def _check_open(self) -> None:
        if self._closed:
            raise ContextClosedError("The context was stopped")

    def _check_handle(self, handle: MatrixHandle) -> None:
        if not isinstance(handle, MatrixHandle):
            raise ArgumentError(f"Expected a MatrixHandle, got {type(handle).__name__}")
        if handle.session_id not in (0, self.session_id):
            raise HandleError(
                f"Matrix {handle.id} belongs to session {handle.session_id}, this is "
                f"session {self.session_id}"
            )

    def _request(self, command: Command, values: list[Any]) -> list[Value]:
        """Send a control command and wait for its reply."""
        with self._lock:
            self._control.send(command, self.session_id, encode_values(values))
            frame = self._control.receive(command.reply)
        return decode_values(frame.payload)

    @property
    def control_bytes_sent(self) -> int:
        """Bytes sent on the control connection."""
        return self._control.bytes_sent

    @property
    def control_bytes_received(self) -> int:
        """Bytes received on the control connection."""
        return self._control.bytes_received

    @property
    def data(self) -> ClientProcess:
        """The data connections of this process.

        Raises:
            SessionStateError: If no workers were requested yet.
        """
        self._check_open()
        if self._process is None:
            raise SessionStateError("Request workers before moving matrix data")
        return self._process

    def request_workers(self, n: int) -> int:
        """Ask for an exclusive group of `n` workers and connect to them.

        Returns:
            The number of workers granted.
        """
        self._check_open()
        reply = self._request(Command.REQUEST_WORKERS, [Value.i32(n)])
        if not reply or reply[0].tag != ValueTag.I32:
            raise ProtocolError("Malformed REQUEST_WORKERS reply")
        self._group_id = reply[0].data
        self._endpoints = tuple(
            values_of(reply[1:], *([ValueTag.STRING] * (len(reply) - 1)))
        )
        self._process = ClientProcess(self.ticket())
        logger.info(
            f"Session {self.session_id} granted workers {list(self._endpoints)}"
        )
        return len(self._endpoints)

    def ticket(self) -> SessionTicket:
        """A picklable description of the session for other client processes."""
        self._check_open()
        return SessionTicket(
            session_id=self.session_id,
            group_id=self._group_id,
            endpoints=self._endpoints,
            client_name=self.client_name,
            batch_bytes=self.config.batch_bytes,
            rows_per_message=self.config.rows_per_message,
            connect_timeout_s=self.config.connect_timeout_s,
        )

    def register_library(self, name: str, locator: str = "") -> None:
        """Bind a server library to the session."""
        self._check_open()
        self._request(
            Command.REGISTER_LIBRARY, [Value.string(name), Value.string(locator)]
        )

    def create_matrix(self, m: int, n: int) -> MatrixHandle:
        """Allocate an empty m x n matrix on the workers."""
        self._check_open()
        reply = self._request(Command.CREATE_MATRIX, [Value.i64(m), Value.i64(n)])
        handle = reply[0].data
        boundaries = tuple(int(b) for b in reply[1].data)
        expected = self.data.layout(handle).boundaries
        if boundaries != expected:
            raise ProtocolError(f"Server layout {boundaries} differs from {expected}")
        return dataclasses.replace(handle, session_id=self.session_id)

    def send_rows(
        self, handle: MatrixHandle, part: LocalRowPartition
    ) -> dict[int, int]:
        """Stream this process's rows of a matrix to their owners."""
        self._check_handle(handle)
        return self.data.send_rows(handle, part)

    def await_matrix(
        self, handle: MatrixHandle, timeout_s: float | None = None
    ) -> None:
        """Wait until the server holds every row of a matrix.

        Raises:
            CompletenessTimeoutError: Naming the missing rows, after the timeout.
        """
        self._check_open()
        self._check_handle(handle)
        timeout = self.config.completeness_timeout_s if timeout_s is None else timeout_s
        self._request(Command.AWAIT_MATRIX, [Value.matrix(handle), Value.f64(timeout)])

    def send_matrix(
        self,
        rows: np.ndarray | LocalRowPartition,
        m: int | None = None,
        n: int | None = None,
        timeout_s: float | None = None,
    ) -> MatrixHandle:
        """Create a matrix, send this process's rows and wait for completeness.

        Args:
            rows: A dense matrix, or the rows this process holds.
            m: Number of rows; defaults to the dense matrix's.
            n: Number of columns; defaults to the rows' length.
            timeout_s: Completeness timeout.
        """
        part = (
            rows
            if isinstance(rows, LocalRowPartition)
            else LocalRowPartition.from_dense(rows)
        )
        if m is None:
            m = int(part.indices[-1]) + 1 if len(part) else 0
        if n is None:
            n = part.n
        handle = self.create_matrix(m, n)
        self.send_rows(handle, part)
        self.await_matrix(handle, timeout_s)
        return handle

    def fetch_matrix(
        self, handle: MatrixHandle, rows: Sequence[int] | np.ndarray | None = None
    ) -> LocalRowPartition:
        """Fetch rows (default: all) of a matrix."""
        self._check_handle(handle)
        return self.data.fetch_rows(handle, rows)

    def run(self, library: str, routine: str, *args: Any) -> list[Any]:
        """Run a routine on the server.

        Arguments are wrapped with `Value.wrap`; matrix results come back as handles,
        without moving their rows.
        """
        self._check_open()
        for arg in args:
            if isinstance(arg, MatrixHandle):
                self._check_handle(arg)
        reply = self._request(
            Command.RUN,
            [Value.string(library), Value.string(routine), *map(Value.wrap, args)],
        )
        return [self._unwrap(value) for value in reply]

    def _unwrap(self, value: Value) -> Any:
        if value.tag == ValueTag.MATRIX:
            return dataclasses.replace(value.data, session_id=self.session_id)
        return value.unwrap()

    def stop(self) -> None:
        """Close the session; stopping twice is a no-op."""
        if self._closed:
            return
        if self._process is not None:
            self._process.close()
        try:
            self._request(Command.CLOSE, [])
        except BridgeError as exc:
            logger.debug(f"CLOSE of session {self.session_id} failed: {exc}")
        self._control.close()
        self._closed = True
        logger.info(f"Stopped session {self.session_id}")

    def __enter__(self) -> "BridgeContext":
        """Use as a context manager."""
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        traceback: TracebackType | None,
    ) -> None:
        """Stop the session."""
        self.stop()


class MathLib:
    """Typed wrapper of the server's ``mathlib`` routines.

    Args:
        ctx: The session.
        name: Name of the library on the server.
        locator: Optional locator passed to REGISTER_LIBRARY.
    """

    def __init__(
        self, ctx: BridgeContext, name: str = MATHLIB_NAME, locator: str = ""
    ) -> None:
        """Register the library with the session."""
        self.ctx = ctx
        self.name = name
        ctx.register_library(name, locator)

    def gemm(self, a: MatrixHandle, b: MatrixHandle) -> MatrixHandle:
        """C = A B."""
        (c,) = self.ctx.run(self.name, "gemm", a, b)
        return c

    def truncated_svd(
        self, a: MatrixHandle, k: int, tol: float | None = None
    ) -> SVDResult:
        """The k largest singular triplets of A."""
        extra = [] if tol is None else [float(tol)]
        u, s, v, converged = self.ctx.run(self.name, "truncated_svd", a, k, *extra)
        return SVDResult(u=u, s=s, v=v, converged=converged)

    def transpose(self, a: MatrixHandle) -> MatrixHandle:
        """A^T."""
        (at,) = self.ctx.run(self.name, "transpose", a)
        return at

    def condest(self, a: MatrixHandle) -> float:
        """2-norm condition number of A."""
        (kappa,) = self.ctx.run(self.name, "condest", a)
        return kappa

    def random_uniform(self, m: int, n: int, seed: int = 0) -> MatrixHandle:
        """An m x n matrix of uniform [0, 1) entries generated on the workers."""
        (a,) = self.ctx.run(self.name, "random_uniform", m, n, seed)
        return a


class CondEst:
    """Condition number estimator, as a one-routine wrapper.

    >>> CondEst.__call__.__doc__
    'Return the 2-norm condition number of A.'
    """

    def __init__(self, ctx: BridgeContext, name: str = MATHLIB_NAME) -> None:
        """Register the library with the session."""
        self._lib = MathLib(ctx, name)

    def __call__(self, a: MatrixHandle) -> float:
        """Return the 2-norm condition number of A."""
        return self._lib.condest(a)
