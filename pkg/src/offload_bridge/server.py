"""The bridge server: a driver coordinating a pool of workers.

The driver accepts client control connections, keeps one `Session` per connection,
hands out exclusive worker groups, binds sessions to library plugins and runs
routines collectively on the session's group. Bulk row traffic bypasses the driver
and goes straight to the workers' data endpoints.
"""

import itertools
import logging
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import TracebackType

from .comm import TrafficMonitor, WorkerGroup, run_collective
from .config import BridgeConfig
from .constants import (
    MATHLIB_NAME,
    PROTOCOL_VERSION,
    SERVER_NAME,
    Command,
    ErrorCode,
    ValueTag,
)
from .distmatrix import LayoutDescriptor
from .errors import (
    ArgumentError,
    BridgeError,
    CompletenessTimeoutError,
    HandleError,
    InsufficientWorkersError,
    NotReadyError,
    ProtocolError,
    RoutineError,
    SessionStateError,
    UnknownLibraryError,
    VersionError,
    error_from_code,
)
from .library import LibraryPlugin, PluginRegistry, RoutineContext
from .mathlib import build_plugin
from .protocol import (
    Frame,
    MatrixHandle,
    Value,
    decode_values,
    encode_error,
    encode_values,
    recv_frame,
    send_frame,
    values_of,
)
from .worker import Worker

logger = logging.getLogger(__name__)


class SessionState(Enum):
    """Life cycle of a session."""

    NEGOTIATING = "negotiating"
    ACTIVE = "active"
    CLOSED = "closed"


@dataclass
class Session:
    """One connected client application."""

    session_id: int
    client_name: str
    state: SessionState = SessionState.NEGOTIATING
    group: WorkerGroup | None = None
    workers: list[Worker] = field(default_factory=list)
    libraries: dict[str, LibraryPlugin] = field(default_factory=dict)
    handles: dict[int, tuple[MatrixHandle, LayoutDescriptor]] = field(
        default_factory=dict
    )
    _ids: itertools.count = field(default_factory=lambda: itertools.count(1))
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def next_matrix_id(self) -> int:
        """Allocate the next matrix id; ids are never reused within the session."""
        with self._lock:
            return next(self._ids)

    def require_group(self) -> WorkerGroup:
        """The session's worker group.

        Raises:
            SessionStateError: If no workers were requested yet, or the session is
                closed.
        """
        if self.state == SessionState.CLOSED:
            raise SessionStateError(f"Session {self.session_id} is closed")
        if self.group is None:
            raise SessionStateError(
                f"Session {self.session_id} has no workers; request workers first"
            )
        return self.group

    def lookup(self, handle: MatrixHandle) -> LayoutDescriptor:
        """The layout of one of the session's matrices.

        Raises:
            HandleError: If the id is unknown or the dimensions do not match.
        """
        entry = self.handles.get(handle.id)
        if entry is None or entry[0].shape != handle.shape:
            raise HandleError(
                f"Matrix {handle.id} ({handle.rows}x{handle.cols}) does not belong to "
                f"session {self.session_id}"
            )
        return entry[1]


class WorkerPool:
    """The workers of the server and who they are assigned to.

    Args:
        workers: Every worker, indexed by worker id.
    """

    def __init__(self, workers: list[Worker]) -> None:
        """Initialise the pool with every worker free."""
        self.workers = workers
        self.monitor = TrafficMonitor()
        self._lock = threading.Lock()
        self._group_ids = itertools.count(1)

    @property
    def size(self) -> int:
        """Number of workers."""
        return len(self.workers)

    @property
    def free_count(self) -> int:
        """Number of unassigned workers."""
        with self._lock:
            return sum(worker.session_id is None for worker in self.workers)

    def assignment(self) -> dict[int, int | None]:
        """Session id of every worker, None for free ones."""
        with self._lock:
            return {worker.worker_id: worker.session_id for worker in self.workers}

    def allocate(self, session_id: int, n: int) -> tuple[WorkerGroup, list[Worker]]:
        """Assign `n` free workers to a session, all or nothing.

        Raises:
            ArgumentError: If `n` is smaller than 1.
            InsufficientWorkersError: If fewer than `n` workers are free.
        """
        if n < 1:
            raise ArgumentError(f"Must request at least one worker, got {n}")
        with self._lock:
            free = [worker for worker in self.workers if worker.session_id is None]
            if len(free) < n:
                raise InsufficientWorkersError(
                    f"Requested {n} worker(s) but only {len(free)} of {self.size} "
                    "are free"
                )
            chosen = free[:n]
            for worker in chosen:
                worker.assign(session_id)
            group = WorkerGroup(
                next(self._group_ids), tuple(worker.worker_id for worker in chosen)
            )
        return group, chosen

    def release(self, session_id: int) -> None:
        """Free every worker (and matrix) of a session."""
        with self._lock:
            for worker in self.workers:
                if worker.session_id == session_id:
                    worker.release(session_id)


class Driver:
    """Session management and command dispatch.

    Args:
        config: The server configuration.
        pool: The worker pool.
        registry: The available libraries.
    """

    def __init__(
        self, config: BridgeConfig, pool: WorkerPool, registry: PluginRegistry
    ) -> None:
        """Initialise the driver."""
        self.config = config
        self.pool = pool
        self.registry = registry
        self.sessions: dict[int, Session] = {}
        self._session_ids = itertools.count(1)
        self._lock = threading.Lock()

    def handshake(self, values: list[Value]) -> tuple[Session, list[Value]]:
        """Open a session for a client hello ``[i32 version, string client]``.

        Raises:
            VersionError: If the client speaks another protocol version.
        """
        version, client_name = values_of(values, ValueTag.I32, ValueTag.STRING)
        if version != PROTOCOL_VERSION:
            raise VersionError(
                f"Client {client_name!r} speaks protocol version {version}, "
                f"server speaks {PROTOCOL_VERSION}"
            )
        with self._lock:
            session = Session(next(self._session_ids), client_name)
            self.sessions[session.session_id] = session
        logger.info(f"Opened session {session.session_id} for {client_name!r}")
        reply = [
            Value.i64(session.session_id),
            Value.string(SERVER_NAME),
            Value.i32(self.pool.size),
        ]
        return session, reply

    def dispatch(self, session: Session, frame: Frame) -> list[Value]:
        """Execute one control command of a session and return the reply values."""
        if session.state == SessionState.CLOSED:
            raise SessionStateError(f"Session {session.session_id} is closed")
        values = decode_values(frame.payload)
        match frame.command:
            case Command.REQUEST_WORKERS:
                (n,) = values_of(values, ValueTag.I32)
                return self.allocate_workers(session, n)
            case Command.REGISTER_LIBRARY:
                name, locator = values_of(values, ValueTag.STRING, ValueTag.STRING)
                self.register_library(session, name, locator)
                return []
            case Command.CREATE_MATRIX:
                m, n = values_of(values, ValueTag.I64, ValueTag.I64)
                return self.create_matrix(session, m, n)
            case Command.AWAIT_MATRIX:
                handle, timeout_s = values_of(values, ValueTag.MATRIX, ValueTag.F64)
                self.await_matrix(session, handle, timeout_s)
                return []
            case Command.RUN:
                if len(values) < 2:
                    raise ProtocolError("RUN needs a library and a routine name")
                library, routine = values_of(
                    values[:2], ValueTag.STRING, ValueTag.STRING
                )
                return self.run(session, library, routine, values[2:])
            case Command.CLOSE:
                self.close_session(session)
                return []
        raise SessionStateError(f"{frame.command.name} is not a control command")

    def allocate_workers(self, session: Session, n: int) -> list[Value]:
        """Give the session an exclusive group of `n` workers.

        Returns:
            ``[i32 group_id, string endpoint x n]``.

        Raises:
            SessionStateError: If the session already has workers.
        """
        if session.group is not None:
            raise SessionStateError(
                f"Session {session.session_id} already has {session.group.size} "
                "worker(s)"
            )
        group, workers = self.pool.allocate(session.session_id, n)
        session.group, session.workers = group, workers
        session.state = SessionState.ACTIVE
        logger.info(
            f"Session {session.session_id} got workers {list(group.members)} as group "
            f"{group.group_id}, {self.pool.free_count} of {self.pool.size} left free"
        )
        return [Value.i32(group.group_id)] + [
            Value.string(worker.endpoint) for worker in workers
        ]

    def register_library(self, session: Session, name: str, locator: str) -> None:
        """Bind a plugin to the session; registering twice is a no-op."""
        if name in session.libraries:
            logger.debug(f"Session {session.session_id} re-registered {name!r}")
            return
        session.libraries[name] = self.registry.resolve(name, locator)
        logger.info(f"Session {session.session_id} registered library {name!r}")

    def create_matrix(self, session: Session, m: int, n: int) -> list[Value]:
        """Allocate a new empty matrix on the session's group.

        Returns:
            ``[handle, f64-array boundaries, string endpoint x p]``.
        """
        group = session.require_group()
        if m < 1 or n < 1:
            raise ArgumentError(f"Matrix dimensions must be positive, got {m}x{n}")
        layout = LayoutDescriptor.block_rows(m, n, group.size, group.group_id)
        handle = MatrixHandle(session.next_matrix_id(), m, n, session.session_id)
        for rank, worker in enumerate(session.workers):
            worker.allocate(session.session_id, handle.id, layout.row_range(rank), n)
        session.handles[handle.id] = (handle, layout)
        logger.info(
            f"Session {session.session_id} created matrix {handle.id} ({m}x{n}) with "
            f"boundaries {list(layout.boundaries)}"
        )
        return [
            Value.matrix(handle),
            Value.f64_array(layout.boundaries),
            *(Value.string(worker.endpoint) for worker in session.workers),
        ]

    def await_matrix(
        self, session: Session, handle: MatrixHandle, timeout_s: float
    ) -> None:
        """Wait until every owner's block of a matrix is complete.

        Raises:
            CompletenessTimeoutError: Naming the missing row ranges.
            RoutingError: If rows were sent to a worker that does not own them.
            ArgumentError: If rows of the wrong length were sent.
        """
        session.require_group()
        session.lookup(handle)
        deadline = time.monotonic() + max(0.0, timeout_s)
        missing: list[tuple[int, int]] = []
        for worker in session.workers:
            worker_missing, errors = worker.wait_complete(
                session.session_id, handle.id, deadline
            )
            if errors:
                first = errors[0]
                raise error_from_code(first.code, str(first))
            missing.extend(worker_missing)
        if missing:
            ranges = ", ".join(f"[{start}, {stop})" for start, stop in missing)
            raise CompletenessTimeoutError(
                f"Matrix {handle.id} still incomplete after {timeout_s:g} s, missing "
                f"rows {ranges}"
            )

    def run(
        self, session: Session, library: str, routine_name: str, args: list[Value]
    ) -> list[Value]:
        """Run a routine collectively on the session's group.

        Raises:
            UnknownLibraryError: If the session did not register the library.
            UnknownRoutineError: If the library has no such routine.
            HandleError: If an argument is not a matrix of this session.
            NotReadyError: If an argument matrix is incomplete.
            RoutineError: If the routine fails with a non-bridge error.
        """
        group = session.require_group()
        plugin = session.libraries.get(library)
        if plugin is None:
            raise UnknownLibraryError(
                f"Library {library!r} is not registered in session {session.session_id}"
            )
        routine = plugin.routine(routine_name)
        for value in args:
            if value.tag == ValueTag.MATRIX:
                self._check_ready(session, value.data)

        context = RoutineContext(
            session_id=session.session_id,
            members=list(session.workers),
            group_id=group.group_id,
            handles=dict(session.handles),
            next_id=session.next_matrix_id,
        )
        logger.info(
            f"Session {session.session_id} running {library}.{routine_name} on group "
            f"{group.group_id}"
        )
        start = time.perf_counter()
        try:
            results = run_collective(
                group.group_id,
                group.members,
                lambda comm: routine(list(args), context.accessor(comm.rank), comm),
                transport=self.config.comm.transport,
                timeout_s=self.config.comm.timeout_s,
                monitor=self.pool.monitor,
            )
        except BaseException as exc:
            for handle, _ in context.outputs:
                for worker in session.workers:
                    worker.drop_block(session.session_id, handle.id)
            if isinstance(exc, BridgeError) or not isinstance(exc, Exception):
                raise
            raise RoutineError(
                f"{library}.{routine_name} failed: {type(exc).__name__}: {exc}"
            ) from exc
        finally:
            context.closed = True

        for handle, layout in context.outputs:
            session.handles[handle.id] = (handle, layout)
        logger.info(
            f"Session {session.session_id} finished {library}.{routine_name} in "
            f"{time.perf_counter() - start:.3f} s"
        )
        return results[0]

    def _check_ready(self, session: Session, handle: MatrixHandle) -> None:
        session.lookup(handle)
        for worker in session.workers:
            block = worker.get_block(session.session_id, handle.id)
            if not block.is_complete:
                raise NotReadyError(
                    f"Matrix {handle.id} is incomplete, missing rows "
                    f"{block.missing_ranges()}"
                )

    def close_session(self, session: Session) -> None:
        """Free the session's matrices and workers; closing twice is a no-op."""
        if session.state == SessionState.CLOSED:
            return
        session.state = SessionState.CLOSED
        self.pool.release(session.session_id)
        session.handles.clear()
        with self._lock:
            self.sessions.pop(session.session_id, None)
        logger.info(
            f"Closed session {session.session_id}, {self.pool.free_count} of "
            f"{self.pool.size} workers free"
        )

    def close_all(self) -> None:
        """Close every open session."""
        with self._lock:
            sessions = list(self.sessions.values())
        for session in sessions:
            self.close_session(session)


class _ControlServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], driver: Driver) -> None:
        self.driver = driver
        super().__init__(address, _ControlHandler)


class _ControlHandler(socketserver.BaseRequestHandler):
    """Serves one client control connection, which is one session."""

    server: _ControlServer

    def handle(self) -> None:
        driver = self.server.driver
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        session: Session | None = None
        try:
            hello = recv_frame(sock)
            if hello is None:
                return
            if hello.command != Command.HANDSHAKE:
                raise SessionStateError("The first command must be HANDSHAKE")
            session, reply = driver.handshake(decode_values(hello.payload))
            send_frame(
                sock, Command.HANDSHAKE_REPLY, session.session_id, encode_values(reply)
            )
            self._serve(driver, sock, session)
        except BridgeError as exc:
            logger.warning(f"Rejected control connection: {exc}")
            _send_error(sock, 0, exc.code, str(exc))
        except OSError as exc:
            logger.debug(f"Control connection ended: {exc}")
        finally:
            if session is not None:
                driver.close_session(session)

    def _serve(self, driver: Driver, sock: socket.socket, session: Session) -> None:
        while True:
            frame = recv_frame(sock)
            if frame is None:
                return
            try:
                if frame.session_id != session.session_id:
                    raise SessionStateError(
                        f"Frame for session {frame.session_id} on the connection of "
                        f"session {session.session_id}"
                    )
                reply = driver.dispatch(session, frame)
            except BridgeError as exc:
                logger.warning(
                    f"Session {session.session_id} {frame.command.name} failed: {exc}"
                )
                _send_error(sock, session.session_id, exc.code, str(exc))
                continue
            except Exception as exc:
                logger.exception(
                    f"Session {session.session_id} {frame.command.name} crashed"
                )
                _send_error(
                    sock,
                    session.session_id,
                    ErrorCode.INTERNAL,
                    f"Internal error: {exc}",
                )
                continue
            send_frame(
                sock, frame.command.reply, session.session_id, encode_values(reply)
            )
            if frame.command == Command.CLOSE:
                return


def _send_error(sock: socket.socket, session_id: int, code: int, message: str) -> None:
    try:
        send_frame(sock, Command.ERROR, session_id, encode_error(code, message))
    except OSError:
        pass


def default_registry(config: BridgeConfig) -> PluginRegistry:
    """The built-in library plus the plugins listed in the configuration."""
    registry = PluginRegistry()
    registry.register(build_plugin(config.mathlib), locator=f"builtin:{MATHLIB_NAME}")
    for path in config.server.plugins:
        registry.load(path)
    return registry


class BridgeServer:
    """Driver and worker pool running in one process.

    Workers are threads with their own data endpoints; collectives between them run
    over the configured transport.

    Args:
        config: The configuration.
        registry: The available libraries; defaults to `default_registry`.

    Example:
        >>> from offload_bridge.config import load_config
        >>> with BridgeServer(load_config(overrides=["server.num_workers=2"])) as s:
        ...     s.pool.free_count
        2
    """

    def __init__(
        self, config: BridgeConfig, registry: PluginRegistry | None = None
    ) -> None:
        """Initialise the server; call `start` to listen."""
        self.config = config
        server = config.server
        self.workers = [
            Worker(
                worker_id=i,
                host=server.host,
                port=server.worker_port_base + i if server.worker_port_base else 0,
            )
            for i in range(server.num_workers)
        ]
        self.pool = WorkerPool(self.workers)
        self.registry = registry if registry is not None else default_registry(config)
        self.driver = Driver(config, self.pool, self.registry)
        self._control: _ControlServer | None = None
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        """The driver endpoint."""
        if self._control is None:
            raise SessionStateError("Server is not running")
        host, port = self._control.server_address[:2]
        return str(host), int(port)

    @property
    def endpoint(self) -> str:
        """The driver endpoint as ``host:port``."""
        host, port = self.address
        return f"{host}:{port}"

    def start(self) -> "BridgeServer":
        """Start the workers and the driver, and write the info file if configured."""
        for worker in self.workers:
            worker.start()
        self._control = _ControlServer(
            (self.config.server.host, self.config.server.port), self.driver
        )
        self._thread = threading.Thread(
            target=self._control.serve_forever, name="driver-control", daemon=True
        )
        self._thread.start()
        if self.config.server.info_file:
            self.write_info_file(Path(self.config.server.info_file))
        logger.info(
            f"Server listening on {self.endpoint} with {len(self.workers)} worker(s)"
        )
        return self

    def write_info_file(self, path: Path) -> None:
        """Write hostname, address and port, one per line."""
        host, port = self.address
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(f"{socket.gethostname()}\n{host}\n{port}\n")
        logger.info(f"Wrote server info to {path}")

    def stop(self) -> None:
        """Close every session and shut down the driver and the workers."""
        if self._control is not None:
            self._control.shutdown()
            self._control.server_close()
            self._control = None
        self.driver.close_all()
        for worker in self.workers:
            worker.stop()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None
        logger.info("Server stopped")

    def __enter__(self) -> "BridgeServer":
        """Start the server."""
        return self.start()

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        traceback: TracebackType | None,
    ) -> None:
        """Stop the server."""
        self.stop()

