"""A worker: the block store of its share of every matrix and its data endpoint.

Client processes connect to the data endpoint of every worker in their group and
stream rows in (SEND_ROWS) and out (FETCH_ROWS) without going through the driver.
"""

import logging
import socket
import socketserver
import threading
import time

from .constants import Command, ValueTag
from .distmatrix import LocalBlock, read_rows, write_rows
from .errors import (
    BridgeError,
    HandleError,
    NotReadyError,
    RoutingError,
    SessionStateError,
)
from .protocol import (
    decode_fetch_request,
    decode_row_batch,
    decode_values,
    encode_error,
    encode_row_batch,
    encode_values,
    recv_frame,
    send_frame,
    values_of,
)

logger = logging.getLogger(__name__)


class Worker:
    """One worker of the pool.

    Args:
        worker_id: Index of the worker in the pool.
        host: Interface the data endpoint binds to.
        port: Port of the data endpoint, 0 for an ephemeral one.
    """

    def __init__(self, worker_id: int, host: str = "127.0.0.1", port: int = 0) -> None:
        """Initialise the worker; call `start` to open the data endpoint."""
        self.worker_id = worker_id
        self.host = host
        self.port = port
        self.session_id: int | None = None
        self._blocks: dict[tuple[int, int], LocalBlock] = {}
        self._errors: dict[tuple[int, int], list[BridgeError]] = {}
        self._connections: dict[int, set[socket.socket]] = {}
        self._cond = threading.Condition()
        self._server: "_DataServer | None" = None
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> str:
        """The data endpoint as ``host:port``."""
        return f"{self.host}:{self.port}"

    def start(self) -> None:
        """Open the data endpoint and serve it on a background thread."""
        self._server = _DataServer((self.host, self.port), _DataHandler, worker=self)
        self.port = self._server.server_address[1]
        self._thread = threading.Thread(
            target=self._server.serve_forever,
            name=f"worker-{self.worker_id}-data",
            daemon=True,
        )
        self._thread.start()
        logger.debug(f"Worker {self.worker_id} serving data on {self.endpoint}")

    def stop(self) -> None:
        """Close the data endpoint and every open data connection."""
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None
        for session_id in list(self._connections):
            self._close_connections(session_id)
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None

    def assign(self, session_id: int) -> None:
        """Reserve the worker for a session."""
        with self._cond:
            if self.session_id is not None:
                raise SessionStateError(
                    f"Worker {self.worker_id} already serves session {self.session_id}"
                )
            self.session_id = session_id

    def release(self, session_id: int) -> None:
        """Free every block of the session and return the worker to the pool."""
        with self._cond:
            for key in [key for key in self._blocks if key[0] == session_id]:
                del self._blocks[key]
            for key in [key for key in self._errors if key[0] == session_id]:
                del self._errors[key]
            if self.session_id == session_id:
                self.session_id = None
            self._cond.notify_all()
        self._close_connections(session_id)

    def allocate(
        self, session_id: int, matrix_id: int, row_range: tuple[int, int], n: int
    ) -> None:
        """Create the empty block of a new matrix."""
        self.put_block(session_id, matrix_id, LocalBlock.allocate(row_range, n))

    def put_block(self, session_id: int, matrix_id: int, block: LocalBlock) -> None:
        """Store a block."""
        with self._cond:
            self._blocks[(session_id, matrix_id)] = block

    def get_block(self, session_id: int, matrix_id: int) -> LocalBlock:
        """Return a stored block.

        Raises:
            HandleError: If the worker holds no block of that matrix.
        """
        with self._cond:
            block = self._blocks.get((session_id, matrix_id))
        if block is None:
            raise HandleError(
                f"Worker {self.worker_id} holds no block of matrix {matrix_id}"
            )
        return block

    def drop_block(self, session_id: int, matrix_id: int) -> None:
        """Forget a block, if it exists."""
        with self._cond:
            self._blocks.pop((session_id, matrix_id), None)

    @property
    def stored_bytes(self) -> int:
        """Bytes of matrix data currently held."""
        with self._cond:
            return sum(block.nbytes for block in self._blocks.values())

    def ingest(self, session_id: int, payload: bytes) -> None:
        """Store one SEND_ROWS batch; failures are kept for `wait_complete`."""
        matrix_id = -1
        try:
            batch = decode_row_batch(payload)
            matrix_id = batch.matrix_id
            write_rows(self.get_block(session_id, matrix_id), batch)
            logger.debug(
                f"Worker {self.worker_id} stored rows [{batch.start_row}, "
                f"{batch.stop_row}) of matrix {matrix_id}"
            )
        except BridgeError as exc:
            logger.warning(f"Worker {self.worker_id} rejected a row batch: {exc}")
            with self._cond:
                self._errors.setdefault((session_id, matrix_id), []).append(exc)
        with self._cond:
            self._cond.notify_all()

    def wait_complete(
        self, session_id: int, matrix_id: int, deadline: float
    ) -> tuple[list[tuple[int, int]], list[BridgeError]]:
        """Block until this worker's share of a matrix is complete.

        Args:
            session_id: The session.
            matrix_id: The matrix.
            deadline: `time.monotonic()` value after which to give up.

        Returns:
            The missing global row ranges (empty when complete) and the recorded
            ingest errors for the matrix, including ones that could not be tied to a
            matrix.
        """
        block = self.get_block(session_id, matrix_id)

        def settled() -> bool:
            return block.is_complete or bool(self._errors_of(session_id, matrix_id))

        with self._cond:
            self._cond.wait_for(settled, timeout=max(0.0, deadline - time.monotonic()))
            return block.missing_ranges(), self._errors_of(session_id, matrix_id)

    def _errors_of(self, session_id: int, matrix_id: int) -> list[BridgeError]:
        return self._errors.get((session_id, matrix_id), []) + self._errors.get(
            (session_id, -1), []
        )

    def fetch(self, session_id: int, payload: bytes, sock: socket.socket) -> int:
        """Answer a FETCH_ROWS request with one reply frame per row batch.

        Returns:
            Number of bytes sent.
        """
        request = decode_fetch_request(payload)
        block = self.get_block(session_id, request.matrix_id)
        if not block.is_complete:
            raise NotReadyError(
                f"Matrix {request.matrix_id} is incomplete on worker {self.worker_id}"
            )
        stop = request.start_row + request.num_rows
        owned_start, owned_stop = block.row_range
        if request.start_row < owned_start or stop > owned_stop:
            raise RoutingError(
                f"Rows [{request.start_row}, {stop}) of matrix {request.matrix_id} are "
                f"not all on worker {self.worker_id}, which owns "
                f"[{owned_start}, {owned_stop})"
            )
        sent = 0
        for start in range(request.start_row, stop, request.rows_per_batch):
            count = min(request.rows_per_batch, stop - start)
            batch = read_rows(block, request.matrix_id, start, count)
            sent += send_frame(
                sock, Command.FETCH_ROWS_REPLY, session_id, encode_row_batch(batch)
            )
        logger.debug(
            f"Worker {self.worker_id} sent rows [{request.start_row}, {stop}) of "
            f"matrix {request.matrix_id} in {request.num_batches} batch(es)"
        )
        return sent

    def _track(self, session_id: int, sock: socket.socket) -> None:
        with self._cond:
            if self.session_id != session_id:
                raise SessionStateError(
                    f"Worker {self.worker_id} is not assigned to session {session_id}"
                )
            self._connections.setdefault(session_id, set()).add(sock)

    def _untrack(self, session_id: int, sock: socket.socket) -> None:
        with self._cond:
            self._connections.get(session_id, set()).discard(sock)

    def _close_connections(self, session_id: int) -> None:
        with self._cond:
            sockets = self._connections.pop(session_id, set())
        for sock in sockets:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass


class _DataServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], handler: type, worker: Worker) -> None:
        self.worker = worker
        super().__init__(address, handler)


class _DataHandler(socketserver.BaseRequestHandler):
    """Serves one data connection: HANDSHAKE, then SEND_ROWS/FETCH_ROWS until CLOSE."""

    server: _DataServer

    def handle(self) -> None:
        worker = self.server.worker
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            hello = recv_frame(sock)
            if hello is None:
                return
            if hello.command != Command.HANDSHAKE:
                raise SessionStateError("Data connections must start with HANDSHAKE")
            (client_name,) = values_of(decode_values(hello.payload), ValueTag.STRING)
            session_id = hello.session_id
            worker._track(session_id, sock)
        except BridgeError as exc:
            logger.warning(
                f"Worker {worker.worker_id} refused a data connection: {exc}"
            )
            send_frame(sock, Command.ERROR, 0, encode_error(exc.code, str(exc)))
            return

        logger.debug(
            f"Worker {worker.worker_id} accepted data connection from {client_name!r}"
        )
        try:
            send_frame(sock, Command.HANDSHAKE_REPLY, session_id, encode_values([]))
            self._serve(worker, sock, session_id)
        except OSError as exc:
            logger.debug(f"Data connection to worker {worker.worker_id} ended: {exc}")
        finally:
            worker._untrack(session_id, sock)

    def _serve(self, worker: Worker, sock: socket.socket, session_id: int) -> None:
        while True:
            try:
                frame = recv_frame(sock)
            except BridgeError as exc:
                logger.warning(
                    f"Worker {worker.worker_id} dropped a data connection: {exc}"
                )
                return
            if frame is None:
                return
            match frame.command:
                case Command.SEND_ROWS:
                    worker.ingest(session_id, frame.payload)
                case Command.FETCH_ROWS:
                    try:
                        worker.fetch(session_id, frame.payload, sock)
                    except BridgeError as exc:
                        send_frame(
                            sock,
                            Command.ERROR,
                            session_id,
                            encode_error(exc.code, str(exc)),
                        )
                case Command.CLOSE:
                    send_frame(sock, Command.CLOSE_REPLY, session_id, encode_values([]))
                    return
                case _:
                    exc = SessionStateError(
                        f"{frame.command.name} is not a data connection command"
                    )
                    payload = encode_error(exc.code, str(exc))
                    send_frame(sock, Command.ERROR, session_id, payload)
