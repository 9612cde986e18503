"""Tests for the `worker` module."""

import socket
import time
from typing import Generator

import numpy as np
import pytest

from offload_bridge.constants import Command
from offload_bridge.errors import (
    HandleError,
    NotReadyError,
    RoutingError,
    SessionStateError,
)
from offload_bridge.protocol import (
    FetchRequest,
    RowBatch,
    decode_error,
    decode_row_batch,
    encode_fetch_request,
    encode_row_batch,
    encode_values,
    recv_frame,
    send_frame,
)
from offload_bridge.worker import Worker


@pytest.fixture
def worker() -> Generator[Worker, None, None]:
    """A started worker assigned to session 3."""
    worker = Worker(0)
    worker.start()
    worker.assign(3)
    yield worker
    worker.stop()


def _connect(worker: Worker, session_id: int) -> socket.socket:
    sock = socket.create_connection((worker.host, worker.port), timeout=10)
    send_frame(sock, Command.HANDSHAKE, session_id, encode_values(["pytest"]))
    return sock


def test_assign_is_exclusive(worker: Worker) -> None:
    """A worker serves one session at a time."""
    with pytest.raises(SessionStateError):
        worker.assign(4)
    worker.release(3)
    worker.assign(4)
    assert worker.session_id == 4


def test_ingest_until_complete(worker: Worker) -> None:
    """Batches fill the block; `wait_complete` reports what is still missing."""
    worker.allocate(3, 1, (0, 4), 2)
    rows = np.arange(8.0).reshape(4, 2)
    worker.ingest(3, encode_row_batch(RowBatch.from_array(1, 0, rows[:3])))
    missing, errors = worker.wait_complete(3, 1, time.monotonic() + 0.05)
    assert missing == [(3, 4)] and errors == []

    worker.ingest(3, encode_row_batch(RowBatch.from_array(1, 3, rows[3:])))
    missing, errors = worker.wait_complete(3, 1, time.monotonic() + 1)
    assert missing == [] and errors == []
    np.testing.assert_array_equal(worker.get_block(3, 1).data, rows)
    assert worker.stored_bytes == rows.nbytes


def test_ingest_errors_are_kept(worker: Worker) -> None:
    """A misrouted batch is recorded and ends the wait early."""
    worker.allocate(3, 1, (0, 4), 2)
    worker.ingest(3, encode_row_batch(RowBatch.from_array(1, 4, np.ones((1, 2)))))
    started = time.monotonic()
    missing, errors = worker.wait_complete(3, 1, started + 30)
    assert time.monotonic() - started < 5
    assert missing == [(0, 4)]
    assert [type(error) for error in errors] == [RoutingError]


def test_release_drops_the_session(worker: Worker) -> None:
    """Releasing frees the blocks of the session."""
    worker.allocate(3, 1, (0, 2), 2)
    worker.release(3)
    assert worker.session_id is None
    with pytest.raises(HandleError):
        worker.get_block(3, 1)


def test_data_connection_round_trip(worker: Worker) -> None:
    """Rows sent over a data connection can be fetched back in batches."""
    worker.allocate(3, 2, (0, 5), 3)
    rows = np.arange(15.0).reshape(5, 3)
    with _connect(worker, 3) as sock:
        assert recv_frame(sock).command == Command.HANDSHAKE_REPLY
        batch = RowBatch.from_array(2, 0, rows)
        send_frame(sock, Command.SEND_ROWS, 3, encode_row_batch(batch))
        worker.wait_complete(3, 2, time.monotonic() + 5)

        request = FetchRequest(2, 1, 4, 3)
        send_frame(sock, Command.FETCH_ROWS, 3, encode_fetch_request(request))
        replies = [decode_row_batch(recv_frame(sock).payload) for _ in range(2)]
        assert [(b.start_row, b.num_rows) for b in replies] == [(1, 3), (4, 1)]
        fetched = np.vstack([b.array() for b in replies])
        np.testing.assert_array_equal(fetched, rows[1:])

        send_frame(sock, Command.CLOSE, 3)
        assert recv_frame(sock).command == Command.CLOSE_REPLY


def test_fetch_incomplete_matrix(worker: Worker) -> None:
    """Fetching before the block is complete answers with NOT_READY."""
    worker.allocate(3, 1, (0, 2), 1)
    with _connect(worker, 3) as sock:
        recv_frame(sock)
        request = FetchRequest(1, 0, 2, 1)
        send_frame(sock, Command.FETCH_ROWS, 3, encode_fetch_request(request))
        reply = recv_frame(sock)
        assert reply.command == Command.ERROR
        assert decode_error(reply.payload)[0] == NotReadyError.code

def test_fetch_outside_the_block_sends_no_rows(worker: Worker) -> None:
    """A range running past the block is refused before any row is sent."""
    worker.allocate(3, 4, (0, 5), 2)
    rows = np.arange(10.0).reshape(5, 2)
    with _connect(worker, 3) as sock:
        recv_frame(sock)
        batch = RowBatch.from_array(4, 0, rows)
        send_frame(sock, Command.SEND_ROWS, 3, encode_row_batch(batch))
        worker.wait_complete(3, 4, time.monotonic() + 5)

        request = FetchRequest(4, 2, 5, 2)
        send_frame(sock, Command.FETCH_ROWS, 3, encode_fetch_request(request))
        reply = recv_frame(sock)
        assert reply.command == Command.ERROR
        assert decode_error(reply.payload)[0] == RoutingError.code

        request = FetchRequest(4, 3, 2, 2)
        send_frame(sock, Command.FETCH_ROWS, 3, encode_fetch_request(request))
        reply = recv_frame(sock)
        assert reply.command == Command.FETCH_ROWS_REPLY
        np.testing.assert_array_equal(decode_row_batch(reply.payload).array(), rows[3:])



def test_foreign_session_is_refused(worker: Worker) -> None:
    """Data connections of a session the worker does not serve are refused."""
    with _connect(worker, 8) as sock:
        reply = recv_frame(sock)
        assert reply.command == Command.ERROR
        assert decode_error(reply.payload)[0] == SessionStateError.code


def test_data_connection_needs_handshake(worker: Worker) -> None:
    """Anything before the HANDSHAKE is refused."""
    with socket.create_connection((worker.host, worker.port), timeout=10) as sock:
        send_frame(sock, Command.FETCH_ROWS, 3, b"")
        reply = recv_frame(sock)
        assert reply.command == Command.ERROR
