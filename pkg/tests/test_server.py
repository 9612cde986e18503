"""Tests for the `server` module."""

import socket
import threading
import time
from pathlib import Path
from typing import Callable

import numpy as np
import pytest

from offload_bridge.client import BridgeContext, LocalRowPartition, MathLib
from offload_bridge.config import load_config, read_info_file
from offload_bridge.constants import PROTOCOL_VERSION, Command
from offload_bridge.errors import (
    CompletenessTimeoutError,
    InsufficientWorkersError,
    RoutingError,
    SessionStateError,
    VersionError,
)
from offload_bridge.protocol import (
    RowBatch,
    decode_error,
    decode_values,
    encode_row_batch,
    encode_values,
    recv_frame,
    send_frame,
)
from offload_bridge.server import BridgeServer, WorkerPool
from offload_bridge.worker import Worker


def _wait_for(condition: Callable[[], bool], timeout: float = 5.0) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if condition():
            return True
        time.sleep(0.01)
    return condition()


def test_pool_allocation_is_all_or_nothing() -> None:
    """Allocations take distinct free workers or nothing at all."""
    pool = WorkerPool([Worker(i) for i in range(9)])
    first, _ = pool.allocate(1, 4)
    second, _ = pool.allocate(2, 3)
    assert set(first.members).isdisjoint(second.members)
    assert first.group_id != second.group_id
    with pytest.raises(InsufficientWorkersError):
        pool.allocate(3, 5)
    assert pool.free_count == 2
    pool.release(1)
    assert pool.free_count == 6
    assert set(pool.assignment().values()) == {None, 2}


def test_isolated_sessions(make_server: Callable[..., BridgeServer]) -> None:
    """Two sessions share a pool of nine without seeing each other's traffic."""
    server = make_server(9)
    rng = np.random.default_rng(0)
    inputs = [
        (rng.standard_normal((40, 30)), rng.standard_normal((30, 20))) for _ in range(2)
    ]

    with (
        BridgeContext.connect(server.endpoint, client_name="first") as one,
        BridgeContext.connect(server.endpoint, client_name="second") as two,
    ):
        assert one.request_workers(4) == 4
        assert two.request_workers(3) == 3
        with BridgeContext.connect(server.endpoint, client_name="third") as three:
            with pytest.raises(InsufficientWorkersError):
                three.request_workers(5)
        assert server.pool.free_count == 2

        results: dict[int, np.ndarray] = {}

        def multiply(index: int, ctx: BridgeContext) -> None:
            lib = MathLib(ctx)
            a, b = inputs[index]
            c = lib.gemm(ctx.send_matrix(a), ctx.send_matrix(b))
            results[index] = ctx.fetch_matrix(c).to_dense()

        threads = [
            threading.Thread(target=multiply, args=(index, ctx))
            for index, ctx in enumerate((one, two))
        ]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()

        members = {
            session.session_id: list(session.group.members)
            for session in server.driver.sessions.values()
            if session.group is not None
        }
        first, second = members[one.session_id], members[two.session_id]
        monitor = server.pool.monitor
        assert monitor.bytes_between(first, second) == 0
        assert monitor.bytes_between(second, first) == 0
        assert monitor.bytes_between(first, first) > 0

    for index, (a, b) in enumerate(inputs):
        with BridgeContext.connect(server.endpoint) as alone:
            alone.request_workers(1)
            lib = MathLib(alone)
            c = lib.gemm(alone.send_matrix(a), alone.send_matrix(b))
            fetched = alone.fetch_matrix(c).to_dense()
            np.testing.assert_array_equal(fetched, results[index])
    assert _wait_for(lambda: server.pool.free_count == 9)


def test_version_mismatch(server: BridgeServer) -> None:
    """A client speaking another version gets a VERSION error."""
    with socket.create_connection(server.address, timeout=10) as sock:
        hello = encode_values([PROTOCOL_VERSION + 1, "old-client"])
        send_frame(sock, Command.HANDSHAKE, 0, hello)
        reply = recv_frame(sock)
    assert reply.command == Command.ERROR
    assert decode_error(reply.payload)[0] == VersionError.code


def test_commands_before_handshake(server: BridgeServer) -> None:
    """The first control frame must be a HANDSHAKE."""
    with socket.create_connection(server.address, timeout=10) as sock:
        send_frame(sock, Command.REQUEST_WORKERS, 0, encode_values([1]))
        reply = recv_frame(sock)
    assert decode_error(reply.payload)[0] == SessionStateError.code


def test_handshake_reply(server: BridgeServer) -> None:
    """The reply carries the session id, the server name and the pool size."""
    with socket.create_connection(server.address, timeout=10) as sock:
        send_frame(sock, Command.HANDSHAKE, 0, encode_values([PROTOCOL_VERSION, "raw"]))
        reply = recv_frame(sock)
        session_id, name, pool_size = [v.data for v in decode_values(reply.payload)]
        assert reply.command == Command.HANDSHAKE_REPLY
        assert session_id >= 1 and name == "offload_bridge" and pool_size == 4

        send_frame(sock, Command.REQUEST_WORKERS, session_id + 1, encode_values([1]))
        reply = recv_frame(sock)
        assert decode_error(reply.payload)[0] == SessionStateError.code


def test_disconnect_closes_the_session(server: BridgeServer) -> None:
    """Dropping the control connection frees the session's workers."""
    sock = socket.create_connection(server.address, timeout=10)
    send_frame(sock, Command.HANDSHAKE, 0, encode_values([PROTOCOL_VERSION, "raw"]))
    session_id = decode_values(recv_frame(sock).payload)[0].data
    send_frame(sock, Command.REQUEST_WORKERS, session_id, encode_values([3]))
    assert recv_frame(sock).command == Command.REQUEST_WORKERS_REPLY
    assert server.pool.free_count == 1
    sock.close()
    assert _wait_for(lambda: server.pool.free_count == 4)
    assert session_id not in server.driver.sessions


def test_state_errors(ctx: BridgeContext, server: BridgeServer) -> None:
    """Workers are granted once and matrices need workers."""
    with pytest.raises(SessionStateError):
        ctx.request_workers(1)
    with BridgeContext.connect(server.endpoint) as fresh:
        with pytest.raises(SessionStateError):
            fresh.create_matrix(2, 2)


def test_completeness_timeout_names_missing_rows(ctx: BridgeContext) -> None:
    """A matrix missing row 7 times out with that row in the message."""
    handle = ctx.create_matrix(10, 2)
    indices = [i for i in range(10) if i != 7]
    ctx.send_rows(handle, LocalRowPartition(indices, np.ones((9, 2))))
    with pytest.raises(CompletenessTimeoutError, match=r"\[7, 8\)"):
        ctx.await_matrix(handle, timeout_s=0.3)


def test_misrouted_rows_surface_on_await(ctx: BridgeContext) -> None:
    """Rows sent to a worker that does not own them fail the await."""
    handle = ctx.create_matrix(10, 2)
    batch = RowBatch.from_array(handle.id, 8, np.ones((2, 2)))
    channel = ctx.data.channels[0]
    channel.send(Command.SEND_ROWS, ctx.session_id, encode_row_batch(batch))
    with pytest.raises(RoutingError):
        ctx.await_matrix(handle, timeout_s=10)


def test_info_file(make_server: Callable[..., BridgeServer], tmp_path: Path) -> None:
    """The info file holds hostname, address and port; clients can connect with it."""
    info = tmp_path / "bridge.info"
    server = make_server(2, f"server.info_file={info}")
    assert read_info_file(info) == server.address
    with BridgeContext.connect(info) as ctx:
        assert ctx.pool_size == 2


def test_context_manager_frees_everything() -> None:
    """Leaving the server context stops the driver and the workers."""
    with BridgeServer(load_config(overrides=["server.num_workers=2"])) as server:
        address = server.address
        ctx = BridgeContext.connect(server.endpoint)
        ctx.request_workers(2)
    with pytest.raises(OSError):
        socket.create_connection(address, timeout=1).close()
    ctx.stop()
