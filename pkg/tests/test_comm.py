"""Tests for the `comm` module."""

import time

import numpy as np
import pytest

from offload_bridge.comm import (
    Communicator,
    TrafficMonitor,
    WorkerGroup,
    run_collective,
)
from offload_bridge.errors import CollectiveError, GroupFailureError

TRANSPORTS = ["queue", "stream"]


@pytest.mark.parametrize("transport", TRANSPORTS)
def test_broadcast_and_gather(transport: str) -> None:
    """Broadcast copies the root's bytes; gather collects at the root in rank order."""

    def body(comm: Communicator) -> tuple[bytes, list[bytes] | None]:
        data = comm.broadcast(b"root says hi" if comm.rank == 2 else b"", root=2)
        return data, comm.gather(bytes([comm.rank]) * (comm.rank + 1), root=1)

    results = run_collective(1, [5, 6, 7], body, transport=transport)
    assert [data for data, _ in results] == [b"root says hi"] * 3
    assert [gathered for _, gathered in results] == [
        None,
        [b"\x00", b"\x01\x01", b"\x02\x02\x02"],
        None,
    ]


@pytest.mark.parametrize("transport", TRANSPORTS)
def test_allgather_and_alltoall(transport: str) -> None:
    """Every rank sees every contribution; alltoall transposes the chunks."""

    def body(comm: Communicator) -> tuple[list[bytes], list[bytes]]:
        gathered = comm.allgather(str(comm.rank).encode() * comm.rank)
        chunks = [f"{comm.rank}->{dst}".encode() for dst in range(comm.size)]
        return gathered, comm.alltoall(chunks)

    results = run_collective(2, [0, 1, 2, 3], body, transport=transport)
    for rank, (gathered, received) in enumerate(results):
        assert gathered == [b"", b"1", b"22", b"333"]
        assert received == [f"{src}->{rank}".encode() for src in range(4)]


@pytest.mark.parametrize("transport", TRANSPORTS)
def test_allreduce_is_identical_everywhere(transport: str) -> None:
    """All ranks get the same bits, the rank-ordered sum."""
    rng = np.random.default_rng(3)
    parts = rng.standard_normal((5, 100))

    results = run_collective(
        3, range(5), lambda comm: comm.allreduce_sum(parts[comm.rank]), transport
    )
    expected = parts[0].copy()
    for part in parts[1:]:
        expected += part
    for result in results:
        assert result.tobytes() == expected.tobytes()


def test_allreduce_length_mismatch() -> None:
    """Vectors of different length fail on every rank with a collective error."""
    with pytest.raises(CollectiveError):
        run_collective(
            4,
            [0, 1, 2],
            lambda comm: comm.allreduce_sum(np.ones(comm.rank + 1)),
            "queue",
        )


def test_barrier_waits_for_everyone() -> None:
    """No rank leaves the barrier before the slowest has entered it."""
    entered: dict[int, float] = {}

    def body(comm: Communicator) -> float:
        if comm.rank == 1:
            time.sleep(0.2)
        entered[comm.rank] = time.monotonic()
        comm.barrier()
        return time.monotonic()

    left = run_collective(5, [0, 1, 2], body, transport="stream")
    assert min(left) >= entered[1]


def test_single_member_group() -> None:
    """Collectives on a group of one are local."""

    def body(comm: Communicator) -> float:
        comm.barrier()
        assert comm.allgather(b"x") == [b"x"]
        return float(comm.allreduce_sum(np.array([2.0]))[0])

    assert run_collective(6, [3], body) == [2.0]


def test_failure_aborts_the_group() -> None:
    """A failing rank makes its peers leave their collective; its error is raised."""

    def body(comm: Communicator) -> bytes:
        if comm.rank == 2:
            raise ValueError("rank 2 exploded")
        return comm.broadcast(b"", root=2)

    with pytest.raises(ValueError, match="exploded"):
        run_collective(7, [0, 1, 2], body, transport="stream", timeout_s=30.0)


def test_collective_timeout() -> None:
    """A peer that never sends makes the receiver fail with a group failure."""

    def body(comm: Communicator) -> bytes | None:
        if comm.rank == 0:
            return comm.broadcast(b"", root=1)
        return None

    with pytest.raises(GroupFailureError):
        run_collective(8, [0, 1], body, transport="queue", timeout_s=0.2)


def test_traffic_stays_inside_groups() -> None:
    """Concurrent groups only exchange bytes among their own members."""
    monitor = TrafficMonitor()

    def body(comm: Communicator) -> list[bytes]:
        return comm.allgather(bytes(1000))

    run_collective(1, [0, 1, 2, 3], body, transport="stream", monitor=monitor)
    run_collective(2, [4, 5, 6], body, transport="queue", monitor=monitor)

    assert monitor.bytes_between([0, 1, 2, 3], [4, 5, 6]) == 0
    assert monitor.bytes_between([4, 5, 6], [0, 1, 2, 3]) == 0
    assert monitor.bytes_between([0, 1, 2, 3], [0, 1, 2, 3]) > 0
    assert all(
        (src < 4) == (dst < 4) for src, dst in monitor.snapshot()
    )


def test_worker_group_validation() -> None:
    """Groups need distinct members and a rank inside the group."""
    group = WorkerGroup(1, (4, 7, 9))
    assert group.at_rank(2).rank == 2 and group.size == 3
    with pytest.raises(ValueError):
        WorkerGroup(1, (4, 4))
    with pytest.raises(ValueError):
        WorkerGroup(1, (4, 7), rank=2)
