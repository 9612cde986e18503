"""Collectives over a worker group.

A `WorkerGroup` is the set of workers allocated to one session. Its members exchange
frames over a `Transport` (point-to-point FIFO channels) and a `Communicator` builds
the collectives on top: broadcast, gather, allgather, alltoall, allreduce-sum and
barrier. The algorithms are the simple rank-ordered ones (root relay, gather then
broadcast), so every rank sees bit-identical reduction results.
"""

import logging
import queue
import socket
import struct
import threading
from abc import ABC, abstractmethod
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar

import numpy as np

from .constants import FRAME_HEADER_SIZE, Command
from .errors import BridgeError, CollectiveError, GroupFailureError, ProtocolError
from .protocol import U32, FrameDecoder, encode_frame

logger = logging.getLogger(__name__)

T = TypeVar("T")

_ABORT = object()


@dataclass(frozen=True)
class WorkerGroup:
    """One member's view of a worker group.

    Args:
        group_id: Identifier of the group, unique within the server.
        members: Worker ids of the members, in rank order.
        rank: Index of this member in `members`.
    """

    group_id: int
    members: tuple[int, ...]
    rank: int = 0

    def __post_init__(self) -> None:
        """Check the rank and the member list."""
        if not self.members:
            raise ValueError("A worker group needs at least one member")
        if len(set(self.members)) != len(self.members):
            raise ValueError(f"Duplicate members in group {self.group_id}")
        if not 0 <= self.rank < len(self.members):
            raise ValueError(
                f"Rank {self.rank} out of range for a group of {len(self.members)}"
            )

    @property
    def size(self) -> int:
        """Number of members."""
        return len(self.members)

    def at_rank(self, rank: int) -> "WorkerGroup":
        """The same group seen from another member."""
        return WorkerGroup(self.group_id, self.members, rank)


class TrafficMonitor:
    """Counts the bytes delivered between pairs of workers."""

    def __init__(self) -> None:
        """Initialise empty counters."""
        self._lock = threading.Lock()
        self._bytes: Counter[tuple[int, int]] = Counter()

    def record(self, src_worker: int, dst_worker: int, num_bytes: int) -> None:
        """Record a delivered frame."""
        with self._lock:
            self._bytes[(src_worker, dst_worker)] += num_bytes

    def bytes_between(self, sources: Sequence[int], destinations: Sequence[int]) -> int:
        """Total bytes sent from any of `sources` to any of `destinations`."""
        with self._lock:
            return sum(
                count
                for (src, dst), count in self._bytes.items()
                if src in sources and dst in destinations
            )

    def snapshot(self) -> dict[tuple[int, int], int]:
        """A copy of the per-pair byte counts."""
        with self._lock:
            return dict(self._bytes)


class Transport(ABC):
    """Point-to-point FIFO channels between the ranks of one group.

    Args:
        group: The group, any rank.
        monitor: Optional byte counter.
    """

    def __init__(self, group: WorkerGroup, monitor: TrafficMonitor | None) -> None:
        """Initialise the transport."""
        self.group = group
        self.monitor = monitor
        self._inboxes: dict[tuple[int, int], queue.Queue] = {
            (dst, src): queue.Queue()
            for dst in range(group.size)
            for src in range(group.size)
        }
        self._abort_reason: str | None = None

    @abstractmethod
    def send(self, src: int, dst: int, command: Command, payload: bytes) -> None:
        """Send a frame from rank `src` to rank `dst` without waiting for it."""

    def recv(self, dst: int, src: int, timeout: float) -> tuple[Command, bytes]:
        """Receive the next frame rank `src` sent to rank `dst`.

        Raises:
            GroupFailureError: On timeout or after `abort`.
        """
        try:
            item = self._inboxes[(dst, src)].get(timeout=timeout)
        except queue.Empty:
            raise GroupFailureError(
                f"Rank {dst} of group {self.group.group_id} timed out after "
                f"{timeout:g} s waiting for rank {src}"
            ) from None
        if item is _ABORT:
            self._inboxes[(dst, src)].put(_ABORT)
            raise GroupFailureError(
                f"Group {self.group.group_id} aborted: {self._abort_reason}"
            )
        return item

    def abort(self, reason: str) -> None:
        """Wake every pending and future `recv` with a group failure."""
        self._abort_reason = reason
        for inbox in self._inboxes.values():
            inbox.put(_ABORT)

    def close(self) -> None:
        """Release the channels."""

    def _deliver(self, src: int, dst: int, command: Command, payload: bytes) -> None:
        """Put a frame into the destination inbox and count it."""
        if self.monitor is not None:
            self.monitor.record(
                self.group.members[src],
                self.group.members[dst],
                FRAME_HEADER_SIZE + len(payload),
            )
        self._inboxes[(dst, src)].put((command, payload))


class QueueTransport(Transport):
    """Channels as in-process queues, for members running as threads."""

    def send(self, src: int, dst: int, command: Command, payload: bytes) -> None:
        """Send a frame from rank `src` to rank `dst`."""
        self._deliver(src, dst, command, payload)


class StreamTransport(Transport):
    """Channels as a full mesh of connected stream sockets.

    Frames use the protocol framing with the group id in the session field. Every
    socket end has a reader thread that drains it into the inbox, so a send never
    blocks on a peer that is itself sending.
    """

    def __init__(self, group: WorkerGroup, monitor: TrafficMonitor | None) -> None:
        """Connect every pair of ranks and start the reader threads."""
        super().__init__(group, monitor)
        self._ends: dict[tuple[int, int], socket.socket] = {}
        self._locks: dict[tuple[int, int], threading.Lock] = {}
        self._readers: list[threading.Thread] = []
        for a in range(group.size):
            for b in range(a + 1, group.size):
                end_a, end_b = socket.socketpair()
                self._ends[(a, b)], self._ends[(b, a)] = end_a, end_b
                self._locks[(a, b)], self._locks[(b, a)] = (
                    threading.Lock(),
                    threading.Lock(),
                )
        for (owner, peer), sock in self._ends.items():
            reader = threading.Thread(
                target=self._read_loop,
                args=(sock, owner, peer),
                name=f"group-{group.group_id}-rx-{owner}<-{peer}",
                daemon=True,
            )
            reader.start()
            self._readers.append(reader)

    def send(self, src: int, dst: int, command: Command, payload: bytes) -> None:
        """Send a frame from rank `src` to rank `dst`."""
        if src == dst:
            self._deliver(src, dst, command, payload)
            return
        frame = encode_frame(command, self.group.group_id, payload)
        try:
            with self._locks[(src, dst)]:
                self._ends[(src, dst)].sendall(frame)
        except OSError as exc:
            raise GroupFailureError(
                f"Rank {src} could not send to rank {dst}: {exc}"
            ) from exc

    def _read_loop(self, sock: socket.socket, owner: int, peer: int) -> None:
        """Move frames arriving at `owner` from `peer` into the inbox."""
        decoder = FrameDecoder()
        try:
            while True:
                chunk = sock.recv(1 << 20)
                if not chunk:
                    break
                for frame in decoder.feed(chunk):
                    self._deliver(peer, owner, frame.command, frame.payload)
        except (OSError, ProtocolError) as exc:
            logger.debug(f"Group channel {peer}->{owner} closed: {exc}")

    def close(self) -> None:
        """Close every socket, which ends the reader threads."""
        for sock in self._ends.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        for reader in self._readers:
            reader.join(timeout=1.0)


TRANSPORTS: dict[str, type[Transport]] = {
    "queue": QueueTransport,
    "stream": StreamTransport,
}


class Communicator:
    """Collectives for one rank of a group.

    All members must call the same collectives in the same order.

    Args:
        group: This member's view of the group.
        transport: The channels shared by the group.
        timeout_s: How long to wait for any single peer message.
    """

    def __init__(
        self, group: WorkerGroup, transport: Transport, timeout_s: float
    ) -> None:
        """Initialise the communicator."""
        self.group = group
        self.transport = transport
        self.timeout_s = timeout_s

    @property
    def rank(self) -> int:
        """This member's rank."""
        return self.group.rank

    @property
    def size(self) -> int:
        """Number of members."""
        return self.group.size

    def _send(self, dst: int, command: Command, payload: bytes) -> None:
        self.transport.send(self.rank, dst, command, payload)

    def _recv(self, src: int, expected: Command) -> bytes:
        command, payload = self.transport.recv(self.rank, src, self.timeout_s)
        if command == Command.GROUP_ERROR:
            raise CollectiveError(payload.decode("utf-8", errors="replace"))
        if command != expected:
            raise CollectiveError(
                f"Rank {self.rank} expected {expected.name} from rank {src}, "
                f"got {command.name}"
            )
        return payload

    def _check_root(self, root: int) -> None:
        if not 0 <= root < self.size:
            raise CollectiveError(f"Root {root} out of range for size {self.size}")

    def broadcast(self, data: bytes, root: int = 0) -> bytes:
        """Return a copy of the root's `data` on every rank.

        Non-root ranks may pass anything; their `data` is ignored.
        """
        self._check_root(root)
        if self.rank == root:
            for dst in range(self.size):
                if dst != root:
                    self._send(dst, Command.GROUP_BROADCAST, data)
            return bytes(data)
        return self._recv(root, Command.GROUP_BROADCAST)

    def gather(self, data: bytes, root: int = 0) -> list[bytes] | None:
        """Collect every rank's `data` at the root, in rank order.

        Returns:
            The list at the root, None elsewhere.
        """
        self._check_root(root)
        if self.rank != root:
            self._send(root, Command.GROUP_GATHER, data)
            return None
        return [
            bytes(data) if src == root else self._recv(src, Command.GROUP_GATHER)
            for src in range(self.size)
        ]

    def allgather(self, data: bytes) -> list[bytes]:
        """Every rank's `data` on every rank, in rank order.

        Contributions may differ in length.
        """
        gathered = self.gather(data, root=0)
        packed = _pack_list(gathered) if gathered is not None else b""
        return _unpack_list(self.broadcast(packed, root=0))

    def alltoall(self, chunks: Sequence[bytes]) -> list[bytes]:
        """Send `chunks[r]` to rank r and return what each rank sent here.

        Raises:
            CollectiveError: If `chunks` does not have one entry per rank.
        """
        if len(chunks) != self.size:
            raise CollectiveError(
                f"alltoall needs {self.size} chunks, rank {self.rank} gave "
                f"{len(chunks)}"
            )
        for dst in range(self.size):
            if dst != self.rank:
                self._send(dst, Command.GROUP_ALLTOALL, chunks[dst])
        return [
            bytes(chunks[src])
            if src == self.rank
            else self._recv(src, Command.GROUP_ALLTOALL)
            for src in range(self.size)
        ]

    def allreduce_sum(self, local: np.ndarray) -> np.ndarray:
        """Element-wise sum of every rank's vector.

        The root adds the contributions in rank order and broadcasts the result, so
        all ranks get bit-identical output.

        Raises:
            CollectiveError: If the vectors differ in length, on every rank.
        """
        vector = np.ascontiguousarray(local, dtype="<f8").ravel()
        if self.rank != 0:
            self._send(0, Command.GROUP_REDUCE, vector.tobytes())
            return _decode_vector(self._recv(0, Command.GROUP_REDUCE))

        total = vector.copy()
        mismatch = None
        for src in range(1, self.size):
            other = _decode_vector(self._recv(src, Command.GROUP_REDUCE))
            if other.shape != total.shape:
                mismatch = (
                    f"allreduce_sum length mismatch: rank 0 has {total.size}, "
                    f"rank {src} has {other.size}"
                )
                continue
            total += other
        if mismatch is not None:
            for dst in range(1, self.size):
                self._send(dst, Command.GROUP_ERROR, mismatch.encode("utf-8"))
            raise CollectiveError(mismatch)
        payload = total.tobytes()
        for dst in range(1, self.size):
            self._send(dst, Command.GROUP_REDUCE, payload)
        return total

    def barrier(self) -> None:
        """Return only after every member has entered the barrier."""
        if self.rank != 0:
            self._send(0, Command.GROUP_BARRIER, b"")
            self._recv(0, Command.GROUP_BARRIER)
            return
        for src in range(1, self.size):
            self._recv(src, Command.GROUP_BARRIER)
        for dst in range(1, self.size):
            self._send(dst, Command.GROUP_BARRIER, b"")

    def broadcast_float(self, value: float, root: int = 0) -> float:
        """Broadcast a single f64."""
        payload = struct.pack("<d", value) if self.rank == root else b""
        return struct.unpack("<d", self.broadcast(payload, root))[0]


def _pack_list(items: Sequence[bytes]) -> bytes:
    """Pack byte strings as u32 count, then u32 length + bytes for each."""
    parts = [U32.pack(len(items))]
    for item in items:
        parts.append(U32.pack(len(item)))
        parts.append(item)
    return b"".join(parts)


def _unpack_list(data: bytes) -> list[bytes]:
    """Inverse of `_pack_list`."""
    (count,) = U32.unpack_from(data)
    offset = 4
    items = []
    for _ in range(count):
        (length,) = U32.unpack_from(data, offset)
        offset += 4
        items.append(data[offset : offset + length])
        offset += length
    return items


def _decode_vector(payload: bytes) -> np.ndarray:
    return np.frombuffer(payload, dtype="<f8").copy()


def run_collective(
    group_id: int,
    members: Sequence[int],
    fn: Callable[[Communicator], T],
    transport: str = "stream",
    timeout_s: float = 60.0,
    monitor: TrafficMonitor | None = None,
) -> list[T]:
    """Run `fn` once per rank, each on its own thread, over a fresh transport.

    If any rank raises, the transport is aborted so the others leave their pending
    collective with a `GroupFailureError`.

    Args:
        group_id: Identifier of the group.
        members: Worker ids in rank order.
        fn: The per-rank body; receives that rank's communicator.
        transport: "stream" or "queue".
        timeout_s: Per-message collective timeout.
        monitor: Optional byte counter.

    Returns:
        The return values, in rank order.

    Raises:
        BridgeError: The root-cause error: the lowest rank that failed with something
            other than a group failure, else the lowest failed rank.

    >>> run_collective(1, [0, 1, 2], lambda c: c.allgather(bytes([c.rank]))[2], "queue")
    [b'\\x02', b'\\x02', b'\\x02']
    """
    group = WorkerGroup(group_id, tuple(members))
    channels = TRANSPORTS[transport](group, monitor)

    def body(rank: int) -> T:
        comm = Communicator(group.at_rank(rank), channels, timeout_s)
        try:
            return fn(comm)
        except BaseException as exc:
            channels.abort(f"rank {rank} failed: {exc}")
            raise

    try:
        with ThreadPoolExecutor(
            max_workers=group.size, thread_name_prefix=f"group-{group_id}"
        ) as executor:
            futures = [executor.submit(body, rank) for rank in range(group.size)]
            errors = [future.exception() for future in futures]
    finally:
        channels.close()

    failures = [exc for exc in errors if exc is not None]
    if failures:
        primary = next(
            (exc for exc in failures if not isinstance(exc, GroupFailureError)),
            failures[0],
        )
        raise primary
    return [future.result() for future in futures]
