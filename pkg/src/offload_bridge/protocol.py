"""Binary wire format shared by the client, the driver and the workers.

Every message is a frame: a 14-byte little-endian header followed by the payload.

    magic (u32) | version (u8) | command (u8) | session_id (u32) | payload_len (u32)

Payloads are either value lists (control traffic), row batches (bulk matrix data) or
raw bytes (group collectives). The byte layouts are documented in `docs/protocol.md`.
"""

import math
import socket
import struct
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from .constants import (
    FRAME_HEADER_SIZE,
    MAX_PAYLOAD_SIZE,
    PROTOCOL_MAGIC,
    PROTOCOL_VERSION,
    ROW_BATCH_HEADER_SIZE,
    Command,
    ValueTag,
)
from .errors import EncodingError, IncompleteFrameError, ProtocolError, VersionError

HEADER_STRUCT = struct.Struct("<IBBII")
ROW_BATCH_STRUCT = struct.Struct("<IQIQ")
MATRIX_STRUCT = struct.Struct("<IQQ")
FETCH_STRUCT = struct.Struct("<IQQI")
ERROR_STRUCT = struct.Struct("<H")
U32 = struct.Struct("<I")

I32_RANGE = (-(2**31), 2**31 - 1)
I64_RANGE = (-(2**63), 2**63 - 1)
U32_MAX = 2**32 - 1
U64_MAX = 2**64 - 1

F64 = np.dtype("<f8")


@dataclass(frozen=True)
class MatrixHandle:
    """Proxy for a server-resident distributed matrix.

    Only `id`, `rows` and `cols` travel on the wire. `session_id` is filled in by the
    client SDK so it can refuse handles from another session before asking the
    server.
    """

    id: int
    rows: int
    cols: int
    session_id: int = field(default=0, compare=False)

    @property
    def shape(self) -> tuple[int, int]:
        """The matrix dimensions."""
        return self.rows, self.cols


@dataclass(frozen=True)
class Frame:
    """A decoded message."""

    command: Command
    session_id: int
    payload: bytes

    @property
    def size(self) -> int:
        """Number of bytes the frame occupies on the wire."""
        return FRAME_HEADER_SIZE + len(self.payload)


def encode_frame(
    command: Command, session_id: int, payload: bytes | bytearray | memoryview = b""
) -> bytes:
    """Encode a frame.

    Args:
        command: The command code.
        session_id: The session the message belongs to (0 before the handshake).
        payload: The payload bytes.

    Returns:
        The header followed by the payload.

    Raises:
        EncodingError: If the payload does not fit the u32 length field.

    >>> encode_frame(Command.CLOSE, 0).hex(" ")
    '48 43 4c 41 01 08 00 00 00 00 00 00 00 00'
    """
    if len(payload) > MAX_PAYLOAD_SIZE:
        raise EncodingError(f"Payload of {len(payload)} bytes is too large")
    if not 0 <= session_id <= U32_MAX:
        raise EncodingError(f"Session id {session_id} does not fit in u32")
    header = HEADER_STRUCT.pack(
        PROTOCOL_MAGIC, PROTOCOL_VERSION, int(command), session_id, len(payload)
    )
    return header + bytes(payload)


def decode_header(
    data: bytes | bytearray | memoryview, offset: int = 0
) -> tuple[Command, int, int]:
    """Decode and validate the frame header starting at `offset`.

    Returns:
        The command, the session id and the payload length.

    Raises:
        IncompleteFrameError: If fewer than 14 bytes are available.
        ProtocolError: On a bad magic number or an unknown command code.
        VersionError: On an unsupported version.
    """
    available = len(data) - offset
    if available < FRAME_HEADER_SIZE:
        raise IncompleteFrameError(FRAME_HEADER_SIZE - available)
    magic, version, code, session_id, payload_len = HEADER_STRUCT.unpack_from(
        data, offset
    )
    if magic != PROTOCOL_MAGIC:
        raise ProtocolError(f"Bad magic number 0x{magic:08X}")
    if version != PROTOCOL_VERSION:
        raise VersionError(
            f"Unsupported protocol version {version}, expected {PROTOCOL_VERSION}"
        )
    try:
        command = Command(code)
    except ValueError:
        raise ProtocolError(f"Unknown command code 0x{code:02X}") from None
    return command, session_id, payload_len


def decode_frame(data: bytes | bytearray | memoryview, offset: int = 0) -> Frame:
    """Decode the frame starting at `offset`.

    Trailing bytes after the frame are ignored; use `Frame.size` to advance.

    Raises:
        IncompleteFrameError: If the header or the payload is truncated.

    >>> decode_frame(encode_frame(Command.HANDSHAKE, 7, b"abc"))
    Frame(command=<Command.HANDSHAKE: 1>, session_id=7, payload=b'abc')
    """
    command, session_id, payload_len = decode_header(data, offset)
    start = offset + FRAME_HEADER_SIZE
    end = start + payload_len
    if len(data) < end:
        raise IncompleteFrameError(end - len(data))
    return Frame(command, session_id, bytes(data[start:end]))


class FrameDecoder:
    """Incremental frame parser for a byte stream.

    Bytes may be fed in arbitrary pieces; the same frames come out as if the stream
    had been fed whole.
    """

    def __init__(self) -> None:
        """Initialise an empty decoder."""
        self._buffer = bytearray()

    def feed(self, data: bytes | bytearray | memoryview) -> list[Frame]:
        """Add bytes and return every frame that is now complete.

        Frames before an invalid header are returned first; the invalid bytes stay
        buffered and the next call raises, so feeding `b""` surfaces the error.

        Raises:
            ProtocolError: If the buffered bytes cannot start a valid frame. Nothing
                is consumed in that case.
        """
        self._buffer.extend(data)
        frames: list[Frame] = []
        offset = 0
        while True:
            try:
                frame = decode_frame(self._buffer, offset)
            except IncompleteFrameError:
                break
            except ProtocolError:
                if not frames:
                    raise
                break
            frames.append(frame)
            offset += frame.size
        del self._buffer[:offset]
        return frames

    @property
    def pending(self) -> int:
        """Number of buffered bytes that do not form a complete frame yet."""
        return len(self._buffer)


def recv_exactly(sock: socket.socket, size: int) -> bytes | None:
    """Read exactly `size` bytes, or return None if the peer closed first."""
    chunks = bytearray()
    while len(chunks) < size:
        chunk = sock.recv(min(size - len(chunks), 1 << 20))
        if not chunk:
            return None
        chunks.extend(chunk)
    return bytes(chunks)


def recv_frame(sock: socket.socket) -> Frame | None:
    """Read one frame from a blocking socket.

    Returns:
        The frame, or None if the connection was closed at a frame boundary.

    Raises:
        ProtocolError: On invalid header bytes or a connection closed mid-frame.
    """
    header = recv_exactly(sock, FRAME_HEADER_SIZE)
    if header is None:
        return None
    command, session_id, payload_len = decode_header(header)
    payload = recv_exactly(sock, payload_len) if payload_len else b""
    if payload is None:
        raise ProtocolError("Connection closed in the middle of a frame")
    return Frame(command, session_id, payload)


def send_frame(
    sock: socket.socket,
    command: Command,
    session_id: int,
    payload: bytes | bytearray | memoryview = b"",
) -> int:
    """Write one frame and return the number of bytes sent."""
    data = encode_frame(command, session_id, payload)
    sock.sendall(data)
    return len(data)


@dataclass(frozen=True)
class Value:
    """A tagged routine parameter or result.

    Use the class methods (`Value.i32(7)`, ...) or `Value.wrap` to build values.
    """

    tag: ValueTag
    data: Any

    def __post_init__(self) -> None:
        """Check that the payload fits the tag."""
        tag, data = self.tag, self.data
        match tag:
            case ValueTag.BOOL:
                ok = isinstance(data, bool)
            case ValueTag.I32:
                ok = _is_int(data) and I32_RANGE[0] <= data <= I32_RANGE[1]
            case ValueTag.I64:
                ok = _is_int(data) and I64_RANGE[0] <= data <= I64_RANGE[1]
            case ValueTag.F64:
                ok = isinstance(data, float)
            case ValueTag.STRING:
                ok = isinstance(data, str)
            case ValueTag.MATRIX:
                ok = (
                    isinstance(data, MatrixHandle)
                    and 0 <= data.id <= U32_MAX
                    and 0 <= data.rows <= U64_MAX
                    and 0 <= data.cols <= U64_MAX
                )
            case ValueTag.F64_ARRAY:
                ok = isinstance(data, tuple) and all(
                    isinstance(x, float) for x in data
                )
            case _:
                ok = False
        if not ok:
            raise EncodingError(f"{data!r} cannot be encoded as {ValueTag(tag).name}")

    @classmethod
    def boolean(cls, data: bool) -> "Value":
        """A bool value."""
        return cls(ValueTag.BOOL, data)

    @classmethod
    def i32(cls, data: int) -> "Value":
        """A 32-bit integer value."""
        return cls(ValueTag.I32, int(data))

    @classmethod
    def i64(cls, data: int) -> "Value":
        """A 64-bit integer value."""
        return cls(ValueTag.I64, int(data))

    @classmethod
    def f64(cls, data: float) -> "Value":
        """A double precision value."""
        return cls(ValueTag.F64, float(data))

    @classmethod
    def string(cls, data: str) -> "Value":
        """A string value."""
        return cls(ValueTag.STRING, data)

    @classmethod
    def matrix(cls, handle: MatrixHandle) -> "Value":
        """A matrix handle value."""
        return cls(ValueTag.MATRIX, handle)

    @classmethod
    def f64_array(cls, data: Iterable[float]) -> "Value":
        """A vector of doubles."""
        return cls(ValueTag.F64_ARRAY, tuple(float(x) for x in data))

    @classmethod
    def wrap(cls, obj: Any) -> "Value":
        """Turn a plain Python object into a value.

        Integers become i32 when they fit and i64 otherwise.

        >>> Value.wrap(7)
        Value(tag=<ValueTag.I32: 2>, data=7)
        >>> Value.wrap(2**40).tag.name
        'I64'
        """
        if isinstance(obj, Value):
            return obj
        if isinstance(obj, (bool, np.bool_)):
            return cls.boolean(bool(obj))
        if _is_int(obj):
            if I32_RANGE[0] <= obj <= I32_RANGE[1]:
                return cls.i32(obj)
            return cls.i64(obj)
        if isinstance(obj, (float, np.floating)):
            return cls.f64(float(obj))
        if isinstance(obj, str):
            return cls.string(obj)
        if isinstance(obj, MatrixHandle):
            return cls.matrix(obj)
        if isinstance(obj, (np.ndarray, list, tuple)):
            return cls.f64_array(np.asarray(obj, dtype=np.float64).ravel().tolist())
        raise EncodingError(f"No wire type for {type(obj).__name__}")

    def unwrap(self) -> Any:
        """The plain Python object; vectors come back as NumPy arrays."""
        if self.tag == ValueTag.F64_ARRAY:
            return np.array(self.data, dtype=np.float64)
        return self.data


def _is_int(obj: Any) -> bool:
    """Integers, but not bools."""
    return isinstance(obj, (int, np.integer)) and not isinstance(obj, (bool, np.bool_))


def encode_value(value: Value) -> bytes:
    """Encode one value as its tag byte followed by its body.

    >>> encode_value(Value.boolean(True)).hex(" ")
    '01 01'
    >>> encode_value(Value.i32(7)).hex(" ")
    '02 07 00 00 00'
    """
    tag = bytes([int(value.tag)])
    data = value.data
    match value.tag:
        case ValueTag.BOOL:
            body = b"\x01" if data else b"\x00"
        case ValueTag.I32:
            body = struct.pack("<i", data)
        case ValueTag.I64:
            body = struct.pack("<q", data)
        case ValueTag.F64:
            body = struct.pack("<d", data)
        case ValueTag.STRING:
            raw = data.encode("utf-8")
            if len(raw) > U32_MAX:
                raise EncodingError("String too long")
            body = U32.pack(len(raw)) + raw
        case ValueTag.MATRIX:
            body = MATRIX_STRUCT.pack(data.id, data.rows, data.cols)
        case ValueTag.F64_ARRAY:
            body = U32.pack(len(data)) + struct.pack(f"<{len(data)}d", *data)
    return tag + body


def decode_value(
    data: bytes | bytearray | memoryview, offset: int = 0
) -> tuple[Value, int]:
    """Decode the value starting at `offset`.

    Returns:
        The value and the number of bytes it occupied, so values can be packed back to
        back.

    Raises:
        ProtocolError: On an unknown tag or an invalid body.
        IncompleteFrameError: If the body is truncated.
    """
    view = memoryview(data)[offset:]
    _need(view, 1)
    try:
        tag = ValueTag(view[0])
    except ValueError:
        raise ProtocolError(f"Unknown value tag 0x{view[0]:02X}") from None

    match tag:
        case ValueTag.BOOL:
            _need(view, 2)
            if view[1] not in (0, 1):
                raise ProtocolError(f"Invalid bool byte 0x{view[1]:02X}")
            return Value.boolean(view[1] == 1), 2
        case ValueTag.I32:
            _need(view, 5)
            return Value.i32(struct.unpack_from("<i", view, 1)[0]), 5
        case ValueTag.I64:
            _need(view, 9)
            return Value.i64(struct.unpack_from("<q", view, 1)[0]), 9
        case ValueTag.F64:
            _need(view, 9)
            return Value.f64(struct.unpack_from("<d", view, 1)[0]), 9
        case ValueTag.STRING:
            _need(view, 5)
            (length,) = U32.unpack_from(view, 1)
            _need(view, 5 + length)
            try:
                text = bytes(view[5 : 5 + length]).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise ProtocolError(f"String is not valid UTF-8: {exc}") from None
            return Value.string(text), 5 + length
        case ValueTag.MATRIX:
            _need(view, 1 + MATRIX_STRUCT.size)
            matrix_id, rows, cols = MATRIX_STRUCT.unpack_from(view, 1)
            handle = MatrixHandle(matrix_id, rows, cols)
            return Value.matrix(handle), 1 + MATRIX_STRUCT.size
        case ValueTag.F64_ARRAY:
            _need(view, 5)
            (count,) = U32.unpack_from(view, 1)
            _need(view, 5 + 8 * count)
            items = struct.unpack_from(f"<{count}d", view, 5)
            return Value.f64_array(items), 5 + 8 * count
    raise ProtocolError(f"Unhandled value tag {tag!r}")


def _need(view: memoryview, size: int) -> None:
    """Signal an incomplete message if `view` is shorter than `size`."""
    if len(view) < size:
        raise IncompleteFrameError(size - len(view))


def encode_values(values: Iterable[Any]) -> bytes:
    """Encode a value list: a u32 count followed by the values back to back.

    Plain Python objects are wrapped with `Value.wrap`.
    """
    encoded = [encode_value(Value.wrap(v)) for v in values]
    return U32.pack(len(encoded)) + b"".join(encoded)


def decode_values(data: bytes | bytearray | memoryview) -> list[Value]:
    """Decode a value list.

    Raises:
        ProtocolError: If bytes are left over after the last value.
    """
    view = memoryview(data)
    _need(view, 4)
    (count,) = U32.unpack_from(view)
    offset = 4
    values = []
    for _ in range(count):
        value, used = decode_value(view, offset)
        values.append(value)
        offset += used
    if offset != len(view):
        raise ProtocolError(f"{len(view) - offset} trailing byte(s) after value list")
    return values


def encode_error(code: int, message: str) -> bytes:
    """Encode an ERROR payload: u16 code followed by a UTF-8 message."""
    return ERROR_STRUCT.pack(code) + message.encode("utf-8")


def decode_error(payload: bytes) -> tuple[int, str]:
    """Decode an ERROR payload."""
    if len(payload) < ERROR_STRUCT.size:
        raise ProtocolError("Error payload shorter than its code")
    (code,) = ERROR_STRUCT.unpack_from(payload)
    return code, payload[ERROR_STRUCT.size :].decode("utf-8", errors="replace")


@dataclass(frozen=True)
class RowBatch:
    """Globally contiguous rows of one matrix, row-major f64."""

    matrix_id: int
    start_row: int
    num_rows: int
    num_cols: int
    data: bytes

    def __post_init__(self) -> None:
        """Check that the data length matches the dimensions."""
        expected = self.num_rows * self.num_cols * F64.itemsize
        if len(self.data) != expected:
            raise ProtocolError(
                f"Row batch declares {self.num_rows}x{self.num_cols} values "
                f"({expected} bytes) but carries {len(self.data)} bytes"
            )

    @classmethod
    def from_array(cls, matrix_id: int, start_row: int, rows: np.ndarray) -> "RowBatch":
        """Build a batch from a 2D array of rows."""
        rows = np.ascontiguousarray(rows, dtype=F64)
        if rows.ndim != 2:
            raise EncodingError(f"Expected a 2D array of rows, got {rows.ndim}D")
        return cls(matrix_id, start_row, rows.shape[0], rows.shape[1], rows.tobytes())

    def array(self) -> np.ndarray:
        """The rows as a read-only (num_rows, num_cols) array."""
        return np.frombuffer(self.data, dtype=F64).reshape(self.num_rows, self.num_cols)

    @property
    def stop_row(self) -> int:
        """One past the last global row of the batch."""
        return self.start_row + self.num_rows


def encode_row_batch(batch: RowBatch) -> bytes:
    """Encode a row batch: 24-byte header followed by the raw f64 data.

    >>> len(encode_row_batch(RowBatch(0, 0, 1, 1, bytes(8))))
    32
    """
    header = ROW_BATCH_STRUCT.pack(
        batch.matrix_id, batch.start_row, batch.num_rows, batch.num_cols
    )
    return header + batch.data


def decode_row_batch(data: bytes | bytearray | memoryview) -> RowBatch:
    """Decode a row batch.

    Raises:
        ProtocolError: If the data length disagrees with the declared dimensions.
    """
    if len(data) < ROW_BATCH_HEADER_SIZE:
        raise ProtocolError(
            f"Row batch of {len(data)} bytes is shorter than its header"
        )
    matrix_id, start_row, num_rows, num_cols = ROW_BATCH_STRUCT.unpack_from(data)
    return RowBatch(
        matrix_id, start_row, num_rows, num_cols, bytes(data[ROW_BATCH_HEADER_SIZE:])
    )


@dataclass(frozen=True)
class FetchRequest:
    """Ask a worker for a contiguous range of its rows."""

    matrix_id: int
    start_row: int
    num_rows: int
    rows_per_batch: int

    @property
    def num_batches(self) -> int:
        """Number of reply frames the worker sends."""
        return math.ceil(self.num_rows / self.rows_per_batch)


def encode_fetch_request(request: FetchRequest) -> bytes:
    """Encode a FETCH_ROWS request payload."""
    if request.rows_per_batch < 1:
        raise EncodingError("rows_per_batch must be at least 1")
    return FETCH_STRUCT.pack(
        request.matrix_id, request.start_row, request.num_rows, request.rows_per_batch
    )


def decode_fetch_request(payload: bytes) -> FetchRequest:
    """Decode a FETCH_ROWS request payload."""
    if len(payload) != FETCH_STRUCT.size:
        raise ProtocolError(f"FETCH_ROWS request must be {FETCH_STRUCT.size} bytes")
    matrix_id, start_row, num_rows, rows_per_batch = FETCH_STRUCT.unpack(payload)
    if rows_per_batch < 1:
        raise ProtocolError("rows_per_batch must be at least 1")
    return FetchRequest(matrix_id, start_row, num_rows, rows_per_batch)


def rows_per_batch(
    num_cols: int, batch_bytes: int, rows_per_message: int | None
) -> int:
    """Number of rows that go into one message.

    Args:
        num_cols: Row length.
        batch_bytes: Byte budget of one message's data.
        rows_per_message: Fixed row count, overriding the budget when given.

    >>> rows_per_batch(100, 1 << 20, None)
    1310
    >>> rows_per_batch(100, 1 << 20, 1)
    1
    """
    if rows_per_message is not None:
        return max(1, rows_per_message)
    return max(1, batch_bytes // (num_cols * F64.itemsize))


def values_of(values: Sequence[Value], *tags: ValueTag) -> list[Any]:
    """Unwrap a value list after checking its length and tags.

    Raises:
        ProtocolError: If the values do not match.
    """
    if len(values) != len(tags):
        raise ProtocolError(f"Expected {len(tags)} value(s), got {len(values)}")
    for i, (value, tag) in enumerate(zip(values, tags)):
        if value.tag != tag:
            raise ProtocolError(
                f"Value {i} should be {tag.name}, got {ValueTag(value.tag).name}"
            )
    return [value.data for value in values]
