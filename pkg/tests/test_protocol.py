"""Tests for the `protocol` module."""

import struct

import numpy as np
import pytest

from offload_bridge.constants import FRAME_HEADER_SIZE, Command, ValueTag
from offload_bridge.errors import (
    EncodingError,
    IncompleteFrameError,
    ProtocolError,
    VersionError,
)
from offload_bridge.protocol import (
    FetchRequest,
    Frame,
    FrameDecoder,
    MatrixHandle,
    RowBatch,
    Value,
    decode_error,
    decode_fetch_request,
    decode_frame,
    decode_row_batch,
    decode_value,
    decode_values,
    encode_error,
    encode_fetch_request,
    encode_frame,
    encode_row_batch,
    encode_value,
    encode_values,
    rows_per_batch,
    values_of,
)


def _random_value(rng: np.random.Generator) -> Value:
    match int(rng.integers(7)):
        case 0:
            return Value.boolean(bool(rng.integers(2)))
        case 1:
            return Value.i32(int(rng.integers(-(2**31), 2**31)))
        case 2:
            return Value.i64(int(rng.integers(-(2**63), 2**63 - 1)))
        case 3:
            return Value.f64(float(rng.standard_normal()))
        case 4:
            return Value.string("".join(rng.choice(list("abcæøå ✓"), 5)))
        case 5:
            return Value.matrix(MatrixHandle(int(rng.integers(1, 1000)), 3, 4))
        case _:
            return Value.f64_array(rng.standard_normal(int(rng.integers(4))))


def test_header_layout() -> None:
    """The header is magic, version, command, session id and payload length."""
    frame = encode_frame(Command.RUN, 9, b"xyz")
    magic, version, command, session_id, length = struct.unpack("<IBBII", frame[:14])
    assert (magic, version, command, session_id, length) == (0x414C4348, 1, 7, 9, 3)
    assert frame[14:] == b"xyz"


def test_truncated_frame_reports_missing_bytes() -> None:
    """A truncated frame says how many more bytes it needs."""
    data = encode_frame(Command.RUN, 1, b"12345")
    with pytest.raises(IncompleteFrameError) as info:
        decode_frame(data[:10])
    assert info.value.needed == FRAME_HEADER_SIZE - 10
    with pytest.raises(IncompleteFrameError) as info:
        decode_frame(data[:-2])
    assert info.value.needed == 2


def test_invalid_headers_are_rejected() -> None:
    """Bad magic, another version and unknown commands are errors."""
    good = bytearray(encode_frame(Command.CLOSE, 0))
    bad_magic = bytes([0]) + bytes(good[1:])
    with pytest.raises(ProtocolError):
        decode_frame(bad_magic)
    bad_version = bytes(good[:4]) + bytes([2]) + bytes(good[5:])
    with pytest.raises(VersionError):
        decode_frame(bad_version)
    bad_command = bytes(good[:5]) + bytes([0x33]) + bytes(good[6:])
    with pytest.raises(ProtocolError):
        decode_frame(bad_command)


def test_stream_decoder_byte_at_a_time(rng: np.random.Generator) -> None:
    """Feeding a stream byte by byte yields the same frames as feeding it whole."""
    frames = []
    for i in range(50):
        payload = encode_values([_random_value(rng) for _ in range(3)])
        frames.append(encode_frame(Command.RUN, i, payload))
    stream = b"".join(frames)

    whole = FrameDecoder().feed(stream)
    decoder = FrameDecoder()
    pieces = [frame for byte in stream for frame in decoder.feed(bytes([byte]))]
    assert pieces == whole
    assert [frame.session_id for frame in pieces] == list(range(50))
    assert decoder.pending == 0


def test_values_round_trip(rng: np.random.Generator) -> None:
    """Ten thousand randomized value lists come back unchanged."""
    for _ in range(10_000):
        values = [_random_value(rng) for _ in range(int(rng.integers(1, 6)))]
        assert decode_values(encode_values(values)) == values


def test_frames_round_trip(rng: np.random.Generator) -> None:
    """Randomized frames decode one by one and as one stream."""
    commands = list(Command)
    frames = [
        Frame(
            commands[int(rng.integers(len(commands)))],
            int(rng.integers(2**32)),
            rng.bytes(int(rng.integers(64))),
        )
        for _ in range(10_000)
    ]
    encoded = [encode_frame(f.command, f.session_id, f.payload) for f in frames]
    assert [decode_frame(data) for data in encoded] == frames
    assert FrameDecoder().feed(b"".join(encoded)) == frames


def test_row_batches_round_trip(rng: np.random.Generator) -> None:
    """Randomized row batches keep every bit, NaN payloads included."""
    nan_bits = np.array(
        [0x7FF8_0000_DEAD_BEEF, 0x7FF0_0000_0000_0001, 0xFFF8_0000_0000_0000],
        dtype=np.uint64,
    )
    for _ in range(10_000):
        rows = rng.standard_normal(tuple(rng.integers(1, 6, size=2)))
        bits = rows.view(np.uint64)
        mask = rng.random(rows.shape) < 0.2
        bits[mask] = rng.choice(nan_bits, int(mask.sum()))
        start = int(rng.integers(2**40))
        batch = RowBatch.from_array(int(rng.integers(1, 2**32)), start, rows)
        decoded = decode_row_batch(encode_row_batch(batch))
        assert (decoded.matrix_id, decoded.start_row) == (batch.matrix_id, start)
        assert decoded.array().tobytes() == rows.tobytes()


def test_decoder_returns_frames_before_a_bad_header() -> None:
    """Good frames come out first; the bad header raises on the next feed."""
    good = encode_frame(Command.RUN, 1, b"ok") + encode_frame(Command.CLOSE, 2)
    decoder = FrameDecoder()
    frames = decoder.feed(good + b"\x00" * FRAME_HEADER_SIZE)
    assert [frame.session_id for frame in frames] == [1, 2]
    assert decoder.pending == FRAME_HEADER_SIZE
    with pytest.raises(ProtocolError):
        decoder.feed(b"")
    with pytest.raises(ProtocolError):
        FrameDecoder().feed(b"\x00" * FRAME_HEADER_SIZE)


def test_value_encodings() -> None:
    """Spot checks of the byte layout of values."""
    assert encode_value(Value.string("hi")).hex() == "05020000006869"
    handle = MatrixHandle(3, 2, 5)
    expected = bytes([6]) + struct.pack("<IQQ", 3, 2, 5)
    assert encode_value(Value.matrix(handle)) == expected
    array = encode_value(Value.f64_array([1.0, 2.0]))
    assert array == bytes([7]) + struct.pack("<I2d", 2, 1.0, 2.0)


def test_value_errors() -> None:
    """Unknown tags, bad bools, trailing bytes and out-of-range ints are rejected."""
    with pytest.raises(ProtocolError):
        decode_value(bytes([0x20, 0]))
    with pytest.raises(ProtocolError):
        decode_value(bytes([1, 2]))
    with pytest.raises(IncompleteFrameError):
        decode_value(bytes([3, 0, 0]))
    with pytest.raises(ProtocolError):
        decode_values(encode_values([1]) + b"\x00")
    with pytest.raises(EncodingError):
        Value.i32(2**31)
    with pytest.raises(EncodingError):
        Value.wrap(object())


def test_wrap_and_unwrap() -> None:
    """Python objects map onto the narrowest tag and back."""
    assert Value.wrap(True).tag == ValueTag.BOOL
    assert Value.wrap(np.int64(5)).tag == ValueTag.I32
    assert Value.wrap(-(2**40)).tag == ValueTag.I64
    assert Value.wrap(0.5).tag == ValueTag.F64
    vector = Value.wrap(np.array([1.0, 2.0])).unwrap()
    assert isinstance(vector, np.ndarray) and vector.tolist() == [1.0, 2.0]


def test_values_of_checks_tags() -> None:
    """`values_of` unwraps lists of the expected shape only."""
    values = decode_values(encode_values([7, "x"]))
    assert values_of(values, ValueTag.I32, ValueTag.STRING) == [7, "x"]
    with pytest.raises(ProtocolError):
        values_of(values, ValueTag.I32)
    with pytest.raises(ProtocolError):
        values_of(values, ValueTag.STRING, ValueTag.STRING)


def test_row_batch_round_trip() -> None:
    """A row batch keeps its position and the exact f64 bits."""
    rows = np.array([[1.5, -0.0], [np.inf, 2.0**-1074]])
    batch = decode_row_batch(encode_row_batch(RowBatch.from_array(4, 10, rows)))
    assert (batch.matrix_id, batch.start_row, batch.num_rows, batch.num_cols) == (
        4,
        10,
        2,
        2,
    )
    assert batch.stop_row == 12
    assert batch.array().tobytes() == rows.tobytes()


def test_row_batch_length_mismatch() -> None:
    """A batch whose data disagrees with its dimensions is a protocol error."""
    payload = encode_row_batch(RowBatch.from_array(1, 0, np.ones((2, 3))))
    with pytest.raises(ProtocolError):
        decode_row_batch(payload[:-8])


def test_fetch_request() -> None:
    """Fetch requests round-trip and know how many replies to expect."""
    request = FetchRequest(2, 100, 25, 10)
    assert decode_fetch_request(encode_fetch_request(request)) == request
    assert request.num_batches == 3
    with pytest.raises(EncodingError):
        encode_fetch_request(FetchRequest(2, 0, 1, 0))


def test_error_payload() -> None:
    """ERROR payloads carry a u16 code and a UTF-8 message."""
    assert decode_error(encode_error(14, "no such handle")) == (14, "no such handle")


def test_rows_per_batch() -> None:
    """The batch budget turns into whole rows, at least one."""
    assert rows_per_batch(100, 4096, None) == 5
    assert rows_per_batch(12800, 4096, None) == 1
    assert rows_per_batch(100, 1 << 20, 1) == 1
