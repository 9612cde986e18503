"""Constants."""

from enum import IntEnum

PROTOCOL_MAGIC = 0x414C4348
PROTOCOL_VERSION = 1
FRAME_HEADER_SIZE = 14
ROW_BATCH_HEADER_SIZE = 24
MAX_PAYLOAD_SIZE = 2**32 - 1

RESPONSE_BIT = 0x80

DEFAULT_BATCH_BYTES = 1 << 20
DEFAULT_COLLECTIVE_TIMEOUT_S = 60.0
DEFAULT_COMPLETENESS_TIMEOUT_S = 120.0
DEFAULT_GATHER_LIMIT_BYTES = 2 << 30
DEFAULT_GEMM_MEMORY_BUDGET_BYTES = 1 << 30
DEFAULT_CONDEST_MAX_COLS = 4096

# Output rows of GEMM are computed in tiles aligned to multiples of this many global
# rows, so the kernel call shape for a given row never depends on the layout.
GEMM_TILE_ROWS = 64

SERVER_NAME = "offload_bridge"
MATHLIB_NAME = "mathlib"

FILE_NAMES = {
    "info_file": "bridge.info",
    "raw_log": "bench_raw.jsonl",
}


class Command(IntEnum):
    """Command codes carried in the frame header."""

    HANDSHAKE = 0x01
    REQUEST_WORKERS = 0x02
    REGISTER_LIBRARY = 0x03
    CREATE_MATRIX = 0x04
    SEND_ROWS = 0x05
    FETCH_ROWS = 0x06
    RUN = 0x07
    CLOSE = 0x08
    AWAIT_MATRIX = 0x09

    GROUP_BROADCAST = 0x40
    GROUP_GATHER = 0x41
    GROUP_REDUCE = 0x42
    GROUP_BARRIER = 0x43
    GROUP_ALLTOALL = 0x44
    GROUP_ERROR = 0x4F

    HANDSHAKE_REPLY = 0x81
    REQUEST_WORKERS_REPLY = 0x82
    REGISTER_LIBRARY_REPLY = 0x83
    CREATE_MATRIX_REPLY = 0x84
    SEND_ROWS_REPLY = 0x85
    FETCH_ROWS_REPLY = 0x86
    RUN_REPLY = 0x87
    CLOSE_REPLY = 0x88
    AWAIT_MATRIX_REPLY = 0x89

    ERROR = 0xFF

    @property
    def reply(self) -> "Command":
        """The response code matching this request code."""
        return Command(self | RESPONSE_BIT)

    @property
    def is_reply(self) -> bool:
        """Whether this code is a response (or the error response)."""
        return bool(self & RESPONSE_BIT)


class ValueTag(IntEnum):
    """Type tags of serialised routine parameters."""

    BOOL = 0x01
    I32 = 0x02
    I64 = 0x03
    F64 = 0x04
    STRING = 0x05
    MATRIX = 0x06
    F64_ARRAY = 0x07


class ErrorCode(IntEnum):
    """Stable numeric error codes, carried as u16 in ERROR frames."""

    PROTOCOL = 1
    VERSION = 2
    INCOMPLETE_FRAME = 3
    ENCODING = 4
    SESSION_STATE = 10
    INSUFFICIENT_WORKERS = 11
    UNKNOWN_LIBRARY = 12
    UNKNOWN_ROUTINE = 13
    HANDLE = 14
    NOT_READY = 15
    ARGUMENT = 16
    ROUTING = 17
    TOO_LARGE = 18
    RESOURCE = 19
    COMPLETENESS_TIMEOUT = 20
    GROUP_FAILURE = 21
    COLLECTIVE = 22
    SESSION_CLOSED = 23
    ROUTINE = 24
    CONNECT = 30
    CONTEXT_CLOSED = 31
    INTERNAL = 99
