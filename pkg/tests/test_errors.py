"""Tests for the `errors` module."""

import pytest

from offload_bridge.constants import ErrorCode
from offload_bridge.errors import (
    ERROR_CLASSES,
    BridgeError,
    IncompleteFrameError,
    ProtocolError,
    VersionError,
    error_from_code,
)
from offload_bridge.protocol import decode_error, encode_error


@pytest.mark.parametrize("cls", list(ERROR_CLASSES.values()), ids=lambda c: c.__name__)
def test_error_round_trip(cls: type[BridgeError]) -> None:
    """Every error comes back as its own class with its message."""
    code, message = decode_error(encode_error(cls.code, "something broke"))
    error = error_from_code(code, message)
    assert type(error) is cls
    assert str(error) == "something broke"


def test_codes_are_unique() -> None:
    """No two error classes share a code."""
    codes = [int(cls.code) for cls in ERROR_CLASSES.values()]
    assert len(codes) == len(set(codes))
    assert set(ERROR_CLASSES) <= {int(code) for code in ErrorCode}


def test_unknown_code() -> None:
    """Codes this side does not know become a plain bridge error."""
    error = error_from_code(4242, "from the future")
    assert type(error) is BridgeError
    assert "4242" in str(error) and "from the future" in str(error)


def test_hierarchy() -> None:
    """Version and incomplete-frame errors are protocol errors."""
    assert issubclass(VersionError, ProtocolError)
    error = IncompleteFrameError(12)
    assert isinstance(error, ProtocolError) and error.needed == 12
