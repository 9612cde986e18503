"""Error taxonomy shared by the client and the server.

Every error has a stable numeric code. The server sends the code and the message in
an ERROR frame, and the client raises the matching subclass again, so a caller sees
the same exception type on both sides of the wire.
"""

from typing import ClassVar

from .constants import ErrorCode


class BridgeError(Exception):
    """Base class of all errors raised by the bridge."""

    code: ClassVar[ErrorCode] = ErrorCode.INTERNAL


class ProtocolError(BridgeError):
    """Malformed bytes on the wire."""

    code = ErrorCode.PROTOCOL


class VersionError(ProtocolError):
    """Protocol version other than the supported one."""

    code = ErrorCode.VERSION


class EncodingError(ProtocolError):
    """A value cannot be represented in the wire format."""

    code = ErrorCode.ENCODING


class IncompleteFrameError(ProtocolError):
    """More bytes are needed before the message can be decoded.

    Args:
        needed: Number of additional bytes required, as far as it is known.
    """

    code = ErrorCode.INCOMPLETE_FRAME

    def __init__(self, needed: int) -> None:
        """Initialise the error."""
        super().__init__(f"Incomplete message, {needed} more byte(s) needed")
        self.needed = needed


class SessionStateError(BridgeError):
    """Command not valid in the current session state."""

    code = ErrorCode.SESSION_STATE


class InsufficientWorkersError(BridgeError):
    """Fewer free workers than requested."""

    code = ErrorCode.INSUFFICIENT_WORKERS


class UnknownLibraryError(BridgeError):
    """No plugin with the given name."""

    code = ErrorCode.UNKNOWN_LIBRARY


class UnknownRoutineError(BridgeError):
    """The library has no routine with the given name."""

    code = ErrorCode.UNKNOWN_ROUTINE


class HandleError(BridgeError):
    """Matrix handle unknown to, or not owned by, the session."""

    code = ErrorCode.HANDLE


class NotReadyError(BridgeError):
    """Matrix is not completely written yet."""

    code = ErrorCode.NOT_READY


class ArgumentError(BridgeError):
    """Invalid argument (dimensions, ranges, counts)."""

    code = ErrorCode.ARGUMENT


class RoutingError(BridgeError):
    """Rows delivered to a worker that does not own them."""

    code = ErrorCode.ROUTING


class TooLargeError(BridgeError):
    """Request exceeds a configured size guard."""

    code = ErrorCode.TOO_LARGE


class ResourceError(BridgeError):
    """Operation needs more memory than its configured budget."""

    code = ErrorCode.RESOURCE


class CompletenessTimeoutError(BridgeError):
    """Matrix still incomplete when the completeness timeout expired."""

    code = ErrorCode.COMPLETENESS_TIMEOUT


class GroupFailureError(BridgeError):
    """A member of the worker group failed or timed out during a collective."""

    code = ErrorCode.GROUP_FAILURE


class CollectiveError(BridgeError):
    """Members entered a collective with inconsistent arguments."""

    code = ErrorCode.COLLECTIVE


class SessionClosedError(BridgeError):
    """The session was closed while the request was in flight."""

    code = ErrorCode.SESSION_CLOSED


class RoutineError(BridgeError):
    """A library routine failed for a reason of its own."""

    code = ErrorCode.ROUTINE


class ConnectError(BridgeError):
    """The server could not be reached."""

    code = ErrorCode.CONNECT


class ContextClosedError(BridgeError):
    """The client context was stopped."""

    code = ErrorCode.CONTEXT_CLOSED


ERROR_CLASSES: dict[int, type[BridgeError]] = {
    int(cls.code): cls
    for cls in (
        BridgeError,
        ProtocolError,
        VersionError,
        EncodingError,
        SessionStateError,
        InsufficientWorkersError,
        UnknownLibraryError,
        UnknownRoutineError,
        HandleError,
        NotReadyError,
        ArgumentError,
        RoutingError,
        TooLargeError,
        ResourceError,
        CompletenessTimeoutError,
        GroupFailureError,
        CollectiveError,
        SessionClosedError,
        RoutineError,
        ConnectError,
        ContextClosedError,
    )
}


def error_from_code(code: int, message: str) -> BridgeError:
    """Rebuild the error raised on the other side of the wire.

    Args:
        code: The numeric error code.
        message: The human readable message.

    Returns:
        An instance of the matching subclass, or a plain `BridgeError` for codes this
        side does not know.

    >>> type(error_from_code(14, "no such handle")).__name__
    'HandleError'
    """
    cls = ERROR_CLASSES.get(code)
    if cls is None:
        return BridgeError(f"[{code}] {message}")
    return cls(message)
