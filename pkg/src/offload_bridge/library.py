"""Library plugins: named routines the driver dispatches RUN commands to.

A plugin is a name plus a routine table. A routine is called once per rank of the
session's worker group, all ranks at the same time, as

    routine(args, matrices, comm) -> outputs

where `args` are the decoded input values, `matrices` gives the rank access to the
session's matrix blocks and `comm` is the group communicator. Every rank returns the
same outputs; the driver sends rank 0's to the client.
"""

import importlib
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Protocol

from .comm import Communicator
from .distmatrix import LayoutDescriptor, LocalBlock
from .errors import (
    ArgumentError,
    CollectiveError,
    HandleError,
    UnknownLibraryError,
    UnknownRoutineError,
)
from .protocol import MatrixHandle, Value

logger = logging.getLogger(__name__)


class BlockStore(Protocol):
    """The part of a worker a routine context needs."""

    def get_block(self, session_id: int, matrix_id: int) -> LocalBlock:
        """Return a stored block."""
        ...

    def put_block(self, session_id: int, matrix_id: int, block: LocalBlock) -> None:
        """Store a block."""
        ...


class MatrixAccessor(Protocol):
    """What a routine sees of the session's matrices on its rank."""

    @property
    def rank(self) -> int:
        """The rank the accessor belongs to."""
        ...

    def layout(self, handle: MatrixHandle) -> LayoutDescriptor:
        """The layout of an input matrix."""
        ...

    def block(self, handle: MatrixHandle) -> LocalBlock:
        """This rank's block of an input matrix."""
        ...

    def create(self, m: int, n: int) -> tuple[MatrixHandle, LocalBlock]:
        """Allocate an output matrix and return this rank's empty block of it."""
        ...


Routine = Callable[[list[Value], MatrixAccessor, Communicator], list[Value]]


@dataclass
class LibraryPlugin:
    """A named table of routines.

    Args:
        name: The library name clients register.
        routines: Routine name to callable.
        description: Free text shown in logs.
    """

    name: str
    routines: dict[str, Routine] = field(default_factory=dict)
    description: str = ""

    def routine(self, name: str) -> Routine:
        """Look up a routine.

        Raises:
            UnknownRoutineError: If the library has no such routine.
        """
        try:
            return self.routines[name]
        except KeyError:
            raise UnknownRoutineError(
                f"Library {self.name!r} has no routine {name!r}, "
                f"available: {sorted(self.routines)}"
            ) from None


class PluginRegistry:
    """The libraries a server can bind sessions to.

    Plugins are registered at startup. A client's REGISTER_LIBRARY names a library
    and a locator; the locator is matched against the registered keys first, then
    the name.
    """

    def __init__(self) -> None:
        """Initialise an empty registry."""
        self._plugins: dict[str, LibraryPlugin] = {}

    def register(self, plugin: LibraryPlugin, locator: str | None = None) -> None:
        """Register a plugin under its name and, optionally, a locator."""
        self._plugins[plugin.name] = plugin
        if locator:
            self._plugins[locator] = plugin
        logger.info(
            f"Registered library {plugin.name!r} with routines "
            f"{sorted(plugin.routines)}"
        )

    def load(self, path: str) -> LibraryPlugin:
        """Import and register a plugin given as ``module:attribute``.

        The attribute is either a `LibraryPlugin` or a callable returning one. The path
        itself becomes a locator of the plugin.

        Raises:
            UnknownLibraryError: If the path cannot be imported or does not name a
                plugin.
        """
        module_name, _, attribute = path.partition(":")
        if not module_name or not attribute:
            raise UnknownLibraryError(f"Plugin path {path!r} is not 'module:attribute'")
        try:
            obj = getattr(importlib.import_module(module_name), attribute)
        except (ImportError, AttributeError) as exc:
            raise UnknownLibraryError(f"Cannot load plugin {path!r}: {exc}") from exc
        plugin = obj if isinstance(obj, LibraryPlugin) else obj()
        if not isinstance(plugin, LibraryPlugin):
            raise UnknownLibraryError(f"{path!r} did not produce a LibraryPlugin")
        self.register(plugin, locator=path)
        return plugin

    def resolve(self, name: str, locator: str = "") -> LibraryPlugin:
        """Find the plugin a client asks for.

        Raises:
            UnknownLibraryError: If neither the locator nor the name is registered.
        """
        plugin = self._plugins.get(locator) or self._plugins.get(name)
        if plugin is None:
            raise UnknownLibraryError(
                f"No library {name!r} (locator {locator!r}) is available on this server"
            )
        return plugin

    def names(self) -> list[str]:
        """The distinct plugin names."""
        return sorted({plugin.name for plugin in self._plugins.values()})


class RoutineContext:
    """State shared by the ranks of one RUN.

    Output matrices are numbered by the order in which a rank creates them, so the
    i-th `create` on every rank gets the same handle.

    Args:
        session_id: The session running the routine.
        members: Worker stores of the group, in rank order.
        group_id: The worker group.
        handles: The session's complete matrices.
        next_id: Callable returning the next free matrix id of the session.
    """

    def __init__(
        self,
        session_id: int,
        members: list[BlockStore],
        group_id: int,
        handles: dict[int, tuple[MatrixHandle, LayoutDescriptor]],
        next_id: Callable[[], int],
    ) -> None:
        """Initialise the context."""
        self.session_id = session_id
        self.members = members
        self.group_id = group_id
        self.handles = handles
        self._next_id = next_id
        self._lock = threading.Lock()
        self.outputs: list[tuple[MatrixHandle, LayoutDescriptor]] = []
        self.closed = False

    def accessor(self, rank: int) -> "RankAccessor":
        """The matrix accessor of one rank."""
        return RankAccessor(self, rank)

    def output(
        self, index: int, m: int, n: int
    ) -> tuple[MatrixHandle, LayoutDescriptor]:
        """The `index`-th output matrix, allocated by the first rank asking for it."""
        with self._lock:
            if index == len(self.outputs):
                layout = LayoutDescriptor.block_rows(
                    m, n, len(self.members), self.group_id
                )
                handle = MatrixHandle(self._next_id(), m, n, self.session_id)
                self.outputs.append((handle, layout))
            handle, layout = self.outputs[index]
        if (handle.rows, handle.cols) != (m, n):
            raise CollectiveError(
                f"Ranks disagree on output {index}: {handle.rows}x{handle.cols} "
                f"vs {m}x{n}"
            )
        return handle, layout


class RankAccessor:
    """`MatrixAccessor` backed by a `RoutineContext`."""

    def __init__(self, context: RoutineContext, rank: int) -> None:
        """Initialise the accessor."""
        self._context = context
        self._rank = rank
        self._created = 0

    @property
    def rank(self) -> int:
        """The rank the accessor belongs to."""
        return self._rank

    def _check_open(self) -> None:
        if self._context.closed:
            raise HandleError("Matrix access after the routine returned")

    def layout(self, handle: MatrixHandle) -> LayoutDescriptor:
        """The layout of an input matrix.

        Raises:
            HandleError: If the handle is not a matrix of the session.
        """
        self._check_open()
        entry = self._context.handles.get(handle.id)
        if entry is None:
            for output, layout in self._context.outputs:
                if output.id == handle.id:
                    return layout
            raise HandleError(f"Matrix {handle.id} does not exist in this session")
        return entry[1]

    def block(self, handle: MatrixHandle) -> LocalBlock:
        """This rank's block of a matrix."""
        self.layout(handle)
        member = self._context.members[self._rank]
        return member.get_block(self._context.session_id, handle.id)

    def create(self, m: int, n: int) -> tuple[MatrixHandle, LocalBlock]:
        """Allocate an output matrix; the routine must fill and `fill_all` the block."""
        self._check_open()
        if m < 1 or n < 1:
            raise ArgumentError(f"Output matrix must be at least 1x1, got {m}x{n}")
        handle, layout = self._context.output(self._created, m, n)
        self._created += 1
        block = LocalBlock.allocate(layout.row_range(self._rank), n)
        self._context.members[self._rank].put_block(
            self._context.session_id, handle.id, block
        )
        return handle, block
