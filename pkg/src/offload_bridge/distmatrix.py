"""Block-row distributed dense matrices.

Worker rank r of a group of p owns the contiguous global rows
[floor(r*m/p), floor((r+1)*m/p)). Client and server compute the same boundaries, so
row batches are routed to their owner without any directory service.
"""

import bisect
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .comm import Communicator
from .constants import DEFAULT_GATHER_LIMIT_BYTES
from .errors import ArgumentError, NotReadyError, RoutingError, TooLargeError
from .protocol import F64, MatrixHandle, RowBatch

logger = logging.getLogger(__name__)

__all__ = [
    "MatrixHandle",
    "LayoutDescriptor",
    "LocalBlock",
    "partition",
    "owner_of_row",
    "write_rows",
    "read_rows",
    "gather_to_dense",
    "row_runs",
    "count_messages",
]


def partition(m: int, p: int) -> tuple[int, ...]:
    """Row boundaries of the block-row layout.

    Args:
        m: Number of rows.
        p: Number of workers.

    Returns:
        The p + 1 boundaries, boundaries[r] = floor(r * m / p).

    Raises:
        ArgumentError: If p or m is smaller than 1.

    >>> partition(10, 3)
    (0, 3, 6, 10)
    >>> partition(7, 2)
    (0, 3, 7)
    """
    if p < 1:
        raise ArgumentError(f"Worker count must be at least 1, got {p}")
    if m < 1:
        raise ArgumentError(f"Row count must be at least 1, got {m}")
    return tuple((r * m) // p for r in range(p + 1))


@dataclass(frozen=True)
class LayoutDescriptor:
    """Where the rows of a matrix live.

    Args:
        m: Number of rows.
        n: Number of columns.
        boundaries: The p + 1 row boundaries.
        group_id: The worker group holding the matrix.
    """

    m: int
    n: int
    boundaries: tuple[int, ...]
    group_id: int = 0

    def __post_init__(self) -> None:
        """Check the boundaries."""
        b = self.boundaries
        if len(b) < 2 or b[0] != 0 or b[-1] != self.m:
            raise ArgumentError(f"Boundaries {b} do not span {self.m} rows")
        if any(lo > hi for lo, hi in zip(b, b[1:])):
            raise ArgumentError(f"Boundaries {b} are not non-decreasing")

    @classmethod
    def block_rows(
        cls, m: int, n: int, p: int, group_id: int = 0
    ) -> "LayoutDescriptor":
        """The standard layout of an m x n matrix over p workers."""
        if n < 1:
            raise ArgumentError(f"Column count must be at least 1, got {n}")
        return cls(m, n, partition(m, p), group_id)

    @property
    def p(self) -> int:
        """Number of workers."""
        return len(self.boundaries) - 1

    def row_range(self, rank: int) -> tuple[int, int]:
        """The global rows [start, stop) owned by `rank`."""
        return self.boundaries[rank], self.boundaries[rank + 1]

    def rows_of(self, rank: int) -> int:
        """Number of rows owned by `rank`."""
        start, stop = self.row_range(rank)
        return stop - start


def owner_of_row(layout: LayoutDescriptor, i: int) -> int:
    """The rank owning global row `i`.

    Raises:
        ArgumentError: If `i` is outside the matrix.

    >>> owner_of_row(LayoutDescriptor.block_rows(10, 1, 3), 5)
    1
    """
    if not 0 <= i < layout.m:
        raise ArgumentError(f"Row {i} out of range for a matrix with {layout.m} rows")
    return bisect.bisect_right(layout.boundaries, i) - 1


@dataclass
class LocalBlock:
    """The rows of a matrix stored on one worker.

    Args:
        row_range: The owned global rows [start, stop).
        n: Number of columns.
        data: The (stop - start) x n row-major values.
        fill_mask: Which local rows have been written.
    """

    row_range: tuple[int, int]
    n: int
    data: np.ndarray
    fill_mask: np.ndarray = field(repr=False)

    @classmethod
    def allocate(cls, row_range: tuple[int, int], n: int) -> "LocalBlock":
        """An empty block for the given rows."""
        rows = row_range[1] - row_range[0]
        return cls(
            row_range=row_range,
            n=n,
            data=np.empty((rows, n), dtype=F64),
            fill_mask=np.zeros(rows, dtype=bool),
        )

    @classmethod
    def from_array(cls, start_row: int, data: np.ndarray) -> "LocalBlock":
        """A complete block holding `data`, starting at global row `start_row`."""
        data = np.ascontiguousarray(data, dtype=F64)
        rows = data.shape[0]
        return cls(
            row_range=(start_row, start_row + rows),
            n=data.shape[1],
            data=data,
            fill_mask=np.ones(rows, dtype=bool),
        )

    @property
    def num_rows(self) -> int:
        """Number of owned rows."""
        return self.row_range[1] - self.row_range[0]

    @property
    def nbytes(self) -> int:
        """Bytes of matrix data held by this block."""
        return int(self.data.nbytes)

    @property
    def is_complete(self) -> bool:
        """Whether every owned row has been written."""
        return bool(self.fill_mask.all())

    def fill_all(self) -> None:
        """Mark every row written, for blocks filled directly by a routine."""
        self.fill_mask[:] = True

    def missing_ranges(self) -> list[tuple[int, int]]:
        """The unwritten global row ranges, as [start, stop) pairs.

        >>> block = LocalBlock.allocate((0, 10), 1)
        >>> block.fill_mask[:7] = True
        >>> block.missing_ranges()
        [(7, 10)]
        """
        missing = np.flatnonzero(~self.fill_mask)
        if missing.size == 0:
            return []
        breaks = np.flatnonzero(np.diff(missing) != 1) + 1
        offset = self.row_range[0]
        return [
            (int(run[0]) + offset, int(run[-1]) + 1 + offset)
            for run in np.split(missing, breaks)
        ]


def write_rows(block: LocalBlock, batch: RowBatch) -> None:
    """Store a batch of rows in the block.

    Raises:
        ArgumentError: If the row length differs from the matrix.
        RoutingError: If any row of the batch is not owned by the block.
    """
    if batch.num_cols != block.n:
        raise ArgumentError(
            f"Rows of length {batch.num_cols} sent to a matrix with {block.n} columns"
        )
    start, stop = block.row_range
    if batch.start_row < start or batch.stop_row > stop:
        raise RoutingError(
            f"Rows [{batch.start_row}, {batch.stop_row}) sent to the owner of "
            f"[{start}, {stop})"
        )
    lo, hi = batch.start_row - start, batch.stop_row - start
    block.data[lo:hi] = batch.array()
    block.fill_mask[lo:hi] = True


def read_rows(
    block: LocalBlock, matrix_id: int, start_row: int, num_rows: int
) -> RowBatch:
    """Copy rows out of a complete block.

    Raises:
        NotReadyError: If the block is incomplete.
        RoutingError: If the range is not owned by the block.
    """
    if not block.is_complete:
        raise NotReadyError(
            f"Matrix {matrix_id} is incomplete, missing rows {block.missing_ranges()}"
        )
    start, stop = block.row_range
    if start_row < start or start_row + num_rows > stop:
        raise RoutingError(
            f"Rows [{start_row}, {start_row + num_rows}) requested from the owner of "
            f"[{start}, {stop})"
        )
    lo = start_row - start
    return RowBatch.from_array(matrix_id, start_row, block.data[lo : lo + num_rows])


def gather_to_dense(
    comm: Communicator,
    block: LocalBlock,
    layout: LayoutDescriptor,
    root: int = 0,
    limit_bytes: int | None = DEFAULT_GATHER_LIMIT_BYTES,
) -> np.ndarray | None:
    """Assemble the full matrix at one rank (collective).

    Args:
        comm: The group communicator.
        block: This rank's block.
        layout: The matrix layout.
        root: The rank receiving the matrix.
        limit_bytes: Refuse matrices larger than this.

    Returns:
        The m x n matrix at the root, None elsewhere.

    Raises:
        TooLargeError: If the matrix exceeds the size guard (on every rank).
        NotReadyError: If the block is incomplete.
    """
    total = layout.m * layout.n * F64.itemsize
    if limit_bytes is not None and total > limit_bytes:
        raise TooLargeError(
            f"Gathering {layout.m}x{layout.n} needs {total} bytes, "
            f"limit is {limit_bytes}"
        )
    if not block.is_complete:
        raise NotReadyError(f"Block {block.row_range} is incomplete")
    pieces = comm.gather(block.data.tobytes(), root=root)
    if pieces is None:
        return None
    dense = np.frombuffer(b"".join(pieces), dtype=F64).reshape(layout.m, layout.n)
    return dense.copy()


def row_runs(
    indices: np.ndarray, layout: LayoutDescriptor
) -> dict[int, list[tuple[int, int, int]]]:
    """Split sorted global row indices into runs sent to one owner each.

    A run is a maximal sequence of consecutive global rows with the same owner.

    Args:
        indices: Sorted, unique global row indices held by a client process.
        layout: The matrix layout.

    Returns:
        For each owning rank, the runs as (position in `indices`, first global row,
        number of rows).

    >>> row_runs(np.array([0, 1, 2, 3, 5]), LayoutDescriptor.block_rows(6, 1, 2))
    {0: [(0, 0, 3)], 1: [(3, 3, 1), (4, 5, 1)]}
    """
    indices = np.asarray(indices, dtype=np.int64)
    runs: dict[int, list[tuple[int, int, int]]] = {}
    if indices.size == 0:
        return runs
    owners = np.searchsorted(np.asarray(layout.boundaries), indices, side="right") - 1
    breaks = np.flatnonzero((np.diff(indices) != 1) | (np.diff(owners) != 0)) + 1
    starts = np.concatenate(([0], breaks))
    stops = np.concatenate((breaks, [indices.size]))
    for lo, hi in zip(starts.tolist(), stops.tolist()):
        runs.setdefault(int(owners[lo]), []).append((lo, int(indices[lo]), hi - lo))
    return runs


def count_messages(
    indices: np.ndarray, layout: LayoutDescriptor, rows_per_batch: int
) -> dict[int, int]:
    """Number of SEND_ROWS frames a client process sends to each owner.

    Every owned run of rows is split into batches of at most `rows_per_batch` rows.

    >>> count_messages(np.arange(10), LayoutDescriptor.block_rows(10, 1, 3), 2)
    {0: 2, 1: 2, 2: 2}
    """
    return {
        rank: sum(math.ceil(count / rows_per_batch) for _, _, count in runs)
        for rank, runs in row_runs(indices, layout).items()
    }
