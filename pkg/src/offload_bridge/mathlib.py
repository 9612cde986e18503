"""The built-in linear algebra library.

Routines, as called through RUN on library ``mathlib``:

    gemm(A, B)                  -> [C]                 C = A B
    truncated_svd(A, k[, tol])  -> [U, S, V, converged]
    transpose(A)                -> [A^T]
    condest(A)                  -> [kappa]             sigma_max / sigma_min, m >= n
    random_uniform(m, n, seed)  -> [A]                 entries in [0, 1)

Every routine runs on all ranks of the session's group at once. Matrices are
block-row distributed; short vectors are replicated on every rank. The parameter
orders are documented for wrapper authors in `docs/mathlib.md`.
"""

import functools
import logging
import math
from dataclasses import dataclass

import numpy as np

from .comm import Communicator
from .config import MathlibConfig
from .constants import GEMM_TILE_ROWS, MATHLIB_NAME, ValueTag
from .distmatrix import LayoutDescriptor, LocalBlock
from .errors import ArgumentError, ResourceError, TooLargeError
from .library import LibraryPlugin, MatrixAccessor
from .protocol import F64, Value

logger = logging.getLogger(__name__)

INT_TAGS = (ValueTag.I32, ValueTag.I64)
NUMBER_TAGS = (ValueTag.I32, ValueTag.I64, ValueTag.F64)

# Breakdown threshold of a new basis vector, relative to the largest coefficient seen.
BREAKDOWN_RTOL = 1e-12

# Sign rule: the first component whose magnitude exceeds this fraction of the largest
# one decides the sign of a singular vector.
SIGN_RTOL = 1e-12


def _parse(
    routine: str,
    args: list[Value],
    required: list[tuple[ValueTag, ...]],
    optional: tuple[tuple[ValueTag, ...], ...] = (),
) -> list:
    """Check the argument list of a routine and unwrap it.

    Raises:
        ArgumentError: On a wrong count or a wrong type.
    """
    if not len(required) <= len(args) <= len(required) + len(optional):
        expected = (
            str(len(required))
            if not optional
            else f"{len(required)} to {len(required) + len(optional)}"
        )
        raise ArgumentError(f"{routine} takes {expected} argument(s), got {len(args)}")
    for i, (value, tags) in enumerate(zip(args, [*required, *optional])):
        if value.tag not in tags:
            names = " or ".join(tag.name for tag in tags)
            raise ArgumentError(
                f"Argument {i} of {routine} must be {names}, got {value.tag.name}"
            )
    return [value.data for value in args]


def gemm(
    args: list[Value],
    matrices: MatrixAccessor,
    comm: Communicator,
    config: MathlibConfig,
) -> list[Value]:
    """C = A B with A and C distributed like A's rows.

    Every rank gathers the whole of B (or, above the memory budget, one global panel
    of B rows at a time) and multiplies its rows of A. Rows are multiplied in tiles of
    `GEMM_TILE_ROWS` aligned to global row indices, so the result does not depend on
    the number of workers.
    """
    a, b = _parse("gemm", args, [(ValueTag.MATRIX,), (ValueTag.MATRIX,)])
    if a.cols != b.rows:
        raise ArgumentError(
            f"gemm inner dimensions differ: A is {a.rows}x{a.cols}, B is "
            f"{b.rows}x{b.cols}"
        )
    b_bytes = b.rows * b.cols * F64.itemsize
    budget = config.gemm_memory_budget_bytes
    if b_bytes > budget and not config.gemm_streaming:
        raise ResourceError(
            f"B needs {b_bytes} bytes on every worker, budget is {budget} and "
            "streaming is disabled"
        )

    block_a = matrices.block(a)
    block_b = matrices.block(b)
    layout_b = matrices.layout(b)
    c, block_c = matrices.create(a.rows, b.cols)
    start = block_a.row_range[0]

    if b_bytes <= budget:
        full_b = _allgather_rows(comm, block_b.data, b.cols)
        block_c.data[:] = tiled_matmul(block_a.data, start, full_b)
    else:
        panel_rows = max(1, budget // (b.cols * F64.itemsize))
        logger.debug(f"Streaming B of gemm in panels of {panel_rows} rows")
        block_c.data[:] = 0.0
        for lo in range(0, b.rows, panel_rows):
            hi = min(lo + panel_rows, b.rows)
            panel = _allgather_rows(
                comm, _rows_within(block_b, layout_b, comm.rank, lo, hi), b.cols
            )
            block_c.data += tiled_matmul(block_a.data[:, lo:hi], start, panel)
    block_c.fill_all()
    return [Value.matrix(c)]


def _allgather_rows(comm: Communicator, rows: np.ndarray, n: int) -> np.ndarray:
    """Stack every rank's rows, in rank order."""
    pieces = comm.allgather(np.ascontiguousarray(rows, dtype=F64).tobytes())
    return np.frombuffer(b"".join(pieces), dtype=F64).reshape(-1, n).copy()


def _rows_within(
    block: LocalBlock, layout: LayoutDescriptor, rank: int, lo: int, hi: int
) -> np.ndarray:
    """The local rows whose global index falls in [lo, hi)."""
    start, stop = layout.row_range(rank)
    first, last = max(lo, start), min(hi, stop)
    if first >= last:
        return block.data[:0]
    return block.data[first - start : last - start]


def tiled_matmul(rows: np.ndarray, start_row: int, b: np.ndarray) -> np.ndarray:
    """Multiply rows of a matrix by `b`, in zero padded tiles aligned to global rows.

    Args:
        rows: Consecutive rows of the left operand.
        start_row: Global index of the first row.
        b: The right operand.

    Returns:
        rows @ b.
    """
    count, inner = rows.shape
    b = np.ascontiguousarray(b, dtype=F64)
    out = np.empty((count, b.shape[1]), dtype=F64)
    stop_row = start_row + count
    tile_start = (start_row // GEMM_TILE_ROWS) * GEMM_TILE_ROWS
    for t0 in range(tile_start, stop_row, GEMM_TILE_ROWS):
        lo, hi = max(t0, start_row), min(t0 + GEMM_TILE_ROWS, stop_row)
        padded = np.zeros((GEMM_TILE_ROWS, inner), dtype=F64)
        padded[lo - t0 : hi - t0] = rows[lo - start_row : hi - start_row]
        out[lo - start_row : hi - start_row] = (padded @ b)[lo - t0 : hi - t0]
    return out


def transpose(
    args: list[Value],
    matrices: MatrixAccessor,
    comm: Communicator,
    config: MathlibConfig,
) -> list[Value]:
    """A^T, redistributed with one alltoall.

    Rank q cuts its rows into column slices, one per owner of the transposed rows,
    and every rank stacks the transposed slices it receives in rank order.
    """
    (a,) = _parse("transpose", args, [(ValueTag.MATRIX,)])
    layout = matrices.layout(a)
    block = matrices.block(a)
    at, block_t = matrices.create(a.cols, a.rows)
    out_layout = LayoutDescriptor.block_rows(a.cols, a.rows, comm.size)

    chunks = []
    for r in range(comm.size):
        lo, hi = out_layout.row_range(r)
        chunks.append(np.ascontiguousarray(block.data[:, lo:hi]).tobytes())
    received = comm.alltoall(chunks)

    lo, hi = out_layout.row_range(comm.rank)
    for q, chunk in enumerate(received):
        start, stop = layout.row_range(q)
        piece = np.frombuffer(chunk, dtype=F64).reshape(stop - start, hi - lo)
        block_t.data[:, start:stop] = piece.T
    block_t.fill_all()
    return [Value.matrix(at)]


def condest(
    args: list[Value],
    matrices: MatrixAccessor,
    comm: Communicator,
    config: MathlibConfig,
) -> list[Value]:
    """2-norm condition number from the eigenvalues of the Gram matrix A^T A.

    Squaring limits the accuracy to about kappa(A)^2 times the machine epsilon.
    """
    (a,) = _parse("condest", args, [(ValueTag.MATRIX,)])
    if a.rows < a.cols:
        raise ArgumentError(f"condest needs m >= n, got {a.rows}x{a.cols}")
    if a.cols > config.condest_max_cols:
        raise TooLargeError(
            f"condest forms an n x n Gram matrix; n = {a.cols} exceeds the limit "
            f"of {config.condest_max_cols}"
        )
    block = matrices.block(a)
    local = block.data.T @ block.data
    gram = comm.allreduce_sum(local.ravel()).reshape(a.cols, a.cols)

    kappa = 0.0
    if comm.rank == 0:
        eigenvalues = np.linalg.eigvalsh(gram)
        sigma_max = math.sqrt(max(float(eigenvalues[-1]), 0.0))
        sigma_min = math.sqrt(max(float(eigenvalues[0]), 0.0))
        kappa = math.inf if sigma_min < 1e-300 else sigma_max / sigma_min
    return [Value.f64(comm.broadcast_float(kappa))]


def uniform_rows(seed: int, start: int, stop: int, n: int) -> np.ndarray:
    """Rows [start, stop) of the uniform random matrix with the given seed.

    Row i is drawn from a Philox stream keyed by the seed with counter i, so any
    slice of rows can be generated anywhere and agrees bit for bit.

    >>> bool((uniform_rows(7, 2, 4, 3) == uniform_rows(7, 0, 4, 3)[2:]).all())
    True
    """
    if seed < 0:
        raise ArgumentError(f"Seed must be non-negative, got {seed}")
    out = np.empty((stop - start, n), dtype=F64)
    for row in range(start, stop):
        bit_generator = np.random.Philox(key=seed, counter=[0, 0, 0, row])
        generator = np.random.Generator(bit_generator)
        out[row - start] = generator.random(n)
    return out


def random_uniform(
    args: list[Value],
    matrices: MatrixAccessor,
    comm: Communicator,
    config: MathlibConfig,
) -> list[Value]:
    """An m x n matrix of uniform [0, 1) entries that only depends on the seed."""
    m, n, seed = _parse("random_uniform", args, [INT_TAGS, INT_TAGS, INT_TAGS])
    if m < 1 or n < 1:
        raise ArgumentError(f"Matrix dimensions must be positive, got {m}x{n}")
    handle, block = matrices.create(m, n)
    start, stop = block.row_range
    block.data[:] = uniform_rows(seed, start, stop, n)
    block.fill_all()
    return [Value.matrix(handle)]


@dataclass
class LanczosState:
    """Golub-Kahan-Lanczos basis of one rank.

    The relations A V = U R and A^T U = V R^T + beta v e^T hold for the first `size`
    columns, where v is column `size` of V. R is upper triangular; its off-bidiagonal
    entries hold the reorthogonalization coefficients and, after a restart, the
    coupling of the kept Ritz vectors.

    Args:
        u: Local rows of the left basis, one column per vector.
        v: Right basis, replicated on every rank; one more column than `u`.
        r: The projected matrix.
        beta: Norm of the residual direction v[:, size] before normalization.
        size: Number of completed basis vectors.
    """

    u: np.ndarray
    v: np.ndarray
    r: np.ndarray
    beta: float = 0.0
    size: int = 0


class _Bidiagonalization:
    """Distributed thick-restart Golub-Kahan-Lanczos on one rank."""

    def __init__(
        self,
        block: np.ndarray,
        start_row: int,
        shape: tuple[int, int],
        comm: Communicator,
        seed: int,
    ) -> None:
        self.a = block
        self.start_row = start_row
        self.m, self.n = shape
        self.comm = comm
        self.seed = seed
        self.breakdowns = 0

    def start(self, cap: int) -> LanczosState:
        v = np.zeros((self.n, cap + 1), dtype=F64)
        v0 = np.random.default_rng(self.seed).standard_normal(self.n)
        v[:, 0] = v0 / np.linalg.norm(v0)
        u = np.zeros((self.a.shape[0], cap), dtype=F64)
        return LanczosState(u=u, v=v, r=np.zeros((cap, cap), dtype=F64))

    def _dots(self, basis: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Global inner products of distributed vectors."""
        return self.comm.allreduce_sum(basis.T @ x)

    def _orthogonalize_u(
        self, basis: np.ndarray, w: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, float]:
        """Two passes of classical Gram-Schmidt on a distributed vector.

        Returns:
            The projected vector, the summed projection coefficients and the global
            norm of the projected vector.
        """
        coefficients = np.zeros(basis.shape[1], dtype=F64)
        for _ in range(2):
            if basis.shape[1]:
                c = self._dots(basis, w)
                w = w - basis @ c
                coefficients += c
        norm = math.sqrt(float(self.comm.allreduce_sum(np.array([w @ w]))[0]))
        return w, coefficients, norm

    @staticmethod
    def _orthogonalize_v(basis: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, float]:
        """Two passes of classical Gram-Schmidt on a replicated vector."""
        for _ in range(2):
            z = z - basis @ (basis.T @ z)
        return z, float(np.linalg.norm(z))

    def _random_u(self, basis: np.ndarray, salt: int) -> np.ndarray:
        """A random unit vector orthogonal to `basis`, identical on every layout."""
        stop = self.start_row + self.a.shape[0]
        w = uniform_rows(self.seed + salt, self.start_row, stop, 1)[:, 0] - 0.5
        w, _, norm = self._orthogonalize_u(basis, w)
        return w / norm

    def _random_v(self, basis: np.ndarray, salt: int) -> np.ndarray:
        z = np.random.default_rng([self.seed, salt]).random(self.n) - 0.5
        z, norm = self._orthogonalize_v(basis, z)
        return z / norm

    def step(self, state: LanczosState) -> None:
        """Add one vector to each basis."""
        j = state.size
        scale = max(float(np.abs(state.r).max(initial=0.0)), state.beta)
        basis_u = state.u[:, :j]

        w = self.a @ state.v[:, j]
        w, coefficients, alpha = self._orthogonalize_u(basis_u, w)
        if alpha == 0.0 or alpha <= BREAKDOWN_RTOL * scale:
            self.breakdowns += 1
            state.u[:, j] = self._random_u(basis_u, salt=self.breakdowns)
            alpha = 0.0
        else:
            state.u[:, j] = w / alpha
        state.r[:j, j] = coefficients
        state.r[j, j] = alpha

        basis_v = state.v[:, : j + 1]
        if j + 1 >= self.n:
            state.beta = 0.0
        else:
            z = self.comm.allreduce_sum(self.a.T @ state.u[:, j])
            z, beta = self._orthogonalize_v(basis_v, z)
            if beta == 0.0 or beta <= BREAKDOWN_RTOL * max(scale, alpha):
                self.breakdowns += 1
                state.v[:, j + 1] = self._random_v(basis_v, salt=self.breakdowns)
                beta = 0.0
            else:
                state.v[:, j + 1] = z / beta
            state.beta = beta
        state.size = j + 1

    def ritz(
        self, state: LanczosState
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """SVD of the projected matrix and the residual norm of every Ritz triplet.

        Once the left basis spans all m rows, U^T A V = [R | beta e_j] holds exactly
        for the first j + 1 right vectors, so its SVD gives the singular triplets of A
        with zero residual. `qt` then has one column more than `p` has rows.
        """
        j = state.size
        if j == self.m and state.beta > 0.0:
            projected = np.zeros((j, j + 1), dtype=F64)
            projected[:, :j] = state.r[:j, :j]
            projected[j - 1, j] = state.beta
            p, sigma, qt = np.linalg.svd(projected, full_matrices=False)
            return p, sigma, qt, np.zeros_like(sigma)
        p, sigma, qt = np.linalg.svd(state.r[:j, :j])
        residuals = np.abs(state.beta * p[j - 1, :])
        return p, sigma, qt, residuals

    @staticmethod
    def restart(state: LanczosState, keep: int) -> None:
        """Shrink the basis to the best `keep` Ritz vectors and the residual."""
        j = state.size
        p, sigma, qt = np.linalg.svd(state.r[:j, :j])
        residual_direction = state.v[:, j].copy()
        state.u[:, :keep] = state.u[:, :j] @ p[:, :keep]
        state.v[:, :keep] = state.v[:, :j] @ qt[:keep].T
        state.v[:, keep] = residual_direction
        state.r[:] = 0.0
        state.r[:keep, :keep] = np.diag(sigma[:keep])
        state.size = keep


def _sign_fix(u: np.ndarray, v: np.ndarray) -> None:
    """Make the first significant component of every column of v positive.

    Flips the matching column of u too. `v` must be replicated so that every rank
    decides the same.
    """
    for i in range(v.shape[1]):
        column = v[:, i]
        largest = np.abs(column).max(initial=0.0)
        significant = np.flatnonzero(np.abs(column) > SIGN_RTOL * largest)
        if significant.size and column[significant[0]] < 0:
            v[:, i] *= -1
            u[:, i] *= -1


def basis_cap(k: int, m: int, n: int) -> int:
    """Largest basis of one restart cycle.

    >>> basis_cap(20, 300, 100)
    50
    >>> basis_cap(2, 3, 3)
    3
    """
    return min(max(2 * k + 10, 30), min(m, n))


def truncated_svd(
    args: list[Value],
    matrices: MatrixAccessor,
    comm: Communicator,
    config: MathlibConfig,
) -> list[Value]:
    """The k largest singular triplets by thick-restart Golub-Kahan-Lanczos.

    Products with A use the local block; products with A^T sum the local partial
    products with allreduce. Both bases are fully reorthogonalized. A cycle grows the
    basis to `basis_cap(k, m, n)` vectors, then keeps the best Ritz vectors and grows
    again, for at most `config.max_restarts` restarts. Triplet i has converged when
    |beta p_last,i| <= tol * sigma_1.

    Returns:
        [U (m x k), S (k values, non-increasing), V (n x k), converged].
    """
    a, k, *rest = _parse(
        "truncated_svd", args, [(ValueTag.MATRIX,), INT_TAGS], (NUMBER_TAGS,)
    )
    tol = float(rest[0]) if rest else config.tol
    if not 1 <= k <= min(a.rows, a.cols):
        raise ArgumentError(
            f"k must be between 1 and {min(a.rows, a.cols)} for a {a.rows}x{a.cols} "
            f"matrix, got {k}"
        )
    if tol <= 0:
        raise ArgumentError(f"Tolerance must be positive, got {tol}")

    block = matrices.block(a)
    cap = basis_cap(k, a.rows, a.cols)
    keep = min(cap - 1, k + (cap - k) // 2)
    solver = _Bidiagonalization(
        block.data, block.row_range[0], (a.rows, a.cols), comm, config.svd_seed
    )
    state = solver.start(cap)

    converged = False
    restarts = 0
    while True:
        while state.size < cap:
            solver.step(state)
            if state.size >= k:
                _, sigma, _, residuals = solver.ritz(state)
                if np.all(residuals[:k] <= tol * max(sigma[0], np.finfo(F64).tiny)):
                    converged = True
                    break
        if converged or restarts >= config.max_restarts or keep < 1:
            break
        solver.restart(state, keep)
        restarts += 1

    p, sigma, qt, residuals = solver.ritz(state)
    j = state.size
    u_k = state.u[:, :j] @ p[:, :k]
    v_k = state.v[:, : qt.shape[1]] @ qt[:k].T
    _sign_fix(u_k, v_k)
    if comm.rank == 0:
        logger.info(
            f"truncated_svd k={k}: basis {j}, {restarts} restart(s), "
            f"{solver.breakdowns} breakdown(s), converged={converged}, "
            f"max residual {float(residuals[:k].max()):.3e}"
        )

    u_handle, u_block = matrices.create(a.rows, k)
    u_block.data[:] = u_k
    u_block.fill_all()
    v_handle, v_block = matrices.create(a.cols, k)
    v_start, v_stop = v_block.row_range
    v_block.data[:] = v_k[v_start:v_stop]
    v_block.fill_all()
    return [
        Value.matrix(u_handle),
        Value.f64_array(sigma[:k]),
        Value.matrix(v_handle),
        Value.boolean(converged),
    ]


ROUTINES = {
    "gemm": gemm,
    "truncated_svd": truncated_svd,
    "transpose": transpose,
    "condest": condest,
    "random_uniform": random_uniform,
}


def build_plugin(config: MathlibConfig | None = None) -> LibraryPlugin:
    """The ``mathlib`` plugin with its routines bound to a configuration.

    >>> sorted(build_plugin().routines)
    ['condest', 'gemm', 'random_uniform', 'transpose', 'truncated_svd']
    """
    config = config if config is not None else MathlibConfig()
    return LibraryPlugin(
        name=MATHLIB_NAME,
        routines={
            name: functools.partial(routine, config=config)
            for name, routine in ROUTINES.items()
        },
        description="Dense linear algebra on block-row distributed matrices",
    )
