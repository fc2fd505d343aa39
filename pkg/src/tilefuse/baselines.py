"""Prior-art fusion strategies used as comparison points.

Overlapped tiling gives every partition private copies of all the
first-product rows it needs, so partitions never synchronize but some rows
are computed more than once. Atomic tiling partitions the first product
and lets each tile push its contributions into whichever output rows they
belong to; rows reached by more than one tile in a wavefront are
accumulated under a lock.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .kernels import ExecStats, FusedProblem, _spmm_mapped, _spmm_slices, run_wavefront
from .matrix import SparseMatrixCSR


# --------------------------------------------------------------------------- overlapped

@dataclass
class OverlappedTile:
    j_lo: int
    j_hi: int
    needed_i: np.ndarray


@dataclass
class OverlappedSchedule:
    tiles: list[OverlappedTile]
    n: int

    @property
    def first_rows(self) -> int:
        return int(sum(len(t.needed_i) for t in self.tiles))

    @property
    def replicated(self) -> int:
        """First-product rows computed more than once, counted with multiplicity."""
        return self.first_rows - self.n


def build_overlapped(A: SparseMatrixCSR, num_partitions: int) -> OverlappedSchedule:
    """Equal contiguous partitions; each owns its rows of both products plus every dependency."""
    if not A.is_square:
        raise ValueError("A must be square")
    n = A.n_rows
    if not 1 <= num_partitions <= max(n, 1):
        raise ValueError(f"num_partitions must be in [1, {n}]")
    edges = np.linspace(0, n, num_partitions + 1).astype(np.int64)
    tiles = []
    for k in range(num_partitions):
        lo, hi = int(edges[k]), int(edges[k + 1])
        deps = A.col_idx[A.row_ptr[lo]:A.row_ptr[hi]]
        needed = np.union1d(np.arange(lo, hi, dtype=np.int64), deps.astype(np.int64))
        tiles.append(OverlappedTile(lo, hi, needed))
    return OverlappedSchedule(tiles, n)


def run_overlapped(problem: FusedProblem, sched: OverlappedSchedule, workers: int = 1,
                   stats: ExecStats | None = None) -> np.ndarray:
    """One parallel phase: each tile fills private scratch for ``needed_i``, then its own ``D`` rows."""
    if sched.n != problem.n:
        raise ValueError(f"schedule is for n={sched.n}, problem has n={problem.n}")
    c_col = problem.c_col
    D = np.empty((problem.n, c_col), dtype=problem.dtype)
    A = problem.A

    def tile_fn(tile: OverlappedTile):
        scratch = np.empty((len(tile.needed_i), c_col), dtype=problem.dtype)
        problem.first_gather(tile.needed_i, scratch)
        _spmm_mapped(A.row_ptr, A.col_idx, A.values, scratch, tile.needed_i, D, tile.j_lo, tile.j_hi)
        if stats is not None:
            stats.add(first_rows=len(tile.needed_i), second_rows=tile.j_hi - tile.j_lo)

    run_wavefront(tile_fn, sched.tiles, workers)
    return D


# --------------------------------------------------------------------------- atomic

@dataclass
class AtomicTile:
    i_lo: int
    i_hi: int
    # row j of A with its nonzero sub-range [nz_lo, nz_hi) whose columns fall in [i_lo, i_hi)
    rows: np.ndarray
    nz_lo: np.ndarray
    nz_hi: np.ndarray
    shared: np.ndarray = field(default=None)  # rows also touched by another tile of the wavefront


@dataclass
class AtomicSchedule:
    wavefronts: list[list[AtomicTile]]
    n: int

    @property
    def contended_rows(self) -> int:
        return int(sum(int(t.shared.sum()) for wf in self.wavefronts for t in wf))


def build_atomic(A: SparseMatrixCSR, num_tiles: int,
                 tiles_per_wavefront: int | None = None) -> AtomicSchedule:
    """Partition the first product into equal tiles and split ``A``'s rows among them by column.

    Every nonzero ``(j, c)`` lands in the tile whose range holds ``c``, so a
    row of the second product may be spread across several tiles. Tiles are
    grouped into wavefronts of ``tiles_per_wavefront`` (one wavefront by
    default).
    """
    if not A.is_square:
        raise ValueError("A must be square")
    n = A.n_rows
    if num_tiles < 1:
        raise ValueError("num_tiles must be >= 1")
    num_tiles = min(num_tiles, max(n, 1))
    per_wf = tiles_per_wavefront or num_tiles
    edges = np.linspace(0, n, num_tiles + 1).astype(np.int64)

    rows_of_nz = np.repeat(np.arange(n, dtype=np.int64), A.row_nnz())
    tile_of_nz = np.searchsorted(edges, A.col_idx, side="right") - 1
    # columns ascend within a row, so (tile, row) runs are contiguous sub-ranges of each row
    key = tile_of_nz * max(n, 1) + rows_of_nz
    order = np.argsort(key, kind="stable")
    skey = key[order]
    starts = np.flatnonzero(np.r_[True, skey[1:] != skey[:-1]]) if len(skey) else np.empty(0, np.int64)
    ends = np.r_[starts[1:], len(skey)]
    run_tile = skey[starts] // max(n, 1)
    run_row = skey[starts] % max(n, 1)
    run_lo = order[starts]
    run_hi = order[ends - 1] + 1

    tiles = []
    for k in range(num_tiles):
        sel = run_tile == k
        tiles.append(AtomicTile(int(edges[k]), int(edges[k + 1]), run_row[sel],
                                run_lo[sel].astype(np.int64), run_hi[sel].astype(np.int64)))
    wavefronts = [tiles[s:s + per_wf] for s in range(0, num_tiles, per_wf)]
    for wf in wavefronts:
        touch = np.zeros(n, dtype=np.int64)
        for t in wf:
            touch[t.rows] += 1
        for t in wf:
            t.shared = touch[t.rows] > 1
    return AtomicSchedule(wavefronts, n)


def run_atomic(problem: FusedProblem, sched: AtomicSchedule, workers: int = 1,
               stats: ExecStats | None = None) -> np.ndarray:
    """Each tile computes its ``D1`` rows then scatters partial products into ``D``.

    Rows private to one tile are added directly; rows shared within a
    wavefront are committed under a lock, which stands in for per-element
    atomic adds. Accumulation order across tiles is not fixed.
    """
    if sched.n != problem.n:
        raise ValueError(f"schedule is for n={sched.n}, problem has n={problem.n}")
    n, c_col = problem.n, problem.c_col
    D1 = np.empty((n, c_col), dtype=problem.dtype)
    D = np.zeros((n, c_col), dtype=problem.dtype)
    A = problem.A
    commit = threading.Lock()

    def tile_fn(tile: AtomicTile):
        if tile.i_hi > tile.i_lo:
            problem.first_range(D1, tile.i_lo, tile.i_hi)
        if len(tile.rows):
            part = np.empty((len(tile.rows), c_col), dtype=problem.dtype)
            _spmm_slices(A.col_idx, A.values, D1, tile.nz_lo, tile.nz_hi, part)
            own = ~tile.shared
            D[tile.rows[own]] += part[own]
            if tile.shared.any():
                with commit:
                    D[tile.rows[tile.shared]] += part[tile.shared]
        if stats is not None:
            stats.add(first_rows=tile.i_hi - tile.i_lo,
                      nnz_work=int((tile.nz_hi - tile.nz_lo).sum()),
                      contended_rows=int(tile.shared.sum()))

    for wf in sched.wavefronts:
        run_wavefront(tile_fn, wf, workers)
    return D
