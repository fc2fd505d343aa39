"""Row kernels and the fused/unfused executors for ``D = A (B C)``.

All inner loops run ``c_col`` innermost over contiguous row-major rows and
accumulate in ascending nonzero order, so a row's result does not depend on
which thread computes it or when. Kernels are compiled with numba and
release the GIL; parallelism comes from a plain thread pool that executes
independent tiles, with ``pool.map`` completion acting as the barrier.
"""
from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from .matrix import SparseMatrixCSR, resolve_dtype


# --------------------------------------------------------------------------- numba kernels

@numba.njit(cache=True, nogil=True)
def _gemm_range(B, C, D1, lo, hi):
    b_col = B.shape[1]
    c_col = C.shape[1]
    for i in range(lo, hi):
        out = D1[i]
        for k in range(c_col):
            out[k] = 0.0
        for m in range(b_col):
            b = B[i, m]
            crow = C[m]
            for k in range(c_col):
                out[k] += b * crow[k]


@numba.njit(cache=True, nogil=True)
def _gemm_gather(B, C, rows, out):
    b_col = B.shape[1]
    c_col = C.shape[1]
    for r in range(rows.shape[0]):
        i = rows[r]
        o = out[r]
        for k in range(c_col):
            o[k] = 0.0
        for m in range(b_col):
            b = B[i, m]
            crow = C[m]
            for k in range(c_col):
                o[k] += b * crow[k]


@numba.njit(cache=True, nogil=True)
def _spmm_range(row_ptr, col_idx, vals, X, D, lo, hi):
    c_col = X.shape[1]
    for j in range(lo, hi):
        out = D[j]
        for k in range(c_col):
            out[k] = 0.0
        for q in range(row_ptr[j], row_ptr[j + 1]):
            a = vals[q]
            xrow = X[col_idx[q]]
            for k in range(c_col):
                out[k] += a * xrow[k]


@numba.njit(cache=True, nogil=True)
def _spmm_list(row_ptr, col_idx, vals, X, D, rows):
    c_col = X.shape[1]
    for r in range(rows.shape[0]):
        j = rows[r]
        out = D[j]
        for k in range(c_col):
            out[k] = 0.0
        for q in range(row_ptr[j], row_ptr[j + 1]):
            a = vals[q]
            xrow = X[col_idx[q]]
            for k in range(c_col):
                out[k] += a * xrow[k]


@numba.njit(cache=True, nogil=True)
def _spmm_local(row_ptr, col_idx, vals, S, offset, D, rows):
    # S holds rows [offset, offset + len(S)) of the first product; returns the
    # first row that reads outside that window, or -1
    c_col = S.shape[1]
    width = S.shape[0]
    for r in range(rows.shape[0]):
        j = rows[r]
        out = D[j]
        for k in range(c_col):
            out[k] = 0.0
        for q in range(row_ptr[j], row_ptr[j + 1]):
            c = col_idx[q] - offset
            if c < 0 or c >= width:
                return j
            a = vals[q]
            srow = S[c]
            for k in range(c_col):
                out[k] += a * srow[k]
    return -1


@numba.njit(cache=True, nogil=True)
def _mark_in_edges(row_ptr, col_idx, rows, mask):
    for r in range(rows.shape[0]):
        j = rows[r]
        for q in range(row_ptr[j], row_ptr[j + 1]):
            mask[col_idx[q]] = True


@numba.njit(cache=True, nogil=True)
def _spmm_gather(row_ptr, col_idx, vals, X, rows, out):
    c_col = X.shape[1]
    for r in range(rows.shape[0]):
        j = rows[r]
        o = out[r]
        for k in range(c_col):
            o[k] = 0.0
        for q in range(row_ptr[j], row_ptr[j + 1]):
            a = vals[q]
            xrow = X[col_idx[q]]
            for k in range(c_col):
                o[k] += a * xrow[k]


@numba.njit(cache=True, nogil=True)
def _spmm_mapped(row_ptr, col_idx, vals, scratch, needed, D, lo, hi):
    # rows of the first product live in scratch at the position of their index in `needed`
    c_col = scratch.shape[1]
    for j in range(lo, hi):
        out = D[j]
        for k in range(c_col):
            out[k] = 0.0
        for q in range(row_ptr[j], row_ptr[j + 1]):
            a = vals[q]
            pos = np.searchsorted(needed, col_idx[q])
            srow = scratch[pos]
            for k in range(c_col):
                out[k] += a * srow[k]


@numba.njit(cache=True, nogil=True)
def _spmm_slices(col_idx, vals, X, s_lo, s_hi, out):
    c_col = X.shape[1]
    for r in range(s_lo.shape[0]):
        o = out[r]
        for k in range(c_col):
            o[k] = 0.0
        for q in range(s_lo[r], s_hi[r]):
            a = vals[q]
            xrow = X[col_idx[q]]
            for k in range(c_col):
                o[k] += a * xrow[k]


# --------------------------------------------------------------------------- problem

@dataclass(eq=False)
class FusedProblem:
    """Operands of ``D = A (B C)``.

    ``B`` is a dense ``n x b_col`` array (GeMM-SpMM) or a
    :class:`SparseMatrixCSR` (SpMM-SpMM, commonly ``B = A``). All operands
    must share one scalar type; use :meth:`create` to cast.
    """

    A: SparseMatrixCSR
    B: "np.ndarray | SparseMatrixCSR"
    C: np.ndarray

    def __post_init__(self):
        if not self.A.is_square:
            raise ValueError(f"A must be square, got {self.A.n_rows}x{self.A.n_cols}")
        n = self.A.n_rows
        b_rows, b_col = self.B.shape
        if b_rows != n:
            raise ValueError(f"B has {b_rows} rows, A needs {n}")
        if self.C.ndim != 2 or self.C.shape[0] != b_col:
            raise ValueError(f"C must be {b_col} x c_col, got {self.C.shape}")
        dts = {self.A.dtype, self.B.dtype, self.C.dtype}
        if len(dts) != 1:
            raise ValueError(f"operands mix precisions: {sorted(str(d) for d in dts)}")
        resolve_dtype(self.C.dtype)
        if not self.b_sparse:
            self.B = np.ascontiguousarray(self.B)
        self.C = np.ascontiguousarray(self.C)

    @classmethod
    def create(cls, A, B, C, precision="double") -> "FusedProblem":
        dt = resolve_dtype(precision)
        A = A.astype(dt)
        B = B.astype(dt) if isinstance(B, SparseMatrixCSR) else np.ascontiguousarray(B, dtype=dt)
        return cls(A, B, np.ascontiguousarray(C, dtype=dt))

    @property
    def n(self) -> int:
        return self.A.n_rows

    @property
    def b_sparse(self) -> bool:
        return isinstance(self.B, SparseMatrixCSR)

    @property
    def b_col(self) -> int:
        return self.B.shape[1]

    @property
    def c_col(self) -> int:
        return self.C.shape[1]

    @property
    def dtype(self) -> np.dtype:
        return self.C.dtype

    @property
    def op(self) -> str:
        return "spmm-spmm" if self.b_sparse else "gemm-spmm"

    def first_range(self, D1, lo, hi):
        """Rows ``[lo, hi)`` of ``D1 = B C``."""
        if self.b_sparse:
            B = self.B
            _spmm_range(B.row_ptr, B.col_idx, B.values, self.C, D1, lo, hi)
        else:
            _gemm_range(self.B, self.C, D1, lo, hi)

    def first_block(self, lo, hi, out):
        """Rows ``[lo, hi)`` of ``B C`` into ``out[0:hi-lo]``."""
        if self.b_sparse:
            B = self.B
            _spmm_range(B.row_ptr[lo:hi + 1], B.col_idx, B.values, self.C, out, 0, hi - lo)
        else:
            _gemm_range(self.B[lo:hi], self.C, out, 0, hi - lo)

    def first_gather(self, rows, out):
        """``out[k] = (B C)[rows[k]]``."""
        if self.b_sparse:
            B = self.B
            _spmm_gather(B.row_ptr, B.col_idx, B.values, self.C, rows, out)
        else:
            _gemm_gather(self.B, self.C, rows, out)

    def second_rows(self, D1, D, rows):
        A = self.A
        _spmm_list(A.row_ptr, A.col_idx, A.values, D1, D, rows)

    def second_range(self, D1, D, lo, hi):
        A = self.A
        _spmm_range(A.row_ptr, A.col_idx, A.values, D1, D, lo, hi)


@dataclass
class ExecStats:
    """Work counters filled in by executors when passed in."""

    first_rows: int = 0
    second_rows: int = 0
    nnz_work: int = 0
    contended_rows: int = 0
    epoch_violations: int = 0

    def __post_init__(self):
        self._lock = threading.Lock()

    def add(self, **kw):
        with self._lock:
            for k, v in kw.items():
                setattr(self, k, getattr(self, k) + v)


# --------------------------------------------------------------------------- thread pool

_pools: dict[int, ThreadPoolExecutor] = {}
_pools_lock = threading.Lock()
_binding = {"mode": "none"}


def _pin_worker(counter=iter(range(1 << 30)), lock=threading.Lock()):
    # close binding: worker k -> k-th allowed cpu, wrapping around
    if not hasattr(os, "sched_setaffinity"):
        return
    with lock:
        k = next(counter)
    try:
        cpus = sorted(os.sched_getaffinity(0))
        os.sched_setaffinity(0, {cpus[k % len(cpus)]})
        _binding["mode"] = "close"
    except OSError:
        pass


def get_pool(workers: int) -> ThreadPoolExecutor:
    with _pools_lock:
        pool = _pools.get(workers)
        if pool is None:
            pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix=f"tilefuse{workers}",
                                      initializer=_pin_worker)
            _pools[workers] = pool
        return pool


def thread_binding() -> str:
    """``'close'`` once worker threads have been pinned, else ``'none'``."""
    return _binding["mode"]


def run_wavefront(fn, items, workers: int) -> None:
    """Run ``fn`` on every item; returns once all are done (the barrier).

    Each worker takes one contiguous block of items, so neighbouring tiles
    stay on the same thread and the pool sees ``workers`` tasks rather than
    one per tile.
    """
    if workers <= 1 or len(items) <= 1:
        for it in items:
            fn(it)
        return

    def block(bounds):
        for it in items[bounds[0]:bounds[1]]:
            fn(it)

    for _ in get_pool(workers).map(block, _chunks(len(items), workers)):
        pass


def default_workers() -> int:
    env = os.environ.get("TILEFUSE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _chunks(n: int, parts: int) -> list[tuple[int, int]]:
    parts = max(1, min(parts, n)) if n else 1
    edges = np.linspace(0, n, parts + 1).astype(np.int64)
    return [(int(edges[k]), int(edges[k + 1])) for k in range(parts)]


# --------------------------------------------------------------------------- public kernels

def gemm(B: np.ndarray, C: np.ndarray, row_range=None, out=None) -> np.ndarray:
    """Rows of ``B @ C`` (all rows by default); written into ``out`` when given."""
    if B.shape[1] != C.shape[0]:
        raise ValueError(f"cannot multiply {B.shape} by {C.shape}")
    B = np.ascontiguousarray(B)
    C = np.ascontiguousarray(C, dtype=B.dtype)
    lo, hi = row_range if row_range is not None else (0, B.shape[0])
    if out is None:
        out = np.zeros((B.shape[0], C.shape[1]), dtype=B.dtype)
    _gemm_range(B, C, out, lo, hi)
    return out


def spmm(A: SparseMatrixCSR, X: np.ndarray, j_list=None, out=None) -> np.ndarray:
    """Rows ``j_list`` of ``A @ X`` (all rows by default)."""
    if A.n_cols != X.shape[0]:
        raise ValueError(f"cannot multiply {A.shape} by {X.shape}")
    X = np.ascontiguousarray(X, dtype=A.dtype)
    if out is None:
        out = np.zeros((A.n_rows, X.shape[1]), dtype=A.dtype)
    if j_list is None:
        _spmm_range(A.row_ptr, A.col_idx, A.values, X, out, 0, A.n_rows)
    else:
        _spmm_list(A.row_ptr, A.col_idx, A.values, X, out, np.asarray(j_list, dtype=np.int64))
    return out


# --------------------------------------------------------------------------- executors

def _check_schedule(problem: FusedProblem, schedule):
    if schedule.n != problem.n:
        raise ValueError(f"schedule is for n={schedule.n}, problem has n={problem.n}")


_scratch = threading.local()


def _scratch_rows(rows: int, cols: int, dtype) -> np.ndarray:
    # per-thread tile buffer, reused across calls so it stays cache resident
    buf = getattr(_scratch, "buf", None)
    if buf is None or buf.shape[0] < rows or buf.shape[1] != cols or buf.dtype != dtype:
        buf = np.empty((max(rows, 1), cols), dtype=dtype)
        _scratch.buf = buf
    return buf[:rows]


@dataclass(eq=False)
class FusedPlan:
    """Executor-side data derived once from a schedule.

    ``keep[k]`` lists, relative to ``i_lo``, the first-product rows of the
    k-th wavefront-0 tile that later wavefronts read. Only those rows are
    written to the shared ``D1``; the rest live in a per-thread scratch tile.
    """

    schedule: object
    keep: list


def prepare_fused(A: SparseMatrixCSR, schedule) -> FusedPlan:
    """Mark which wavefront-0 rows of ``D1`` must outlive their tile."""
    mask = np.zeros(A.n_rows, dtype=np.bool_)
    for wf in schedule.wavefronts[1:]:
        for tile in wf:
            if len(tile.j_list):
                _mark_in_edges(A.row_ptr, A.col_idx, np.asarray(tile.j_list, dtype=np.int64), mask)
    first = schedule.wavefronts[0] if schedule.wavefronts else []
    keep = [np.flatnonzero(mask[t.i_lo:t.i_hi]) for t in first]
    return FusedPlan(schedule, keep)


def _run_fused(problem: FusedProblem, schedule, workers: int, stats: ExecStats | None,
               debug: bool, plan: FusedPlan | None) -> np.ndarray:
    _check_schedule(problem, schedule)
    if plan is None:
        plan = prepare_fused(problem.A, schedule)
    elif plan.schedule is not schedule:
        raise ValueError("plan was prepared for a different schedule")
    n, c_col = problem.n, problem.c_col
    # pages of D1 that no later wavefront reads are never touched
    D1 = np.empty((n, c_col), dtype=problem.dtype)
    D = np.empty((n, c_col), dtype=problem.dtype)
    epoch = np.full(n, -1, dtype=np.int64) if debug else None
    A = problem.A

    def check_reads(tid, tile, js):
        cols = np.concatenate([A.in_edges(int(j)) for j in js])
        if tile.wavefront == 0:
            bad = int(np.count_nonzero(epoch[cols] != tid))
        else:
            bad = int(np.count_nonzero(epoch[cols] < 0))
        if bad:
            stats.add(epoch_violations=bad)

    def first_tile(item):
        tid, k, tile = item
        lo, hi = tile.i_lo, tile.i_hi
        S = _scratch_rows(hi - lo, c_col, problem.dtype)
        if hi > lo:
            problem.first_block(lo, hi, S)
            if epoch is not None:
                epoch[lo:hi] = tid
        js = tile.j_list
        if len(js):
            if epoch is not None:
                check_reads(tid, tile, js)
            bad = _spmm_local(A.row_ptr, A.col_idx, A.values, S, lo, D, js)
            if bad >= 0 and epoch is None:
                raise ValueError(f"row {bad} reads D1 outside its tile [{lo}, {hi}); "
                                 "the schedule is not dependence closed")
        keep = plan.keep[k]
        if len(keep):
            D1[keep + lo] = S[keep]
        if stats is not None:
            stats.add(first_rows=hi - lo, second_rows=len(js))

    def later_tile(item):
        tid, _, tile = item
        if tile.i_hi > tile.i_lo:
            problem.first_range(D1, tile.i_lo, tile.i_hi)
            if epoch is not None:
                epoch[tile.i_lo:tile.i_hi] = tid
        js = tile.j_list
        if len(js):
            if epoch is not None:
                check_reads(tid, tile, js)
            problem.second_rows(D1, D, js)
        if stats is not None:
            stats.add(first_rows=tile.i_hi - tile.i_lo, second_rows=len(js))

    if debug and stats is None:
        stats = ExecStats()
    tid = 0
    for w, wf in enumerate(schedule.wavefronts):
        items = []
        for k, tile in enumerate(wf):
            items.append((tid, k, tile))
            tid += 1
        run_wavefront(first_tile if w == 0 else later_tile, items, workers)
    if debug and stats.epoch_violations:
        raise AssertionError(f"{stats.epoch_violations} D1 reads before the producing tile ran")
    return D


def fused_gemm_spmm(problem: FusedProblem, schedule, workers: int = 1,
                    stats: ExecStats | None = None, debug: bool = False,
                    plan: FusedPlan | None = None) -> np.ndarray:
    """Execute a tile fusion schedule for dense ``B``.

    Inside a tile the GeMM rows of ``i_range`` run first, then the SpMM rows
    of ``j_list``; the wavefront-0 and wavefront-1 tile sets are separated by
    a barrier. With ``debug=True`` every ``D1`` read is checked against a
    write-epoch shadow array. Pass a ``plan`` from :func:`prepare_fused` to
    skip rebuilding it on every call.
    """
    if problem.b_sparse:
        raise ValueError("fused_gemm_spmm needs a dense B; use fused_spmm_spmm")
    return _run_fused(problem, schedule, workers, stats, debug, plan)


def fused_spmm_spmm(problem: FusedProblem, schedule, workers: int = 1,
                    stats: ExecStats | None = None, debug: bool = False,
                    plan: FusedPlan | None = None) -> np.ndarray:
    """Execute a tile fusion schedule for sparse ``B`` (first product is SpMM)."""
    if not problem.b_sparse:
        raise ValueError("fused_spmm_spmm needs a sparse B; use fused_gemm_spmm")
    return _run_fused(problem, schedule, workers, stats, debug, plan)


def run_fused(problem: FusedProblem, schedule, workers: int = 1, **kw) -> np.ndarray:
    if problem.b_sparse:
        return fused_spmm_spmm(problem, schedule, workers, **kw)
    return fused_gemm_spmm(problem, schedule, workers, **kw)


def run_unfused(problem: FusedProblem, workers: int = 1,
                stats: ExecStats | None = None) -> np.ndarray:
    """All of ``D1``, a barrier, then all of ``D``; rows statically chunked over workers."""
    n, c_col = problem.n, problem.c_col
    D1 = np.empty((n, c_col), dtype=problem.dtype)
    D = np.empty((n, c_col), dtype=problem.dtype)
    chunks = _chunks(n, workers)
    run_wavefront(lambda r: problem.first_range(D1, r[0], r[1]), chunks, workers)
    run_wavefront(lambda r: problem.second_range(D1, D, r[0], r[1]), chunks, workers)
    if stats is not None:
        stats.add(first_rows=n, second_rows=n)
    return D


def unfused_gemm_spmm(problem: FusedProblem, workers: int = 1, **kw) -> np.ndarray:
    if problem.b_sparse:
        raise ValueError("unfused_gemm_spmm needs a dense B")
    return run_unfused(problem, workers, **kw)


def unfused_spmm_spmm(problem: FusedProblem, workers: int = 1, **kw) -> np.ndarray:
    if not problem.b_sparse:
        raise ValueError("unfused_spmm_spmm needs a sparse B")
    return run_unfused(problem, workers, **kw)
