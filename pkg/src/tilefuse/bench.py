"""Benchmark harness: variant runners, median timing and report rows."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import statistics
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import baselines, kernels, scheduler
from .matrix import SparseMatrixCSR, random_dense

VARIANTS = ("fused", "unfused", "atomic", "overlapped")
DEFAULT_RUNS = 7
FALLBACK_CACHE_KB = 1280


def theoretical_flops(op: str, n: int, nnz_a: int, b_col: int, c_col: int, nnz_b: int = 0) -> int:
    """FLOPs of the unfused formulation, shared by every variant."""
    if op == "gemm-spmm":
        return 2 * n * b_col * c_col + 2 * nnz_a * c_col
    if op == "spmm-spmm":
        return 2 * nnz_b * c_col + 2 * nnz_a * c_col
    raise ValueError(f"unknown op {op!r}")


def runs_to_amortize(scheduler_seconds: float, baseline_seconds: float, fused_seconds: float) -> float:
    """Executions needed before the time saved by fusion pays for scheduling."""
    saved = baseline_seconds - fused_seconds
    return scheduler_seconds / saved if saved > 0 else math.inf


def _parse_size(text: str) -> int:
    text = text.strip().upper()
    mult = 1
    for suffix, m in (("K", 1024), ("M", 1024**2), ("G", 1024**3)):
        if text.endswith(suffix):
            text, mult = text[:-1], m
            break
    return int(text) * mult


def detect_cache_bytes(cores: int | None = None) -> int | None:
    """L1d + L2 + L3/cores in bytes from sysfs, or None when not discoverable."""
    base = Path("/sys/devices/system/cpu/cpu0/cache")
    if not base.is_dir():
        return None
    sizes = {}
    try:
        for idx in base.glob("index*"):
            ctype = (idx / "type").read_text().strip()
            if ctype == "Instruction":
                continue
            level = int((idx / "level").read_text())
            sizes[level] = _parse_size((idx / "size").read_text())
    except (OSError, ValueError):
        return None
    if 1 not in sizes:
        return None
    cores = cores or os.cpu_count() or 1
    return sizes.get(1, 0) + sizes.get(2, 0) + sizes.get(3, 0) // cores


def cache_words(cache_kb: float | None, dtype, cores: int | None = None) -> int:
    itemsize = np.dtype(dtype).itemsize
    if cache_kb is None:
        nbytes = detect_cache_bytes(cores) or FALLBACK_CACHE_KB * 1024
    else:
        nbytes = int(cache_kb * 1024)
    return max(1, nbytes // itemsize)


def time_runs(fn, runs: int = DEFAULT_RUNS, warmup: int = 1) -> list[float]:
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def time_interleaved(fns: dict, runs: int = DEFAULT_RUNS, warmup: int = 1) -> dict[str, list[float]]:
    """Like :func:`time_runs` for several callables, taking turns each round.

    Slow drift in machine load then hits every variant alike instead of
    whichever happened to be timed last.
    """
    for _ in range(warmup):
        for fn in fns.values():
            fn()
    out = {k: [] for k in fns}
    for _ in range(runs):
        for k, fn in fns.items():
            t0 = time.perf_counter()
            fn()
            out[k].append(time.perf_counter() - t0)
    return out


@dataclass
class BenchReport:
    matrix: str
    n: int
    nnz: int
    op: str
    variant: str
    precision: str
    bcol: int
    ccol: int
    workers: int
    runs: int
    median_seconds: float
    theoretical_flops: int
    gflops: float
    fused_ratio: float | None = None
    scheduler_seconds: float | None = None
    speedup: float | None = None
    runs_to_amortize: float | None = None
    replicated: int | None = None
    correct: bool | None = None
    binding: str = "none"


CSV_COLUMNS = [f.name for f in fields(BenchReport)]


def reports_to_csv(rows: list[BenchReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else v) for k, v in asdict(r).items()})
    return buf.getvalue()


def reports_to_json(rows: list[BenchReport]) -> str:
    def clean(v):
        return None if isinstance(v, float) and math.isinf(v) else v
    return json.dumps([{k: clean(v) for k, v in asdict(r).items()} for r in rows], indent=2)


# --------------------------------------------------------------------------- problem setup

def make_problem(A: SparseMatrixCSR, op: str, b_col: int, c_col: int, precision: str,
                 seed: int = 0, B: SparseMatrixCSR | None = None) -> kernels.FusedProblem:
    """GeMM-SpMM gets a random dense ``B``; SpMM-SpMM uses ``B = A`` unless one is given."""
    if not A.is_square:
        raise ValueError(f"{op} needs a square matrix, got {A.n_rows}x{A.n_cols}")
    if op == "gemm-spmm":
        Bm = random_dense(A.n_rows, b_col, seed)
    elif op == "spmm-spmm":
        Bm = B if B is not None else A
    else:
        raise ValueError(f"unknown op {op!r}")
    C = random_dense(Bm.shape[1], c_col, seed + 1)
    return kernels.FusedProblem.create(A, Bm, C, precision)


def scheduler_config_for(problem: kernels.FusedProblem, workers: int, ct_size: int,
                         cache_size_words: int) -> scheduler.SchedulerConfig:
    from fractions import Fraction
    ratio = Fraction(4, problem.dtype.itemsize)
    return scheduler.SchedulerConfig(ct_size=ct_size, p=workers, cache_size=cache_size_words,
                                     b_col=problem.b_col, c_col=problem.c_col,
                                     index_to_scalar_ratio=ratio)


def _warm_scheduler():
    # load compiled helpers so the first timed schedule does not pay for it
    from .matrix import gen_banded
    tiny = gen_banded(8, 1)
    scheduler.build_schedule(tiny, scheduler.SchedulerConfig(ct_size=4, p=2, cache_size=8), None)
    s = scheduler.build_schedule(tiny, scheduler.SchedulerConfig(ct_size=4, p=2, cache_size=8), tiny)
    kernels.prepare_fused(tiny, s)


class VariantRunner:
    """Prepared callables for each variant of one problem.

    Schedules are built once up front; the scheduler time is kept apart from
    the executor timings.
    """

    def __init__(self, problem: kernels.FusedProblem, workers: int, ct_size: int = 2048,
                 cache_size_words: int | None = None):
        self.problem = problem
        self.workers = workers
        cfg = scheduler_config_for(problem, workers, ct_size,
                                   cache_size_words or cache_words(None, problem.dtype))
        B = problem.B if problem.b_sparse else None
        _warm_scheduler()
        t0 = time.perf_counter()
        self.schedule = scheduler.build_schedule(problem.A, cfg, B)
        self.plan = kernels.prepare_fused(problem.A, self.schedule)
        self.scheduler_seconds = time.perf_counter() - t0
        self._atomic = None
        self._overlapped = None

    @property
    def atomic_schedule(self):
        if self._atomic is None:
            self._atomic = baselines.build_atomic(self.problem.A, max(1, len(self.schedule.wavefronts[0])))
        return self._atomic

    @property
    def overlapped_schedule(self):
        if self._overlapped is None:
            parts = max(1, min(self.workers, self.problem.n))
            self._overlapped = baselines.build_overlapped(self.problem.A, parts)
        return self._overlapped

    def callable(self, variant: str):
        p, w = self.problem, self.workers
        if variant == "fused":
            return lambda: kernels.run_fused(p, self.schedule, w, plan=self.plan)
        if variant == "unfused":
            return lambda: kernels.run_unfused(p, w)
        if variant == "atomic":
            s = self.atomic_schedule
            return lambda: baselines.run_atomic(p, s, w)
        if variant == "overlapped":
            s = self.overlapped_schedule
            return lambda: baselines.run_overlapped(p, s, w)
        raise ValueError(f"unknown variant {variant!r}")


def benchmark(A: SparseMatrixCSR, name: str, op: str, variants, *, b_col: int, c_col: int,
              precision: str = "double", workers: int = 1, runs: int = DEFAULT_RUNS,
              warmup: int = 1, ct_size: int = 2048, cache_kb: float | None = None,
              seed: int = 0, check: bool = True) -> list[BenchReport]:
    """Time each variant (median of ``runs``, taken round-robin) and fill in derived columns.

    When ``check`` is set and ``n`` is small enough, every variant is first
    compared with the dense oracle; a mismatch raises ``AssertionError``.
    """
    from .verify import ORACLE_MAX_N, compare, dense_oracle, tolerance_for

    problem = make_problem(A, op, b_col, c_col, precision, seed)
    runner = VariantRunner(problem, workers, ct_size, cache_words(cache_kb, problem.dtype))
    flops = theoretical_flops(op, problem.n, A.nnz, problem.b_col, problem.c_col,
                              problem.B.nnz if problem.b_sparse else 0)
    ref = dense_oracle(problem) if check and problem.n <= ORACLE_MAX_N else None

    fns = {v: runner.callable(v) for v in variants}
    correct = dict.fromkeys(fns)
    if ref is not None:
        for v, fn in fns.items():
            rep = compare(fn(), ref, tolerance_for(problem.dtype))
            correct[v] = rep.passed
            if not rep.passed:
                raise AssertionError(f"{v} differs from the dense oracle: rel={rep.rel_frobenius:.3e}")
    times = time_interleaved(fns, runs, warmup)

    rows = []
    for v in fns:
        med = statistics.median(times[v])
        rows.append(BenchReport(
            matrix=name, n=problem.n, nnz=A.nnz, op=op, variant=v, precision=precision,
            bcol=problem.b_col, ccol=problem.c_col, workers=workers, runs=runs,
            median_seconds=med, theoretical_flops=flops, gflops=flops / med / 1e9,
            fused_ratio=runner.schedule.fused_ratio if v == "fused" else None,
            scheduler_seconds=runner.scheduler_seconds if v == "fused" else None,
            replicated=runner.overlapped_schedule.replicated if v == "overlapped" else None,
            correct=correct[v], binding=kernels.thread_binding()))

    base = next((r for r in rows if r.variant == "unfused"), None)
    if base is not None:
        for r in rows:
            r.speedup = base.median_seconds / r.median_seconds
            if r.variant == "fused":
                r.runs_to_amortize = runs_to_amortize(r.scheduler_seconds, base.median_seconds,
                                                      r.median_seconds)
    return rows


def ratio_sweep(matrices: dict[str, SparseMatrixCSR], tile_sizes) -> tuple[list[dict], list[str]]:
    """Coarse-step fused ratio per tile size, plus messages for any doubling that lowers it."""
    table, errors = [], []
    tile_sizes = sorted(tile_sizes)
    for name, A in matrices.items():
        prev = None
        for t in tile_sizes:
            r = scheduler.step1_fused_ratio(A, t)
            table.append({"matrix": name, "tile_size": t, "fused_ratio": r})
            if prev is not None and t == 2 * prev[0] and r < prev[1]:
                errors.append(f"{name}: fused ratio fell from {prev[1]:.6f} at t={prev[0]} "
                              f"to {r:.6f} at t={t}")
            prev = (t, r)
    for t in tile_sizes:
        vals = [row["fused_ratio"] for row in table if row["tile_size"] == t]
        if vals:
            table.append({"matrix": "MEAN", "tile_size": t, "fused_ratio": float(np.mean(vals))})
    return table, errors


# --------------------------------------------------------------------------- verification battery

@dataclass
class BatteryResult:
    case: str
    op: str
    precision: str
    variant: str
    rel_frobenius: float
    passed: bool
    schedule_ok: bool


def battery_matrices(seed: int, count: int = 12) -> dict[str, SparseMatrixCSR]:
    from .matrix import gen_arrow, gen_banded, gen_dense, gen_identity, gen_random_sparse
    rng = np.random.default_rng(seed)
    mats = {
        "identity:37": gen_identity(37),
        "dense:24": gen_dense(24),
        "banded:64:3": gen_banded(64, 3),
        "arrow:50:2": gen_arrow(50, 2),
    }
    for k in range(count):
        n = int(rng.integers(2, 301))
        d = float(rng.uniform(0.005, 0.3))
        s = int(rng.integers(0, 2**31))
        mats[f"random:{n}:{d:.4f}:{s}"] = gen_random_sparse(n, d, s)
    return mats


def verify_battery(seed: int = 0, count: int = 12, workers: int = 2, ct_size: int = 16,
                   cache_size_words: int = 512, fault: str | None = None) -> list[BatteryResult]:
    """Every variant on a seeded set of matrices against the dense oracle.

    ``fault`` is a test hook: ``'fused'`` drops the last wavefront-0 tile
    from the tile fusion schedule before executing it.
    """
    from .verify import compare, dense_oracle, tolerance_for

    results = []
    for name, A in battery_matrices(seed, count).items():
        for op in ("gemm-spmm", "spmm-spmm"):
            for precision in ("double", "single"):
                problem = make_problem(A, op, 4, 3, precision, seed)
                runner = VariantRunner(problem, workers, ct_size, cache_size_words)
                sched = runner.schedule
                ok_sched = scheduler.validate_schedule(
                    sched, problem.A, problem.B if problem.b_sparse else None).ok
                if fault == "fused":
                    sched.wavefronts[0] = sched.wavefronts[0][:-1]
                    runner.plan = kernels.prepare_fused(problem.A, sched)
                ref = dense_oracle(problem)
                tol = tolerance_for(problem.dtype)
                for v in VARIANTS:
                    rep = compare(runner.callable(v)(), ref, tol)
                    results.append(BatteryResult(name, op, precision, v, rep.rel_frobenius,
                                                 rep.passed, ok_sched))
    return results
