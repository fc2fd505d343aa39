"""Reference results and result comparison."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matrix import SparseMatrixCSR

ORACLE_MAX_N = 4096
TOLERANCE = {np.dtype(np.float64): 1e-10, np.dtype(np.float32): 1e-4}


def tolerance_for(dtype) -> float:
    return TOLERANCE[np.dtype(dtype)]


def dense_oracle(problem) -> np.ndarray:
    """``A (B C)`` from dense float64 copies of every operand, whatever the problem precision."""
    n = problem.n
    if n > ORACLE_MAX_N:
        raise ValueError(f"dense oracle limited to n <= {ORACLE_MAX_N}, got {n}")
    A = problem.A.to_dense(np.float64)
    B = problem.B.to_dense(np.float64) if isinstance(problem.B, SparseMatrixCSR) \
        else np.asarray(problem.B, dtype=np.float64)
    C = np.asarray(problem.C, dtype=np.float64)
    return A @ (B @ C)


@dataclass
class ComparisonReport:
    max_abs_diff: float
    rel_frobenius: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.rel_frobenius <= self.tolerance

    def __bool__(self):
        return self.passed


def compare(Dx, Dy, tol: float) -> ComparisonReport:
    """``||Dx - Dy||_F / max(||Dy||_F, tiny)`` with ``Dy`` as the reference."""
    Dx = np.asarray(Dx, dtype=np.float64)
    Dy = np.asarray(Dy, dtype=np.float64)
    if Dx.shape != Dy.shape:
        raise ValueError(f"shape mismatch: {Dx.shape} vs {Dy.shape}")
    diff = Dx - Dy
    max_abs = float(np.abs(diff).max()) if diff.size else 0.0
    denom = max(float(np.linalg.norm(Dy)), np.finfo(np.float64).tiny)
    return ComparisonReport(max_abs, float(np.linalg.norm(diff)) / denom, tol)
