"""Sparsity-aware tile fusion for ``D = A (B C)`` on shared-memory machines."""

from .baselines import (build_atomic, build_overlapped, run_atomic, run_overlapped)
from .kernels import (ExecStats, FusedPlan, FusedProblem, fused_gemm_spmm, fused_spmm_spmm, gemm,
                      prepare_fused, run_fused, run_unfused, spmm, unfused_gemm_spmm,
                      unfused_spmm_spmm)
from .matrix import (SparseMatrixCSR, gen_arrow, gen_banded, gen_dense, gen_identity,
                     gen_random_sparse, load_matrix_market, write_matrix_market)
from .scheduler import (FusedSchedule, FusedTile, SchedulerConfig, balance, build_schedule,
                        choose_tile_size, fused_ratio, split_tile, step1_coarse_fuse, tile_cost,
                        validate_schedule)
from .verify import compare, dense_oracle

__version__ = "0.1.0"
