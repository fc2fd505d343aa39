"""CSR storage, Matrix Market I/O and synthetic matrix generators.

A :class:`SparseMatrixCSR` doubles as the dependence DAG of the fused
computation: iteration ``j`` of the second product depends on iteration
``i`` of the first exactly when ``A[j, i]`` is stored, so the in-edges of
``j`` are the column indices of row ``j``.

Dense operands are plain C-contiguous 2-D numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

PRECISIONS = {"single": np.float32, "double": np.float64}


class MatrixMarketError(ValueError):
    """Raised for malformed or unsupported Matrix Market input."""


def resolve_dtype(precision) -> np.dtype:
    """Map ``'single'``/``'double'`` (or ``'sp'``/``'dp'``, or a dtype) to a numpy dtype."""
    if isinstance(precision, str):
        key = {"sp": "single", "dp": "double"}.get(precision, precision)
        try:
            return np.dtype(PRECISIONS[key])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}") from None
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported scalar type {dt}")
    return dt


def _index_dtype(nnz: int, dim: int):
    return np.int32 if max(nnz, dim) < 2**31 - 1 else np.int64


@dataclass(frozen=True, eq=False)
class SparseMatrixCSR:
    """Compressed sparse row matrix with sorted, duplicate-free rows.

    The constructor validates the CSR invariants; pass ``check=False`` only
    for arrays produced by code that already guarantees them.
    """

    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    check: bool = True

    def __post_init__(self):
        itype = _index_dtype(len(self.col_idx), max(self.n_rows, self.n_cols))
        object.__setattr__(self, "row_ptr", np.ascontiguousarray(self.row_ptr, dtype=itype))
        object.__setattr__(self, "col_idx", np.ascontiguousarray(self.col_idx, dtype=itype))
        vals = np.asarray(self.values)
        if vals.dtype not in (np.float32, np.float64):
            vals = vals.astype(np.float64)
        object.__setattr__(self, "values", np.ascontiguousarray(vals))
        if self.check:
            self._validate()
        for arr in (self.row_ptr, self.col_idx, self.values):
            arr.flags.writeable = False

    def _validate(self):
        if self.n_rows < 0 or self.n_cols < 0:
            raise ValueError("negative dimension")
        rp, ci = self.row_ptr, self.col_idx
        if rp.shape != (self.n_rows + 1,):
            raise ValueError(f"row_ptr must have length n_rows+1={self.n_rows + 1}, got {rp.shape}")
        if rp[0] != 0:
            raise ValueError("row_ptr[0] must be 0")
        if np.any(np.diff(rp) < 0):
            raise ValueError("row_ptr must be non-decreasing")
        nnz = int(rp[-1])
        if ci.shape != (nnz,) or self.values.shape != (nnz,):
            raise ValueError("col_idx and values must both have length row_ptr[-1]")
        if nnz:
            if ci.min() < 0 or ci.max() >= self.n_cols:
                raise ValueError("column index out of range")
            # strictly increasing within a row: every step that is not a row start must increase
            step_ok = np.diff(ci) > 0
            row_start = np.zeros(nnz, dtype=bool)
            starts = rp[:-1][np.diff(rp) > 0]
            row_start[starts] = True
            if not np.all(step_ok | row_start[1:]):
                raise ValueError("column indices must be strictly increasing within each row")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    @property
    def is_square(self) -> bool:
        return self.n_rows == self.n_cols

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def row(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Column indices and values of row ``j``."""
        lo, hi = self.row_ptr[j], self.row_ptr[j + 1]
        return self.col_idx[lo:hi], self.values[lo:hi]

    def in_edges(self, j: int) -> np.ndarray:
        """First-operation iterations that iteration ``j`` depends on."""
        return self.col_idx[self.row_ptr[j]:self.row_ptr[j + 1]]

    def astype(self, precision) -> "SparseMatrixCSR":
        dt = resolve_dtype(precision)
        if dt == self.values.dtype:
            return self
        return SparseMatrixCSR(self.n_rows, self.n_cols, self.row_ptr, self.col_idx,
                               self.values.astype(dt), check=False)

    def to_dense(self, dtype=np.float64) -> np.ndarray:
        out = np.zeros(self.shape, dtype=dtype)
        rows = np.repeat(np.arange(self.n_rows), self.row_nnz())
        out[rows, self.col_idx] = self.values
        return out

    def same_pattern(self, other: "SparseMatrixCSR") -> bool:
        return (self.shape == other.shape
                and np.array_equal(self.row_ptr, other.row_ptr)
                and np.array_equal(self.col_idx, other.col_idx))

    def __eq__(self, other):
        if not isinstance(other, SparseMatrixCSR):
            return NotImplemented
        return self.same_pattern(other) and np.array_equal(self.values, other.values)

    def __repr__(self):
        return f"SparseMatrixCSR({self.n_rows}x{self.n_cols}, nnz={self.nnz}, dtype={self.dtype})"

    @classmethod
    def from_coo(cls, rows, cols, vals, shape, dtype=np.float64) -> "SparseMatrixCSR":
        """Assemble from triplets; duplicate coordinates are summed."""
        n_rows, n_cols = shape
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if not (rows.shape == cols.shape == vals.shape):
            raise ValueError("rows, cols and vals must have equal length")
        if rows.size and (rows.min() < 0 or rows.max() >= n_rows
                          or cols.min() < 0 or cols.max() >= n_cols):
            raise ValueError("coordinate out of range")
        key = rows * max(n_cols, 1) + cols
        order = np.argsort(key, kind="stable")
        key = key[order]
        uniq, first = np.unique(key, return_index=True)
        summed = np.add.reduceat(vals[order], first) if key.size else vals[:0]
        urows = uniq // max(n_cols, 1)
        ucols = uniq % max(n_cols, 1)
        row_ptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(urows, minlength=n_rows), out=row_ptr[1:])
        return cls(n_rows, n_cols, row_ptr, ucols, summed.astype(dtype))

    @classmethod
    def from_dense(cls, dense, dtype=None) -> "SparseMatrixCSR":
        dense = np.asarray(dense)
        r, c = np.nonzero(dense)
        return cls.from_coo(r, c, dense[r, c], dense.shape,
                            dtype=dtype or (dense.dtype if dense.dtype.kind == "f" else np.float64))


# --------------------------------------------------------------------------- I/O

def load_matrix_market(path) -> SparseMatrixCSR:
    """Read a coordinate Matrix Market file (real, integer or pattern; general or symmetric).

    Symmetric files are expanded to both triangles, pattern entries get the
    value 1.0 and duplicate coordinates are summed. Rectangular matrices are
    accepted; callers that need a square matrix check it themselves.
    """
    path = Path(path)
    with path.open("r") as fh:
        header = fh.readline()
        parts = header.strip().split()
        if len(parts) != 5 or parts[0].lower() != "%%matrixmarket":
            raise MatrixMarketError(f"{path}: missing %%MatrixMarket header")
        obj, fmt, field, symmetry = (p.lower() for p in parts[1:])
        if obj != "matrix" or fmt != "coordinate":
            raise MatrixMarketError(f"{path}: only 'matrix coordinate' is supported, got {obj} {fmt}")
        if field not in ("real", "integer", "pattern", "double"):
            raise MatrixMarketError(f"{path}: unsupported field {field!r}")
        if symmetry not in ("general", "symmetric"):
            raise MatrixMarketError(f"{path}: unsupported symmetry {symmetry!r}")

        line = fh.readline()
        while line and (line.startswith("%") or not line.strip()):
            line = fh.readline()
        try:
            n_rows, n_cols, nnz = (int(x) for x in line.split())
        except ValueError:
            raise MatrixMarketError(f"{path}: bad size line {line!r}") from None
        body = fh.read()

    ncol = 2 if field == "pattern" else 3
    # strip comment lines that may be interleaved with data
    if "%" in body:
        body = "\n".join(ln for ln in body.splitlines() if not ln.lstrip().startswith("%"))
    try:
        flat = np.array(body.split(), dtype=np.float64)
    except ValueError:
        raise MatrixMarketError(f"{path}: non-numeric entry in data section") from None
    if flat.size != nnz * ncol:
        raise MatrixMarketError(
            f"{path}: expected {nnz} entries with {ncol} fields, found {flat.size} values")
    data = flat.reshape(nnz, ncol)
    rows = data[:, 0].astype(np.int64) - 1
    cols = data[:, 1].astype(np.int64) - 1
    if np.any(data[:, :2] != np.floor(data[:, :2])):
        raise MatrixMarketError(f"{path}: non-integer index")
    if nnz and (rows.min() < 0 or rows.max() >= n_rows or cols.min() < 0 or cols.max() >= n_cols):
        raise MatrixMarketError(f"{path}: index out of range for {n_rows}x{n_cols} matrix")
    vals = np.ones(nnz) if field == "pattern" else data[:, 2]

    if symmetry == "symmetric":
        off = rows != cols
        rows, cols, vals = (np.concatenate([rows, cols[off]]),
                            np.concatenate([cols, rows[off]]),
                            np.concatenate([vals, vals[off]]))
    return SparseMatrixCSR.from_coo(rows, cols, vals, (n_rows, n_cols))


def write_matrix_market(A: SparseMatrixCSR, path, comment: str | None = None) -> None:
    """Write ``A`` as a general real coordinate file with round-trip precision."""
    rows = np.repeat(np.arange(A.n_rows), A.row_nnz()) + 1
    with Path(path).open("w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        if comment:
            for ln in comment.splitlines():
                fh.write(f"% {ln}\n")
        fh.write(f"{A.n_rows} {A.n_cols} {A.nnz}\n")
        fmt = "%.9g" if A.dtype == np.float32 else "%.17g"
        np.savetxt(fh, np.column_stack([rows, A.col_idx + 1, A.values]).astype(object),
                   fmt=["%d", "%d", fmt])


# --------------------------------------------------------------------------- generators

def gen_random_sparse(n: int, density: float, seed: int) -> SparseMatrixCSR:
    """n x n matrix where each entry is present independently with probability ``density``.

    Values are uniform in [0.1, 1.0]. Rows that come out empty get a
    diagonal entry so every row has at least one nonzero.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 < density <= 1.0:
        raise ValueError("density must be in (0, 1]")
    rng = np.random.default_rng(seed)
    total = n * n
    # Bernoulli process over the flattened index space via geometric gaps
    chunks, pos = [], -1
    while True:
        m = max(16, int((total - pos) * density * 1.1) + 16)
        gaps = rng.geometric(density, size=m)
        cand = pos + np.cumsum(gaps)
        inside = cand[cand < total]
        chunks.append(inside)
        if inside.size < cand.size:
            break
        pos = int(cand[-1])
    flat = np.concatenate(chunks)
    rows, cols = flat // n, flat % n
    empty = np.setdiff1d(np.arange(n), rows, assume_unique=False)
    rows = np.concatenate([rows, empty])
    cols = np.concatenate([cols, empty])
    vals = rng.uniform(0.1, 1.0, size=rows.size)
    return SparseMatrixCSR.from_coo(rows, cols, vals, (n, n))


def gen_banded(n: int, half_bandwidth: int) -> SparseMatrixCSR:
    """n x n matrix of ones on the band ``|i - j| <= half_bandwidth``."""
    w = half_bandwidth
    if not 0 <= w < n:
        raise ValueError("need 0 <= half_bandwidth < n")
    j = np.arange(n, dtype=np.int64)
    first = np.maximum(j - w, 0)
    counts = np.minimum(j + w, n - 1) - first + 1
    row_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=row_ptr[1:])
    nnz = int(row_ptr[-1])
    offs = np.arange(nnz, dtype=np.int64) - np.repeat(row_ptr[:-1], counts)
    col_idx = np.repeat(first, counts) + offs
    return SparseMatrixCSR(n, n, row_ptr, col_idx, np.ones(nnz), check=False)


def gen_identity(n: int) -> SparseMatrixCSR:
    return gen_banded(n, 0)


def gen_dense(n: int) -> SparseMatrixCSR:
    """Fully populated n x n pattern stored as CSR."""
    return gen_banded(n, n - 1)


def gen_arrow(n: int, width: int = 1) -> SparseMatrixCSR:
    """Arrow pattern: diagonal plus ``width`` dense leading rows and columns."""
    if not 1 <= width <= n:
        raise ValueError("need 1 <= width <= n")
    dense = np.eye(n, dtype=bool)
    dense[:width, :] = True
    dense[:, :width] = True
    r, c = np.nonzero(dense)
    return SparseMatrixCSR.from_coo(r, c, np.ones(r.size), (n, n))


def random_dense(rows: int, cols: int, seed: int, dtype=np.float64) -> np.ndarray:
    """Seeded dense operand with entries uniform in [-1, 1]."""
    rng = np.random.default_rng(seed)
    return np.ascontiguousarray(rng.uniform(-1.0, 1.0, size=(rows, cols)).astype(dtype))


def random_sparse_rect(rows: int, cols: int, density: float, seed: int) -> SparseMatrixCSR:
    """Seeded rectangular sparse operand (every row nonempty)."""
    rng = np.random.default_rng(seed)
    mask = rng.random((rows, cols)) < density
    empty = ~mask.any(axis=1)
    mask[np.nonzero(empty)[0], rng.integers(0, cols, size=int(empty.sum()))] = True
    r, c = np.nonzero(mask)
    return SparseMatrixCSR.from_coo(r, c, rng.uniform(0.1, 1.0, size=r.size), (rows, cols))
