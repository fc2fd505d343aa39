"""Tile fusion scheduler.

Builds a two-wavefront schedule for ``D = A (B C)`` from the sparsity
pattern of ``A``. Wavefront 0 holds fused tiles: a contiguous range of
first-product rows plus every second-product row whose in-edges all fall in
that range. Everything else runs in wavefront 1, after a barrier.

Step 1 cuts the iteration space into uniform coarse tiles and keeps each
row ``j`` whose in-edges are contained in its own tile. Step 2 measures
each tile with a data-movement cost model and bisects tiles that do not fit
in ``cache_size`` words.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numba
import numpy as np

from .matrix import SparseMatrixCSR

DEFAULT_CT_SIZE = 2048
DEFAULT_CACHE_WORDS = 1280 * 1024 // 8


@dataclass(frozen=True)
class SchedulerConfig:
    ct_size: int = DEFAULT_CT_SIZE
    p: int = 1
    cache_size: int = DEFAULT_CACHE_WORDS
    b_col: int = 1
    c_col: int = 1
    index_to_scalar_ratio: Fraction = Fraction(1, 2)
    # count all n*bCol words of a dense B in every tile, as the cost model is literally stated
    dense_b_all_rows: bool = False

    def __post_init__(self):
        if self.ct_size < 1 or self.p < 1 or self.cache_size < 1:
            raise ValueError("ct_size, p and cache_size must all be >= 1")
        if self.b_col < 1 or self.c_col < 1:
            raise ValueError("b_col and c_col must be >= 1")
        object.__setattr__(self, "index_to_scalar_ratio", Fraction(self.index_to_scalar_ratio))


@dataclass(eq=False)
class FusedTile:
    """One tile. Wavefront-1 tiles have an empty ``[i_lo, i_hi)``."""

    wavefront: int
    i_lo: int
    i_hi: int
    j_list: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        self.j_list = np.asarray(self.j_list, dtype=np.int64)

    @property
    def width(self) -> int:
        return self.i_hi - self.i_lo

    def __eq__(self, other):
        if not isinstance(other, FusedTile):
            return NotImplemented
        return (self.wavefront, self.i_lo, self.i_hi) == (other.wavefront, other.i_lo, other.i_hi) \
            and np.array_equal(self.j_list, other.j_list)

    def __repr__(self):
        return (f"FusedTile(w={self.wavefront}, i=[{self.i_lo},{self.i_hi}), "
                f"|J|={len(self.j_list)})")


@dataclass(eq=False)
class FusedSchedule:
    wavefronts: list[list[FusedTile]]
    n: int
    tile_size: int
    config: SchedulerConfig = field(default_factory=SchedulerConfig)
    b_dense: bool = True

    @property
    def fused_ratio(self) -> float:
        return fused_ratio(self)

    def tiles(self):
        for wf in self.wavefronts:
            yield from wf

    def __eq__(self, other):
        if not isinstance(other, FusedSchedule):
            return NotImplemented
        return (self.n, self.tile_size, self.config, self.b_dense) == \
            (other.n, other.tile_size, other.config, other.b_dense) \
            and len(self.wavefronts) == len(other.wavefronts) \
            and all(len(a) == len(b) and all(x == y for x, y in zip(a, b))
                    for a, b in zip(self.wavefronts, other.wavefronts))


# Step 1 output has the same shape, with uniform wavefront-0 tiles.
IntermediateSchedule = FusedSchedule


# --------------------------------------------------------------------------- helpers

@numba.njit(cache=True, nogil=True)
def _row_bounds(row_ptr, col_idx):
    n = len(row_ptr) - 1
    lo = np.empty(n, dtype=np.int64)
    hi = np.empty(n, dtype=np.int64)
    for j in range(n):
        a, b = row_ptr[j], row_ptr[j + 1]
        if a < b:
            lo[j] = col_idx[a]
            hi[j] = col_idx[b - 1]
        else:
            lo[j] = j
            hi[j] = j
    return lo, hi


def _in_edge_bounds(A: SparseMatrixCSR) -> tuple[np.ndarray, np.ndarray]:
    """Smallest and largest in-edge of every row; an empty row is bounded by its own index."""
    return _row_bounds(A.row_ptr, A.col_idx)


def _require_square(A: SparseMatrixCSR):
    if not A.is_square:
        raise ValueError(f"tile fusion needs a square A, got {A.n_rows}x{A.n_cols}")


@numba.njit(cache=True, nogil=True)
def _distinct_cols(row_ptr, col_idx, rows, marks, stamp):
    count = 0
    for r in rows:
        for q in range(row_ptr[r], row_ptr[r + 1]):
            c = col_idx[q]
            if marks[c] != stamp:
                marks[c] = stamp
                count += 1
    return count


class _CostModel:
    """Evaluates the tile cost repeatedly with a shared marker array."""

    def __init__(self, A, b_col, c_col, B=None, index_ratio=Fraction(1, 2), dense_b_all_rows=False):
        self.A = A
        self.B = B
        self.b_col = b_col
        self.c_col = c_col
        self.ratio = Fraction(index_ratio)
        self.dense_b_all_rows = dense_b_all_rows
        self.a_nnz = A.row_nnz().astype(np.int64)
        self._marks = np.zeros(A.n_cols, dtype=np.int64)
        self._stamp = 0

    def __call__(self, i_lo: int, i_hi: int, j_list: np.ndarray) -> int:
        t = i_hi - i_lo
        n_j = len(j_list)
        self._stamp += 1
        uc = _distinct_cols(self.A.row_ptr, self.A.col_idx, j_list, self._marks, self._stamp) \
            if n_j else 0
        nnz_j = int(self.a_nnz[j_list].sum()) if n_j else 0
        idx_words = nnz_j + n_j + 1
        if self.B is None:
            rows_of_b = self.A.n_rows if self.dense_b_all_rows else t
            scalars = rows_of_b * self.b_col + (uc + t + n_j) * self.c_col
        else:
            nz_b = int(self.B.row_ptr[i_hi] - self.B.row_ptr[i_lo]) if t else 0
            scalars = (nz_b + nnz_j + uc + t + n_j) * self.c_col
            idx_words += nz_b + t + 1
        r = self.ratio
        return scalars + -(-(idx_words * r.numerator) // r.denominator)

    def tile(self, tile: FusedTile) -> int:
        return self(tile.i_lo, tile.i_hi, tile.j_list)


def _cost_model(A, config: SchedulerConfig, B=None) -> _CostModel:
    return _CostModel(A, config.b_col, config.c_col, B, config.index_to_scalar_ratio,
                      config.dense_b_all_rows)


# --------------------------------------------------------------------------- operations

def choose_tile_size(n: int, ct_size: int, p: int) -> int:
    """Coarse tile width: ``ct_size`` if that still yields ``p`` tiles, else ``ceil(n/p)``."""
    if n < 1 or ct_size < 1 or p < 1:
        raise ValueError("n, ct_size and p must be >= 1")
    if -(-n // ct_size) >= p:
        return ct_size
    return -(-n // p)


def balance(unfused_j, num_tiles: int, weights=None) -> list[np.ndarray]:
    """Split ascending ids into ``num_tiles`` contiguous chunks of near-equal weight.

    ``weights[k]`` is the weight of ``unfused_j[k]`` (row nnz for the
    scheduler; all ones if omitted). With positive weights and at least
    ``num_tiles`` items, every chunk is nonempty and the heaviest and
    lightest chunks differ by at most the largest single weight.
    """
    if num_tiles < 1:
        raise ValueError("num_tiles must be >= 1")
    js = np.asarray(unfused_j, dtype=np.int64)
    u = len(js)
    if u <= num_tiles:
        return [js[k:k + 1] for k in range(u)] + [js[:0] for _ in range(num_tiles - u)]
    w = np.ones(u, dtype=np.int64) if weights is None else np.asarray(weights, dtype=np.int64)
    bounds = _balanced_bounds(w, num_tiles)
    return [js[bounds[k]:bounds[k + 1]] for k in range(num_tiles)]


def _balanced_bounds(w: np.ndarray, T: int) -> np.ndarray:
    """Chunk boundaries with every chunk weight in ``[a, a + max(w)]`` for the largest feasible ``a``.

    With window width ``max(w)`` the prefix positions reachable after ``k``
    chunks form a contiguous band of prefix sums, so feasibility for a given
    ``a`` is decided by tracking the band ends, and is monotone in ``a``.
    """
    u = len(w)
    P = np.zeros(u + 1, dtype=np.int64)
    np.cumsum(w, out=P[1:])
    total = int(P[-1])
    wmax = int(w.max())

    def bands(a):
        lo = np.empty(T + 1, dtype=np.int64)
        hi = np.empty(T + 1, dtype=np.int64)
        lo[0] = hi[0] = 0
        for k in range(T):
            q = np.searchsorted(P, lo[k] + a, side="left")
            if q > u:
                return None
            lo[k + 1] = P[q]
            q = np.searchsorted(P, hi[k] + a + wmax, side="right") - 1
            hi[k + 1] = P[q]
        return lo, hi

    # largest a whose lower band still reaches the total
    a_lo, a_hi = 1 if wmax > 0 else 0, max(total // T, 1)
    best = None
    while a_lo <= a_hi:
        mid = (a_lo + a_hi) // 2
        b = bands(mid)
        if b is not None and b[0][T] <= total:
            best, a_lo = (mid, b), mid + 1
        else:
            a_hi = mid - 1
    if best is None or best[1][1][T] < total:
        return _prefix_bounds(P, T)
    a, (lo, hi) = best
    bounds = np.empty(T + 1, dtype=np.int64)
    bounds[T] = u
    cur = total
    for k in range(T - 1, 0, -1):
        left = max(int(lo[k]), cur - a - wmax)
        right = min(int(hi[k]), cur - a)
        target = total * k / T
        val = min(max(target, left), right)
        # nearest prefix value to the target inside [left, right]; ties go to the earlier one
        q = int(np.searchsorted(P, val, side="left"))
        cands = [c for c in (q - 1, q) if 0 <= c <= u and left <= P[c] <= right]
        c = min(cands, key=lambda c: (abs(P[c] - target), c))
        bounds[k] = c
        cur = int(P[c])
    bounds[0] = 0
    return bounds


def _prefix_bounds(P: np.ndarray, T: int) -> np.ndarray:
    u = len(P) - 1
    total = P[-1]
    targets = total * np.arange(T + 1) / T
    b = np.searchsorted(P, targets, side="left")
    b[0], b[-1] = 0, u
    return np.maximum.accumulate(np.clip(b, 0, u))


def step1_coarse_fuse(A: SparseMatrixCSR, t: int, p: int = 1, *, _bounds=None) -> FusedSchedule:
    """Uniform coarse fusion with tile width ``t``.

    Row ``j`` is fused into the tile covering ``j`` when every in-edge lies
    in that tile's range; the rest are weight-balanced over
    ``max(p, ceil(unfused / t))`` wavefront-1 tiles.
    """
    _require_square(A)
    if t < 1:
        raise ValueError("t must be >= 1")
    n = A.n_rows
    lo_edge, hi_edge = _bounds if _bounds is not None else _in_edge_bounds(A)
    j = np.arange(n, dtype=np.int64)
    tile_lo = (j // t) * t
    tile_hi = np.minimum(tile_lo + t, n)
    fused = (lo_edge >= tile_lo) & (hi_edge < tile_hi)

    fused_j = j[fused]
    n_tiles = -(-n // t) if n else 0
    cuts = np.searchsorted(fused_j, np.arange(1, n_tiles) * t)
    wf0 = [FusedTile(0, v * t, min((v + 1) * t, n), part)
           for v, part in enumerate(np.split(fused_j, cuts))]

    unfused = j[~fused]
    wf1 = _balanced_wavefront1(A, unfused, t, p)
    return FusedSchedule([wf0, wf1], n, t, SchedulerConfig(ct_size=t, p=p))


def _balanced_wavefront1(A, unfused, t, p):
    if len(unfused) == 0:
        return []
    num_tiles = max(p, -(-len(unfused) // t))
    weights = A.row_nnz()[unfused]
    return [FusedTile(1, 0, 0, js) for js in balance(unfused, num_tiles, weights) if len(js)]


def tile_cost(tile: FusedTile, A: SparseMatrixCSR, b_col: int, c_col: int, *,
              B: SparseMatrixCSR | None = None, index_to_scalar_ratio=Fraction(1, 2),
              dense_b_all_rows: bool = False) -> int:
    """Data-movement cost of ``tile`` in scalar words.

    ``(nz + uc + t + |J|) * c_col + idx`` where ``t`` is the tile width,
    ``uc`` the number of distinct columns read by the tile's second-product
    rows and ``idx`` the CSR index words scaled to scalar words (rounded
    up). For a dense ``B`` (``B is None``) the nonzero term is the
    ``t * b_col`` words of ``B`` the tile reads; for a sparse ``B`` it is the
    nonzeros of ``B`` in the tile's rows plus those of ``A`` in ``J``.
    """
    model = _CostModel(A, b_col, c_col, B, index_to_scalar_ratio, dense_b_all_rows)
    return model.tile(tile)


def split_tile(tile: FusedTile, config: SchedulerConfig, A: SparseMatrixCSR,
               B: SparseMatrixCSR | None = None, *, _model=None, _bounds=None):
    """Bisect a wavefront-0 tile until every piece fits in ``config.cache_size``.

    Returns ``(leaves, demoted)``: the leaf tiles in ``i`` order and the
    second-product rows whose in-edges straddle a cut, which move to
    wavefront 1. Width-1 tiles are returned as they are.
    """
    model = _model or _cost_model(A, config, B)
    lo_edge, hi_edge = _bounds if _bounds is not None else _in_edge_bounds(A)
    leaves: list[FusedTile] = []
    demoted: list[np.ndarray] = []
    stack = [(tile.i_lo, tile.i_hi, np.asarray(tile.j_list, dtype=np.int64))]
    while stack:
        lo, hi, js = stack.pop()
        if hi - lo <= 1 or model(lo, hi, js) <= config.cache_size:
            leaves.append(FusedTile(0, lo, hi, js))
            continue
        mid = lo + (hi - lo) // 2
        jl, jh = lo_edge[js], hi_edge[js]
        left = (jl >= lo) & (jh < mid)
        right = (jl >= mid) & (jh < hi)
        demoted.append(js[~(left | right)])
        # right pushed first so the left half is finished first
        stack.append((mid, hi, js[right]))
        stack.append((lo, mid, js[left]))
    dem = np.sort(np.concatenate(demoted)) if demoted else np.empty(0, dtype=np.int64)
    return leaves, dem


def _split_by_count(tile: FusedTile, config: SchedulerConfig, model) -> list[FusedTile]:
    out = []
    stack = [tile.j_list]
    while stack:
        js = stack.pop()
        if len(js) <= 1 or model(0, 0, js) <= config.cache_size:
            out.append(FusedTile(1, 0, 0, js))
            continue
        h = len(js) // 2
        stack.append(js[h:])
        stack.append(js[:h])
    return out


def build_schedule(A: SparseMatrixCSR, config: SchedulerConfig,
                   B: SparseMatrixCSR | None = None) -> FusedSchedule:
    """Full two-step tile fusion schedule for ``A``.

    ``B`` is the sparse first operand for SpMM-SpMM; leave it ``None`` when
    ``B`` is dense.
    """
    _require_square(A)
    if B is not None and B.n_rows != A.n_cols:
        raise ValueError("B must have as many rows as A has columns")
    n = A.n_rows
    if n == 0:
        return FusedSchedule([[], []], 0, config.ct_size, config, B is None)
    t = choose_tile_size(n, config.ct_size, config.p)
    bounds = _in_edge_bounds(A)
    inter = step1_coarse_fuse(A, t, config.p, _bounds=bounds)
    model = _cost_model(A, config, B)

    wf0: list[FusedTile] = []
    demoted = []
    for tile in inter.wavefronts[0]:
        if model.tile(tile) > config.cache_size:
            leaves, dem = split_tile(tile, config, A, B, _model=model, _bounds=bounds)
            wf0.extend(leaves)
            demoted.append(dem)
        else:
            wf0.append(tile)

    if demoted and any(len(d) for d in demoted):
        unfused = np.sort(np.concatenate([*demoted, *(tl.j_list for tl in inter.wavefronts[1])]))
        wf1_coarse = _balanced_wavefront1(A, unfused, t, config.p)
    else:
        wf1_coarse = inter.wavefronts[1]

    wf1: list[FusedTile] = []
    for tile in wf1_coarse:
        if model.tile(tile) > config.cache_size:
            wf1.extend(_split_by_count(tile, config, model))
        else:
            wf1.append(tile)
    return FusedSchedule([wf0, wf1], n, t, config, B is None)


def fused_ratio(schedule: FusedSchedule) -> float:
    """Share of all ``2n`` iterations whose second-product row runs in wavefront 0."""
    if schedule.n == 0:
        return 0.0
    fused = sum(len(tl.j_list) for tl in schedule.wavefronts[0]) if schedule.wavefronts else 0
    return fused / (2 * schedule.n)


def step1_fused_ratio(A: SparseMatrixCSR, t: int) -> float:
    """Fused ratio of the coarse step alone at tile width ``t``."""
    _require_square(A)
    n = A.n_rows
    if n == 0:
        return 0.0
    lo_edge, hi_edge = _in_edge_bounds(A)
    j = np.arange(n, dtype=np.int64)
    tile_lo = (j // t) * t
    fused = (lo_edge >= tile_lo) & (hi_edge < np.minimum(tile_lo + t, n))
    return int(fused.sum()) / (2 * n)


# --------------------------------------------------------------------------- validation

@dataclass
class Violation:
    kind: str
    detail: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)
    # tiles over budget that cannot be split further (width 1, or a single wavefront-1 row)
    irreducible: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, kind, detail):
        self.violations.append(Violation(kind, detail))

    def __bool__(self):
        return self.ok

    def summary(self) -> str:
        if self.ok:
            return f"ok ({len(self.irreducible)} irreducible over-budget tiles)"
        kinds = sorted({v.kind for v in self.violations})
        return f"{len(self.violations)} violations: {', '.join(kinds)}"


def validate_schedule(schedule: FusedSchedule, A: SparseMatrixCSR,
                      B: SparseMatrixCSR | None = None, *, check_cost: bool = True,
                      max_records: int = 50) -> ValidationReport:
    """Check every structural, dependence, load-balance and cost constraint."""
    rep = ValidationReport()

    def add(kind, detail):
        if len(rep.violations) < max_records:
            rep.add(kind, detail)
        elif len(rep.violations) == max_records:
            rep.add("truncated", "further violations omitted")

    n = schedule.n
    if not A.is_square:
        add("shape", f"A is {A.n_rows}x{A.n_cols}, not square")
        return rep
    if A.n_rows != n:
        add("shape", f"schedule covers n={n} but A has {A.n_rows} rows")
        return rep
    if len(schedule.wavefronts) != 2:
        add("wavefronts", f"expected exactly 2 wavefronts, found {len(schedule.wavefronts)}")
        return rep

    wf0, wf1 = schedule.wavefronts
    lo_edge, hi_edge = _in_edge_bounds(A)
    seen = np.zeros(n, dtype=np.int64)
    for w, wf in enumerate(schedule.wavefronts):
        for v, tl in enumerate(wf):
            if tl.wavefront != w:
                add("wavefronts", f"tile {v} of wavefront {w} is labelled wavefront {tl.wavefront}")
            js = tl.j_list
            if len(js):
                if js.min() < 0 or js.max() >= n:
                    add("partition", f"tile ({w},{v}) has j outside [0,{n})")
                    continue
                if np.any(np.diff(js) <= 0):
                    add("partition", f"tile ({w},{v}) j_list is not strictly ascending")
                np.add.at(seen, js, 1)
            if w == 1 and tl.i_hi != tl.i_lo:
                add("partition", f"wavefront-1 tile {v} carries i range [{tl.i_lo},{tl.i_hi})")
            if w == 0:
                if not 0 <= tl.i_lo < tl.i_hi <= n:
                    add("partition", f"tile (0,{v}) has bad i range [{tl.i_lo},{tl.i_hi})")
                    continue
                if len(js):
                    bad = (lo_edge[js] < tl.i_lo) | (hi_edge[js] >= tl.i_hi)
                    for j in js[bad][:5]:
                        add("dependence",
                            f"j={j} in tile (0,{v}) i=[{tl.i_lo},{tl.i_hi}) has in-edges "
                            f"outside the range: {A.in_edges(int(j)).tolist()[:8]}")

    if np.any(seen != 1):
        missing = np.nonzero(seen == 0)[0]
        dup = np.nonzero(seen > 1)[0]
        if len(missing):
            add("partition", f"{len(missing)} j iterations unscheduled, e.g. {missing[:5].tolist()}")
        if len(dup):
            add("partition", f"{len(dup)} j iterations scheduled twice, e.g. {dup[:5].tolist()}")

    ranges = sorted((tl.i_lo, tl.i_hi) for tl in wf0)
    cursor = 0
    for lo, hi in ranges:
        if lo != cursor:
            add("partition", f"wavefront-0 i ranges {'overlap' if lo < cursor else 'leave a gap'} at {cursor}")
        cursor = max(cursor, hi)
    if cursor != n:
        add("partition", f"wavefront-0 i ranges end at {cursor}, expected {n}")

    p = schedule.config.p
    # ceil(n/p)-wide tiles can number fewer than p for small n
    available0 = -(-n // max(schedule.tile_size, 1)) if n else 0
    if len(wf0) < min(p, available0):
        add("load_balance", f"wavefront 0 has {len(wf0)} tiles, need >= {min(p, available0)}")
    n_wf1 = sum(len(tl.j_list) for tl in wf1)
    nonempty1 = sum(1 for tl in wf1 if len(tl.j_list))
    if nonempty1 < min(p, n_wf1):
        add("load_balance", f"wavefront 1 has {nonempty1} nonempty tiles, need >= {min(p, n_wf1)}")

    if check_cost:
        cfg = schedule.config
        model = _cost_model(A, cfg, None if schedule.b_dense else (B if B is not None else A))
        for w, wf in enumerate(schedule.wavefronts):
            for v, tl in enumerate(wf):
                c = model.tile(tl)
                if c > cfg.cache_size:
                    if (w == 0 and tl.width == 1) or (w == 1 and len(tl.j_list) <= 1):
                        rep.irreducible.append((w, v, c))
                    else:
                        add("cost", f"tile ({w},{v}) costs {c} > cache_size {cfg.cache_size}")
    return rep


# --------------------------------------------------------------------------- JSON

def schedule_to_dict(schedule: FusedSchedule, A: SparseMatrixCSR | None = None,
                     B: SparseMatrixCSR | None = None) -> dict:
    model = None
    if A is not None:
        model = _cost_model(A, schedule.config, None if schedule.b_dense else (B if B is not None else A))
    cfg = asdict(schedule.config)
    r = cfg["index_to_scalar_ratio"]
    cfg["index_to_scalar_ratio"] = f"{r.numerator}/{r.denominator}"
    return {
        "n": schedule.n,
        "tile_size_t": schedule.tile_size,
        "wavefronts": [
            [{"i_lo": tl.i_lo, "i_hi": tl.i_hi, "j_list": tl.j_list.tolist(),
              "cost": model.tile(tl) if model else None} for tl in wf]
            for wf in schedule.wavefronts
        ],
        "fused_ratio": fused_ratio(schedule),
        "b_dense": schedule.b_dense,
        "config": cfg,
    }


def schedule_from_dict(d: dict) -> FusedSchedule:
    cfg = dict(d.get("config") or {})
    if "index_to_scalar_ratio" in cfg:
        cfg["index_to_scalar_ratio"] = Fraction(cfg["index_to_scalar_ratio"])
    config = SchedulerConfig(**cfg)
    wavefronts = [[FusedTile(w, int(t["i_lo"]), int(t["i_hi"]), np.asarray(t["j_list"], dtype=np.int64))
                   for t in wf] for w, wf in enumerate(d["wavefronts"])]
    return FusedSchedule(wavefronts, int(d["n"]), int(d["tile_size_t"]), config,
                         bool(d.get("b_dense", True)))


def dump_schedule(schedule: FusedSchedule, path, A=None, B=None) -> None:
    with open(path, "w") as fh:
        json.dump(schedule_to_dict(schedule, A, B), fh)


def load_schedule(path) -> FusedSchedule:
    with open(path) as fh:
        return schedule_from_dict(json.load(fh))
