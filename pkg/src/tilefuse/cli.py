"""``tilefuse`` command line: run, ratio-sweep, schedule-dump, verify."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench, scheduler
from .kernels import default_workers
from .matrix import (MatrixMarketError, gen_arrow, gen_banded, gen_dense, gen_identity,
                     gen_random_sparse, load_matrix_market)

log = logging.getLogger("tilefuse")

GENERATORS = {
    "banded": (gen_banded, (int, int)),
    "random": (gen_random_sparse, (int, float, int)),
    "identity": (gen_identity, (int,)),
    "dense": (gen_dense, (int,)),
    "arrow": (gen_arrow, (int, int)),
}


def parse_gen(text: str):
    """``kind:p1:p2...`` -> matrix. ``random`` takes n:density[:seed], ``arrow`` n[:width]."""
    kind, *params = text.split(":")
    if kind not in GENERATORS:
        raise ValueError(f"unknown generator {kind!r}; choose from {', '.join(GENERATORS)}")
    fn, types = GENERATORS[kind]
    if kind == "random" and len(params) == 2:
        params.append("0")
    if kind == "arrow" and len(params) == 1:
        params.append("1")
    if len(params) != len(types):
        raise ValueError(f"{kind} expects {len(types)} parameters, got {len(params)}")
    return fn(*(t(p) for t, p in zip(types, params)))


def _load_inputs(args) -> dict:
    mats = {}
    for path in args.matrix or []:
        mats[Path(path).stem] = load_matrix_market(path)
    for text in args.gen or []:
        mats[text] = parse_gen(text)
    if not mats:
        raise ValueError("give at least one --matrix or --gen")
    return mats


def _threads(args) -> int:
    return args.threads if args.threads else default_workers()


def _emit(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _add_inputs(p):
    p.add_argument("--matrix", action="append", metavar="PATH", help="Matrix Market file (repeatable)")
    p.add_argument("--gen", action="append", metavar="KIND:PARAMS",
                   help="synthetic matrix, e.g. banded:100000:64, random:1000:0.01:7 (repeatable)")


def _add_machine(p):
    p.add_argument("--threads", type=int, default=None, help="workers (default: TILEFUSE_THREADS or cores)")
    p.add_argument("--ctsize", type=int, default=scheduler.DEFAULT_CT_SIZE)
    p.add_argument("--cache-kb", type=float, default=None,
                   help="per-core cache budget in KiB (default L1+L2+L3/cores, else 1280)")
    p.add_argument("--precision", choices=("sp", "dp"), default="dp")
    p.add_argument("--bcol", type=int, default=32)
    p.add_argument("--ccol", type=int, default=32)
    p.add_argument("--op", choices=("gemm-spmm", "spmm-spmm"), default="gemm-spmm")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tilefuse", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="benchmark variants")
    _add_inputs(run)
    _add_machine(run)
    run.add_argument("--variants", default="fused,unfused")
    run.add_argument("--runs", type=int, default=bench.DEFAULT_RUNS)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--format", choices=("csv", "json"), default="csv")
    run.add_argument("--out")

    sw = sub.add_parser("ratio-sweep", help="fused ratio versus coarse tile size")
    _add_inputs(sw)
    sw.add_argument("--sizes", default=",".join(str(64 << k) for k in range(8)),
                    help="comma-separated tile sizes (default 64..8192)")
    sw.add_argument("--format", choices=("csv", "json"), default="csv")
    sw.add_argument("--out")

    dump = sub.add_parser("schedule-dump", help="build, validate and write a schedule as JSON")
    _add_inputs(dump)
    _add_machine(dump)
    dump.add_argument("--out")

    ver = sub.add_parser("verify", help="check every variant against the dense oracle")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--count", type=int, default=12, help="random matrices in the battery")
    ver.add_argument("--threads", type=int, default=None)
    ver.add_argument("--inject-fault", choices=("fused",), default=None, help=argparse.SUPPRESS)
    return ap


def cmd_run(args) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = set(variants) - set(bench.VARIANTS)
    if bad:
        raise ValueError(f"unknown variants: {', '.join(sorted(bad))}")
    precision = "single" if args.precision == "sp" else "double"
    rows = []
    for name, A in _load_inputs(args).items():
        rows += bench.benchmark(A, name, args.op, variants, b_col=args.bcol, c_col=args.ccol,
                                precision=precision, workers=_threads(args), runs=args.runs,
                                ct_size=args.ctsize, cache_kb=args.cache_kb, seed=args.seed)
    text = bench.reports_to_csv(rows) if args.format == "csv" else bench.reports_to_json(rows)
    _emit(text, args.out)
    return 0


def cmd_ratio_sweep(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    table, errors = bench.ratio_sweep(_load_inputs(args), sizes)
    if args.format == "json":
        text = json.dumps({"table": table, "errors": errors}, indent=2)
    else:
        text = "matrix,tile_size,fused_ratio\n" + "".join(
            f"{r['matrix']},{r['tile_size']},{r['fused_ratio']:.6f}\n" for r in table)
    _emit(text, args.out)
    for e in errors:
        log.error("monotonicity violation: %s", e)
    return 1 if errors else 0


def cmd_schedule_dump(args) -> int:
    mats = _load_inputs(args)
    if len(mats) != 1:
        raise ValueError("schedule-dump takes exactly one matrix")
    (name, A), = mats.items()
    if not A.is_square:
        raise ValueError(f"{name} is {A.n_rows}x{A.n_cols}; tile fusion needs a square matrix")
    precision = "single" if args.precision == "sp" else "double"
    problem = bench.make_problem(A, args.op, args.bcol, args.ccol, precision)
    cfg = bench.scheduler_config_for(problem, _threads(args), args.ctsize,
                                     bench.cache_words(args.cache_kb, problem.dtype))
    B = problem.B if problem.b_sparse else None
    sched = scheduler.build_schedule(A, cfg, B)
    report = scheduler.validate_schedule(sched, A, B)
    _emit(json.dumps(scheduler.schedule_to_dict(sched, A, B)), args.out)
    if not report.ok:
        for v in report.violations:
            log.error("%s: %s", v.kind, v.detail)
        return 1
    return 0


def cmd_verify(args) -> int:
    results = bench.verify_battery(seed=args.seed, count=args.count,
                                   workers=args.threads or 2, fault=args.inject_fault)
    width = max(len(r.case) for r in results)
    print(f"{'case':<{width}}  {'op':<9}  {'prec':<6}  {'variant':<10}  {'rel_frob':>10}  result")
    for r in results:
        ok = r.passed and r.schedule_ok
        print(f"{r.case:<{width}}  {r.op:<9}  {r.precision:<6}  {r.variant:<10}  "
              f"{r.rel_frobenius:10.2e}  {'PASS' if ok else 'FAIL'}")
    failed = sum(not (r.passed and r.schedule_ok) for r in results)
    print(f"{len(results) - failed}/{len(results)} passed")
    return 1 if failed else 0


COMMANDS = {"run": cmd_run, "ratio-sweep": cmd_ratio_sweep,
            "schedule-dump": cmd_schedule_dump, "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except (ValueError, MatrixMarketError, OSError, AssertionError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
