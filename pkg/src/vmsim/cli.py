"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 input error (config/trace/snapshot),
3 runtime abort. Fatal errors also emit one line of JSON on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from . import engine, trace
from .config import ConfigError, load_config
from .core import VmsimError
from .memmgr import BuddyAllocator
from .report import compare_csv


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _fail(code: int, message: str, ordinal: int | None = None) -> int:
    payload = {"error": {"code": code, "message": message}}
    if ordinal is not None:
        payload["error"]["ordinal"] = ordinal
    print(json.dumps(payload, separators=(",", ":")), file=sys.stderr)
    return code


def _build_parser() -> _Parser:
    parser = _Parser(prog="vmsim", description="virtual-memory simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one simulation or a batch directory")
    p_run.add_argument("-c", "--config")
    p_run.add_argument("-t", "--trace")
    p_run.add_argument("-o", "--output")
    p_run.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE")
    p_run.add_argument("--debug-log")
    p_run.add_argument("--timeseries")
    p_run.add_argument("--batch", metavar="DIR",
                       help="run every *.json config in DIR concurrently")
    p_run.add_argument("--jobs", type=int, default=0,
                       help="batch worker processes (default: cpu count)")

    p_gen = sub.add_parser("gen-trace", help="emit a synthetic trace")
    p_gen.add_argument("--pattern", choices=("sequential", "random", "strided"),
                       required=True)
    p_gen.add_argument("--footprint", type=int, required=True, help="bytes")
    p_gen.add_argument("--count", type=int, required=True)
    p_gen.add_argument("--stride", type=int, default=64)
    p_gen.add_argument("--pid", type=int, default=1)
    p_gen.add_argument("--base", type=lambda s: int(s, 0), default=1 << 30)
    p_gen.add_argument("--seed", type=int, default=42)
    p_gen.add_argument("-o", "--output")

    p_frag = sub.add_parser("gen-fragmentation", help="pre-create a fragmented pool")
    p_frag.add_argument("--frames", type=int, required=True)
    p_frag.add_argument("--target", type=float, required=True)
    p_frag.add_argument("--seed", type=int, default=42)
    p_frag.add_argument("--max-order", type=int, default=10)
    p_frag.add_argument("-o", "--output", required=True)

    p_cmp = sub.add_parser("compare", help="flatten reports into one CSV table")
    p_cmp.add_argument("reports", nargs="+")
    p_cmp.add_argument("-o", "--output")

    p_val = sub.add_parser("validate-trace", help="check a trace file")
    p_val.add_argument("trace")
    p_val.add_argument("--strict", action="store_true",
                       help="also require every access to fall inside a vma")
    return parser


def _trace_events(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        yield from trace.parse_stream(fh)


def _run_single(config_path: str, trace_path: str, output: str | None,
                overrides: list[str], debug_log: str | None,
                timeseries: str | None) -> int:
    cfg = load_config(config_path, overrides)
    report = engine.run(cfg, _trace_events(trace_path),
                        debug_log=debug_log, timeseries=timeseries)
    if output:
        engine.write_report(report, output)
    else:
        sys.stdout.write(engine.canonical_json(report))
    return 0


def _batch_worker(args: tuple[str, str, str, list[str]]) -> tuple[str, int, str]:
    config_path, trace_path, output, overrides = args
    try:
        _run_single(config_path, trace_path, output, overrides, None, None)
        return output, 0, ""
    except engine.RunAbort as exc:
        return output, exc.code, str(exc)
    except (VmsimError, OSError) as exc:
        return output, 2, str(exc)


def _cmd_run(args) -> int:
    if args.batch:
        configs = sorted(
            os.path.join(args.batch, name)
            for name in os.listdir(args.batch)
            if name.endswith(".json") and not name.endswith(".report.json")
        )
        if not configs:
            return _fail(2, f"no configs in {args.batch}")
        jobs = []
        for config_path in configs:
            cfg = load_config(config_path, args.overrides)
            trace_path = cfg["trace"].get("file")
            if not trace_path:
                return _fail(2, f"{config_path}: batch configs need trace.file")
            if not os.path.isabs(trace_path):
                trace_path = os.path.join(os.path.dirname(config_path), trace_path)
            out = os.path.splitext(config_path)[0] + ".report.json"
            jobs.append((config_path, trace_path, out, args.overrides))
        workers = args.jobs or min(len(jobs), os.cpu_count() or 1)
        failures = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for output, code, message in pool.map(_batch_worker, jobs):
                if code:
                    failures.append((output, code, message))
        if failures:
            worst = max(code for _, code, _ in failures)
            return _fail(worst, "; ".join(f"{o}: {m}" for o, _, m in failures))
        return 0
    if not args.config or not args.trace:
        return _fail(1, "run needs -c and -t (or --batch)")
    return _run_single(args.config, args.trace, args.output, args.overrides,
                       args.debug_log, args.timeseries)


def _cmd_gen_trace(args) -> int:
    spec = trace.SyntheticSpec(
        pattern=args.pattern, footprint=args.footprint, count=args.count,
        stride=args.stride, pid=args.pid, base=args.base,
    )
    lines = [trace.render(e) for e in trace.gen_synthetic(spec, args.seed)]
    text = "\n".join(lines) + "\n"
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_gen_fragmentation(args) -> int:
    pool = BuddyAllocator(args.frames, max_order=args.max_order)
    achieved = pool.fragment_to(args.target, args.seed)
    with open(args.output, "wb") as fh:
        fh.write(pool.snapshot_save())
    print(f"achieved fmfi {achieved:.6f} -> {args.output}")
    return 0


def _cmd_compare(args) -> int:
    reports = []
    for path in args.reports:
        with open(path, "r", encoding="utf-8") as fh:
            reports.append((os.path.basename(path), json.load(fh)))
    csv_text = compare_csv(reports)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(csv_text)
    else:
        sys.stdout.write(csv_text)
    return 0


def _cmd_validate(args) -> int:
    with open(args.trace, "r", encoding="utf-8") as fh:
        counts = trace.validate_stream(trace.parse_stream(fh), strict=args.strict)
    print(json.dumps(counts, sort_keys=True))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        return _fail(1, f"usage: {exc}")
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "gen-trace":
            return _cmd_gen_trace(args)
        if args.command == "gen-fragmentation":
            return _cmd_gen_fragmentation(args)
        if args.command == "compare":
            return _cmd_compare(args)
        if args.command == "validate-trace":
            return _cmd_validate(args)
        return _fail(1, f"unknown command {args.command!r}")
    except engine.RunAbort as exc:
        return _fail(exc.code, str(exc), exc.ordinal)
    except (ConfigError, trace.MalformedLine, trace.TraceOrderError) as exc:
        return _fail(2, str(exc), getattr(exc, "ordinal", None))
    except FileNotFoundError as exc:
        return _fail(2, str(exc))
    except VmsimError as exc:
        return _fail(3, str(exc))


if __name__ == "__main__":
    sys.exit(main())
