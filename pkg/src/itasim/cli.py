"""Command-line entry point.

Exit codes: 0 ok, 1 other error, 2 usage, 3 unreadable file, 4 validation
failure, 5 weight container error, 6 compile error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import bench as B
from .container import TensorRecord, WeightContainerError, load_tensors, save_tensors
from .graph import GraphError, parse_graph
from .mobilebert import ModelConfig, build_mobilebert, make_inputs
from .passes import lower
from .reference import MissingTensor, execute_graph
from .report import render_figures, report_dict, report_json, report_text
from .runtime import run_schedule
from .schedule import CompileError, ScheduleError, compile_schedule, parse_schedule, validate_schedule
from .tiling import TilingInfeasible
from .timing import ConfigError, format_config, load_config

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_FILE, EXIT_INVALID, EXIT_WEIGHTS, EXIT_COMPILE = range(7)
BEGIN_JSON = "----- BEGIN REPORT JSON -----"
END_JSON = "----- END REPORT JSON -----"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as e:
        raise FileNotFoundError(f"cannot read {path}: {e.strerror}") from e


def _dims(text: str):
    try:
        dims = [int(d) for d in text.lower().split("x")]
    except ValueError:
        raise UsageError(f"--dims expects RxKxC, got {text!r}")
    if len(dims) != 3 or min(dims) <= 0:
        raise UsageError(f"--dims expects three positive sizes, got {text!r}")
    return dims


def _emit(res: B.BenchResult, hw, en, args) -> None:
    d = report_dict(res, hw, en)
    print(report_text(d), end="")
    print(BEGIN_JSON)
    print(report_json(d), end="")
    print(END_JSON)
    if args.report:
        Path(args.report).write_text(report_json(d))
    if args.figures:
        for p in render_figures(res, args.figures):
            print(f"figure: {p}")


def cmd_compile(args) -> int:
    hw, _ = load_config(args.config)
    g = parse_graph(_read(args.graph))
    s = compile_schedule(lower(g, args.mapping, hw.ita), hw)
    validate_schedule(s, hw)
    text = s.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(f"compiled {g.name}: {len(s.loops)} loops, {len(s.steps)} steps, "
          f"L2 weights {s.weights_bytes} B, activations peak {s.memory.peak} B")
    return EXIT_OK


def cmd_validate(args) -> int:
    hw, _ = load_config(args.config)
    s = parse_schedule(_read(args.schedule))
    validate_schedule(s, hw)
    print(f"ok: {len(s.steps)} steps")
    return EXIT_OK


def _records_to_arrays(recs):
    return {k: r.data for k, r in recs.items()}


def cmd_run(args) -> int:
    hw, en = load_config(args.config)
    s = parse_schedule(_read(args.schedule))
    validate_schedule(s, hw)
    weights = _records_to_arrays(load_tensors(args.weights)) if args.weights else None
    if args.inputs:
        feeds = _records_to_arrays(load_tensors(args.inputs))
    else:
        feeds = make_inputs(s.graph, args.seed)
    res = run_schedule(s, feeds, weights, hw, en, functional=not args.no_functional)
    out = B.BenchResult("run", {"graph": s.graph.name, "mapping": "schedule",
                                "functional": not args.no_functional},
                        res.report, s, res.outputs)
    if args.check and res.outputs:
        ref = execute_graph(s.graph, feeds, weights=weights)
        out.bit_exact = all(np.array_equal(ref[k], res.outputs[k]) for k in ref)
    if args.outputs and res.outputs:
        save_tensors(args.outputs, {k: TensorRecord(v, s.graph.tensors[k].dtype, s.graph.tensors[k].scale)
                                    for k, v in res.outputs.items()})
    _emit(out, hw, en, args)
    return EXIT_OK if out.bit_exact in (None, True) else EXIT_OTHER


def cmd_bench(args) -> int:
    hw, en = load_config(args.config)
    functional = not args.no_functional
    if args.scenario == "gemm":
        res = B.bench_gemm(_dims(args.dims), hw, en, args.mapping, functional)
    elif args.scenario == "attention":
        res = B.bench_attention(args.S, args.E, args.P, hw, en, args.mapping, functional)
    else:
        res = B.bench_e2e(ModelConfig(n_layers=args.layers, seed=args.seed), args.mapping, hw, en,
                          functional)
    _emit(res, hw, en, args)
    return EXIT_OK if res.bit_exact in (None, True) else EXIT_OTHER


def cmd_mobilebert(args) -> int:
    cfg = ModelConfig(n_layers=args.layers, seed=args.seed)
    g = build_mobilebert(cfg)
    Path(args.graph).write_text(g.to_json())
    save_tensors(args.weights, {k: TensorRecord(v, g.tensors[k].dtype, g.tensors[k].scale)
                                for k, v in sorted(g.weights.items())})
    if args.inputs:
        feeds = make_inputs(g, args.input_seed)
        save_tensors(args.inputs, {k: TensorRecord(v, g.tensors[k].dtype, g.tensors[k].scale)
                                   for k, v in feeds.items()})
    print(f"wrote {args.graph} ({len(g.nodes)} nodes, {g.total_ops() / 1e9:.3f} GOp) and {args.weights}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="itasim", description="accelerator cluster simulator and deployment compiler")
    p.add_argument("--print-config", action="store_true", help="print the default config and exit")
    sub = p.add_subparsers(dest="cmd", parser_class=_Parser)

    def common(sp, report=True):
        sp.add_argument("--config", help="key = value config file (default: $ITASIM_CONFIG)")
        if report:
            sp.add_argument("--report", help="write the JSON report here")
            sp.add_argument("--figures", help="directory for PNG figures")
            sp.add_argument("--no-functional", action="store_true", help="timing only")

    sp = sub.add_parser("compile", help="graph JSON -> schedule JSON")
    sp.add_argument("graph")
    sp.add_argument("--out", "-o")
    sp.add_argument("--mapping", choices=("ita", "cluster"), default="ita")
    common(sp, report=False)
    sp.set_defaults(fn=cmd_compile)

    sp = sub.add_parser("validate", help="check a schedule's invariants")
    sp.add_argument("schedule")
    common(sp, report=False)
    sp.set_defaults(fn=cmd_validate)

    sp = sub.add_parser("run", help="execute a schedule")
    sp.add_argument("schedule")
    sp.add_argument("--weights", help="weight container (blob; manifest next to it)")
    sp.add_argument("--inputs", help="input container (default: seeded inputs)")
    sp.add_argument("--outputs", help="write outputs as a container")
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--check", action="store_true", help="compare with whole-tensor execution")
    common(sp)
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("bench", help="canned benchmark scenarios")
    sp.add_argument("scenario", choices=("gemm", "attention", "e2e"))
    sp.add_argument("--mapping", choices=("ita", "cluster"), default="ita")
    sp.add_argument("--dims", default="512x512x512", help="RxKxC for gemm")
    sp.add_argument("--S", type=int, default=512)
    sp.add_argument("--E", type=int, default=512)
    sp.add_argument("--P", type=int, default=64)
    sp.add_argument("--layers", type=int, default=24)
    sp.add_argument("--seed", type=int, default=0)
    common(sp)
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("mobilebert", help="export the synthetic MobileBERT graph and weights")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--inputs")
    sp.add_argument("--layers", type=int, default=24)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--input-seed", type=int, default=1)
    sp.set_defaults(fn=cmd_mobilebert)
    return p


def _fail(code: int, e: BaseException) -> int:
    print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.print_config:
            print(format_config(*load_config()), end="")
            return EXIT_OK
        if not args.cmd:
            raise UsageError("missing subcommand")
        return args.fn(args)
    except UsageError as e:
        return _fail(EXIT_USAGE, e)
    except WeightContainerError as e:
        return _fail(EXIT_WEIGHTS, e)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        return _fail(EXIT_FILE, e)
    except (ScheduleError, GraphError) as e:
        return _fail(EXIT_INVALID, e)
    except (CompileError, TilingInfeasible) as e:
        return _fail(EXIT_COMPILE, e)
    except (ConfigError, MissingTensor, ValueError) as e:
        return _fail(EXIT_OTHER, e)


if __name__ == "__main__":
    sys.exit(main())
