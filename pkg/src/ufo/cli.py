"""Command-line driver: ``ufo <command> ...``.

Exit codes: 0 ok, 1 usage error, 2 data error (missing or malformed
artifacts), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__, pipeline
from . import autograd as ag
from . import task_gen
from .arch_space import DecodeError, SearchSpace, decode
from .bench import BenchFormatError, correlation_report, export_bench, import_bench
from .trainer import NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(default: int | None) -> int | None:
    env = os.environ.get("UFO_SEED")
    if env is None:
        return default
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"UFO_SEED must be an integer, got {env!r}") from None


def _read_json(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise pipeline.MissingArtifact(f"{path} not found")
    return json.loads(p.read_text(encoding="utf-8"))


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_tasks(args) -> int:
    raw = _read_json(args.spec)
    seed = _seed(None)
    if seed is not None:
        raw["seed"] = seed
    spec = task_gen.TaskSuiteSpec.from_dict(raw)
    sums = pipeline.gen_tasks(spec, args.out)
    _print({"out": args.out, "checksums": sums})
    return EXIT_OK


def cmd_train(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    manifest = pipeline.train_run(raw, args.data, args.out, all_shared=args.all_shared, seed_override=_seed(None))
    _print({"run": args.out, "seed": manifest["seed"], "params_checksum": manifest["params_checksum"]})
    return EXIT_OK


def cmd_eval_subnets(args) -> int:
    state = pipeline.load_run(args.run)
    seed = args.seed if args.seed is not None else _seed(int(state.cfg["seed"]))
    table = pipeline.eval_subnets(state, args.count, seed)
    export_bench(table, args.out)
    pipeline.register(state, "bench", str(Path(args.out).resolve()))
    _print({"bench": args.out, "rows": len(table.rows)})
    return EXIT_OK


def cmd_fit_predictors(args) -> int:
    state = pipeline.load_run(args.out)
    table = pipeline.load_bench(args.bench, state.space)
    pipeline.register(state, "bench", str(Path(args.bench).resolve()))
    summary = pipeline.fit_predictors(state, table)
    _print(summary)
    return EXIT_OK


def cmd_search(args) -> int:
    state = pipeline.load_run(args.run)
    targets = pipeline.parse_targets(args.targets, state.task_names)
    budget = pipeline.make_budget(state, targets, args.flops_frac, args.params_frac, args.lam)
    result, report = pipeline.search_run(state, budget)
    pipeline.write_report(report, args.out)
    _print({"chosen": report["chosen"], "objective": report["objective"], "feasible": report["feasible"]})
    return EXIT_OK


def cmd_extract(args) -> int:
    state = pipeline.load_run(args.run)
    targets = pipeline.parse_targets(args.targets, state.task_names)
    arch = decode(args.arch, state.space)
    summary = pipeline.extract(state, arch, targets, args.out)
    _print(summary)
    return EXIT_OK


def cmd_correlate(args) -> int:
    table, errors = import_bench(args.bench)
    for e in errors:
        print(f"{args.bench}:{e.line}: {e.message}", file=sys.stderr)
    report = correlation_report(table)
    report.to_csv(args.out)
    svg = args.svg or str(Path(args.out).with_suffix(".svg"))
    report.to_svg(svg)
    _print({"csv": args.out, "svg": svg, "group_means": report.group_means()})
    return EXIT_OK


def cmd_bench_import(args) -> int:
    space = None
    if args.space:
        space = SearchSpace.load(args.space)
    elif args.run:
        space = pipeline.load_run(args.run).space
    table, errors = import_bench(args.input, space)
    for e in errors:
        print(f"{args.input}:{e.line}: {e.message}", file=sys.stderr)
    if args.out:
        export_bench(table, args.out)
    _print({"rows": len(table.rows), "errors": len(errors), "columns": table.headers()})
    return EXIT_DATA if errors and args.strict else EXIT_OK


def cmd_bench_export(args) -> int:
    state = pipeline.load_run(args.run)
    pipeline.export_run_bench(state, args.out)
    _print({"out": args.out})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ufo", description="Multi-task supernet training, evaluation and rank-based search.")
    p.add_argument("--version", action="version", version=f"ufo {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-tasks", help="generate a synthetic task suite")
    s.add_argument("--spec", required=True, help="task suite spec (JSON)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_gen_tasks)

    s = sub.add_parser("train", help="train the supernet")
    s.add_argument("--config", help="run config (JSON); toy defaults when omitted")
    s.add_argument("--data", required=True, help="directory written by gen-tasks")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--all-shared", action="store_true", help="ablation arm: no private FFN paths")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval-subnets", help="measure sampled sub-networks on every task")
    s.add_argument("--run", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="benchmark CSV")
    s.set_defaults(func=cmd_eval_subnets)

    s = sub.add_parser("fit-predictors", help="fit per-task performance predictors")
    s.add_argument("--bench", required=True)
    s.add_argument("--out", required=True, help="run directory")
    s.set_defaults(func=cmd_fit_predictors)

    s = sub.add_parser("search", help="rank-based constrained search")
    s.add_argument("--run", required=True)
    s.add_argument("--targets", required=True, help="comma-separated task names or indices")
    s.add_argument("--flops-frac", type=float)
    s.add_argument("--params-frac", type=float)
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--out", required=True, help="search report (JSON)")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("extract", help="export a trimmed standalone model")
    s.add_argument("--run", required=True)
    s.add_argument("--arch", required=True, help="architecture encoding")
    s.add_argument("--targets", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("correlate", help="Kendall-tau matrix over benchmark columns")
    s.add_argument("--bench", required=True)
    s.add_argument("--out", required=True, help="CSV matrix")
    s.add_argument("--svg", help="heatmap path (default: next to --out)")
    s.set_defaults(func=cmd_correlate)

    s = sub.add_parser("bench", help="benchmark table import/export")
    bsub = s.add_subparsers(dest="bench_command", required=True, parser_class=_Parser)
    b = bsub.add_parser("import", help="validate and normalize a benchmark CSV")
    b.add_argument("input")
    b.add_argument("--space", help="search space JSON for decoding arch strings")
    b.add_argument("--run", help="take the search space from a run directory")
    b.add_argument("--out", help="write the normalized table")
    b.add_argument("--strict", action="store_true", help="exit 2 when any row is malformed")
    b.set_defaults(func=cmd_bench_import)
    b = bsub.add_parser("export", help="write a run's benchmark table")
    b.add_argument("--run", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench_export)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ufo: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, ag.NonFiniteError, FloatingPointError) as exc:
        print(f"ufo: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (
        pipeline.MissingArtifact,
        ag.FormatError,
        task_gen.DataFormatError,
        BenchFormatError,
        DecodeError,
        json.JSONDecodeError,
        OSError,
    ) as exc:
        print(f"ufo: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"ufo: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
