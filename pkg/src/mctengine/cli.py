"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or parse error.
Reports go to stdout as CSV or JSON; files are written temp-then-rename.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import sys
from pathlib import Path

import numpy as np

from .bench import BENCH_COLUMNS, BenchConfig, bench_engine
from .cost import builtin_scenarios, evaluate, parse_scenarios, report_tables
from .generate import SchemaSpec, gen_rules
from .model import RuleError, SchemaError
from .nfa import DictionaryError, compile_rules, nfa_stats
from .nfab import NfabError, save_nfa
from .pipeline import CSV_COLUMNS, PipelineConfig, dumps_manifest, parse_config, run_manifest, run_pipeline, sweep
from .ruleset import RuleSetParseError, atomic_write, format_ruleset, load_ruleset, save_ruleset
from .transforms import TransformError, to_v2
from .workload import BatchPolicy, QuerySampler, WorkloadShape, generate_workload, workload_stats


class UsageError(Exception):
    """Bad input detected after argument parsing; maps to exit code 2."""


_PARSE_ERRORS = (RuleSetParseError, SchemaError, RuleError, TransformError, DictionaryError, NfabError, UsageError)


# ---------------------------------------------------------------- output

def _emit(rows: list[dict], fmt: str, columns=None, out=None) -> None:
    out = out or sys.stdout
    if fmt == "json":
        out.write(json.dumps(rows, indent=2, default=str) + "\n")
        return
    if not rows:
        return
    columns = list(columns or rows[0].keys())
    extra = [k for r in rows for k in r if k not in columns]
    columns += list(dict.fromkeys(extra))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    out.write(buf.getvalue())


def _load(path: str):
    try:
        return load_ruleset(path)
    except FileNotFoundError:
        raise UsageError(f"{path}: no such file") from None
    except RuleSetParseError as exc:
        raise UsageError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- commands

def cmd_gen_rules(args) -> int:
    try:
        spec = SchemaSpec.parse(args.spec or "")
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid --spec: {exc}") from None
    schema, rules = gen_rules(args.seed, args.n, spec)
    text = format_ruleset(schema, rules)
    if args.out:
        atomic_write(args.out, text)
        _emit([{"rules": len(rules), "v1_criteria": spec.v1_width, "v2_criteria": spec.v2_width,
                "out": args.out}], args.format)
    else:
        sys.stdout.write(text)
    return 0


def cmd_transform(args) -> int:
    schema, rules = _load(args.rules)
    v2_rules, v2_schema = to_v2(rules, schema)
    if args.out:
        save_ruleset(args.out, v2_schema, v2_rules)
    _emit([{"rules_in": len(rules), "rules_out": len(v2_rules),
            "criteria_in": len(schema), "criteria_out": len(v2_schema),
            "schema_hash": v2_schema.hash}], args.format)
    return 0


def _order(text: str):
    if text in ("declared", "optimised") or text.startswith("random:"):
        return text
    try:
        return [int(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"invalid --order {text!r}") from None


def _compile(args):
    schema, rules = _load(args.rules)
    return schema, rules, compile_rules(rules, schema, order=_order(args.order), merge=args.merge)


def cmd_compile(args) -> int:
    _, _, nfa = _compile(args)
    if args.out:
        save_nfa(args.out, nfa)
    row = nfa_stats(nfa)
    row.update(rules=nfa.rule_count, schema_hash=nfa.schema.hash, nfa_hash=nfa.image_hash)
    _emit([row], args.format)
    return 0


def cmd_bench_engine(args) -> int:
    schema, rules, nfa = _compile(args)
    queries = QuerySampler(schema, rules).sample(args.queries, np.random.default_rng(args.seed))
    try:
        cfg = BenchConfig(args.min_exp, args.max_exp, args.repeats, args.engines, args.overhead_us)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _emit(bench_engine(nfa, queries, cfg), args.format, BENCH_COLUMNS)
    return 0


def _base_config(args) -> PipelineConfig:
    base = PipelineConfig()
    try:
        if args.config:
            base = parse_config(Path(args.config).read_text(encoding="utf-8"), base)
        if args.set:
            base = parse_config("\n".join(args.set), base)
    except FileNotFoundError:
        raise UsageError(f"{args.config}: no such file") from None
    except ValueError as exc:
        raise UsageError(f"config: {exc}") from None
    return base


def _workload(args, schema, rules):
    shape = WorkloadShape(required_qualified_ts=args.required_ts)
    sampler = QuerySampler(schema, rules)
    return generate_workload(args.seed, args.user_queries, shape, sampler, args.ts_per_query)


def cmd_run(args) -> int:
    schema, rules, nfa = _compile(args)
    cfg = _base_config(args)
    workload = _workload(args, schema, rules)
    report = run_pipeline(cfg, workload, nfa)
    if args.manifest:
        atomic_write(args.manifest, dumps_manifest(run_manifest(report, args.seed, nfa)))
    row = report.row()
    row.update(emitted=report.emitted, answered=report.answered, misrouted=report.misrouted,
               oversubscribed=report.oversubscribed)
    _emit([row], args.format, CSV_COLUMNS)
    if report.misrouted or report.answered != report.emitted:
        print(f"error: {report.misrouted} misrouted, {report.emitted - report.answered} unanswered",
              file=sys.stderr)
        return 1
    return 0


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("values must be >= 1")
    return vals


def cmd_sweep(args) -> int:
    schema, rules, nfa = _compile(args)
    base = _base_config(args)
    policies = args.policy or [str(base.policy)]
    try:
        configs = [
            PipelineConfig(p, w, k, e, BatchPolicy.parse(pol), base.per_call_overhead_us, base.transport,
                           base.frequency_penalty, base.default_mct, base.queue_depth)
            for p, w, k, e, pol in itertools.product(args.p, args.w, args.k, args.e, policies)
        ]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    workload = _workload(args, schema, rules)
    rows = sweep(configs, workload, nfa)
    _emit(rows, args.format, CSV_COLUMNS)
    return 0


def cmd_cost(args) -> int:
    if args.scenario:
        try:
            scenarios = parse_scenarios(Path(args.scenario).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"{args.scenario}: no such file") from None
        except ValueError as exc:
            raise UsageError(f"{args.scenario}: {exc}") from None
        rows = [evaluate(s) for s in scenarios]
    elif args.table == "all":
        rows = report_tables()
    else:
        rows = [evaluate(s) | {"table": int(args.table)} for s in builtin_scenarios(int(args.table))]
    _emit(rows, args.format)
    return 0


def cmd_gen_workload(args) -> int:
    shape = WorkloadShape(required_qualified_ts=args.required_ts)
    workload = generate_workload(args.seed, args.user_queries, shape, None, args.ts_per_query)
    if args.out:
        doc = {"seed": args.seed, "shape": shape.__dict__,
               "user_queries": [{"id": u.id, "ts_queries": u.ts_queries.tolist()} for u in workload]}
        atomic_write(args.out, json.dumps(doc, sort_keys=True) + "\n")
    _emit([workload_stats(workload)], args.format)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentParser(add_help=False)
    fmt.add_argument("--format", choices=("csv", "json"), default="csv", help="report format (default csv)")

    compiled = argparse.ArgumentParser(add_help=False)
    compiled.add_argument("rules", help="rule-set file (v1 or v2)")
    compiled.add_argument("--order", default="declared",
                          help="criteria order: declared, optimised, random:<seed> or a comma list")
    compiled.add_argument("--merge", action="store_true", help="evaluate each range pair in one level")

    load = argparse.ArgumentParser(add_help=False)
    load.add_argument("--seed", type=int, required=True)
    load.add_argument("--user-queries", type=int, default=20)
    load.add_argument("--ts-per-query", type=int, default=None, help="fixed TS count per user query")
    load.add_argument("--required-ts", type=int, default=1500, help="required qualified TS per user query")
    load.add_argument("--config", help="pipeline config file of key = value lines")
    load.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    ap = argparse.ArgumentParser(prog="mctengine", description="MCT rule matching engine toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-rules", parents=[fmt], help="generate a synthetic v1 rule set")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True, help="number of rules")
    p.add_argument("--spec", default="", help="schema spec, e.g. exact=5,pair_ranges=4")
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(func=cmd_gen_rules)

    p = sub.add_parser("transform", parents=[fmt], help="rewrite a rule set into v2 form")
    p.add_argument("rules")
    p.add_argument("--out", help="write the v2 rule set here")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("compile", parents=[fmt, compiled], help="compile rules into an NFA image")
    p.add_argument("--out", help="write the .nfab image here")
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("bench-engine", parents=[fmt, compiled], help="latency and throughput by batch size")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--queries", type=int, default=8192)
    p.add_argument("--min-exp", type=int, default=0)
    p.add_argument("--max-exp", type=int, default=12)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--engines", type=int, default=1)
    p.add_argument("--overhead-us", type=float, default=0.0)
    p.set_defaults(func=cmd_bench_engine)

    p = sub.add_parser("run", parents=[fmt, compiled, load], help="drive a workload through the pipeline")
    p.add_argument("--manifest", help="write a JSON run manifest here")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[fmt, compiled, load], help="run a grid of pipeline configs")
    p.add_argument("--p", type=_int_list, default=[1], help="producer counts, e.g. 1,2,4")
    p.add_argument("--w", type=_int_list, default=[1])
    p.add_argument("--k", type=_int_list, default=[1])
    p.add_argument("--e", type=_int_list, default=[1])
    p.add_argument("--policy", action="append", help="batching policy (repeatable)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("cost", parents=[fmt], help="deployment cost tables")
    p.add_argument("--table", choices=("2", "3", "all"), default="all")
    p.add_argument("--scenario", help="scenario file; overrides --table")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("gen-workload", parents=[fmt], help="generate user queries and report their shape")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--user-queries", type=int, default=100)
    p.add_argument("--ts-per-query", type=int, default=None)
    p.add_argument("--required-ts", type=int, default=1500)
    p.add_argument("--out", help="write per-user-query TS counts as JSON")
    p.set_defaults(func=cmd_gen_workload)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _PARSE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
