"""Acceptance criteria 1 to 10.

Each test records ``criterion N: PASS/FAIL detail`` in the terminal summary
(see conftest) and prints the same line, so ``pytest -s`` and the summary agree.
Tolerances are pinned as module constants.
"""
from __future__ import annotations

import math
import threading
import time
from collections import Counter

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from conftest import ACCEPTANCE, DENSE_SPEC, SMALL_SPEC, random_case
from mctengine.bench import BenchConfig, bench_engine
from mctengine.cli import main
from mctengine.cost import report_tables
from mctengine.engine import KernelConfig, encode_codes, evaluate_parallel_codes
from mctengine.generate import SchemaSpec, nested_range_rules, gen_rules
from mctengine.model import oracle_match_columns
from mctengine.nfa import build_nfa, compile_rules, nfa_stats
from mctengine.nfab import NfabError, deserialize_nfa, read_header, serialize_nfa
from mctengine.pipeline import Pipeline, PipelineConfig, run_pipeline
from mctengine.transforms import split_pair_ranges, to_v2
from mctengine.workload import (
    BatchPolicy,
    QuerySampler,
    UserQuery,
    WorkloadShape,
    batch_policy,
    explore,
    generate_workload,
    workload_stats,
)
from test_transforms import overlap_violations

ORACLE_INSTANCES = 1000
ORACLE_MAX_RULES = 2000
ORACLE_MAX_QUERIES = 4096
ORACLE_BUDGET_S = 300.0

TRANSFORM_SETS = 500
TRANSFORM_QUERIES = 10_000

WORKLOAD_MIN_TS = 100_000
DIRECT_FRACTION, DIRECT_TOL = 0.17, 0.01
MEAN_QUERIES, MEAN_TOL = 1.24, 0.02

COST_TOLERANCE = 0.02
COST_BUDGET_S = 1.0

PIPELINE_MIN_QUERIES = 1_000_000

OVERHEAD_HIGH_US, OVERHEAD_LOW_US = 2000.0, 200.0
P90_MIN_GAIN = 2.0

RELOADS = 100
SERIAL_IMAGES = 1000


def _record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (ok, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def _log_uniform(top: int):
    return st.floats(0.0, math.log(top)).map(lambda x: max(1, min(top, int(round(math.exp(x))))))


# ---------------------------------------------------------------- 1


def test_criterion_1_engine_equals_oracle():
    seen = {"n": 0, "bad": 0, "first": None}

    @settings(max_examples=ORACLE_INSTANCES, derandomize=True, deadline=None, database=None,
              suppress_health_check=list(HealthCheck))
    @given(st.integers(0, 2**31), _log_uniform(ORACLE_MAX_RULES), _log_uniform(ORACLE_MAX_QUERIES),
           st.sampled_from([1, 2, 4]), st.booleans(), st.sampled_from([SMALL_SPEC, DENSE_SPEC, SchemaSpec()]))
    def check(seed, n_rules, n_queries, engines, merge, spec):
        schema, rules, queries = random_case(seed, n_rules, n_queries, spec)
        nfa = compile_rules(rules, schema, order=f"random:{seed}", merge=merge)
        got, _ = evaluate_parallel_codes(nfa, encode_codes(nfa, queries), KernelConfig(1, engines))
        seen["n"] += 1
        if not got.same_as(oracle_match_columns(queries, rules, schema)):
            seen["bad"] += 1
            seen["first"] = seen["first"] or (seed, n_rules, n_queries, engines, merge)

    t0 = time.perf_counter()
    check()
    took = time.perf_counter() - t0
    ok = seen["n"] >= ORACLE_INSTANCES and seen["bad"] == 0 and took < ORACLE_BUDGET_S
    _record(1, ok, f"{seen['n']} instances, {seen['bad']} mismatches, {took:.0f} s "
                   f"(first mismatch {seen['first']})" if seen["bad"] else
            f"{seen['n']} instances, 0 mismatches, {took:.0f} s")


# ---------------------------------------------------------------- 2


def test_criterion_2_transform_preserves_semantics():
    rng = np.random.default_rng(2024)
    bad_sem = bad_overlap = 0
    for k in range(TRANSFORM_SETS):
        spec = DENSE_SPEC if k % 2 else SMALL_SPEC
        n = int(np.exp(rng.uniform(0, math.log(200))))
        schema, rules, queries = random_case(10_000 + k, max(n, 1), TRANSFORM_QUERIES, spec)
        out, s2 = to_v2(rules, schema)
        bad_overlap += overlap_violations(out, s2) > 0
        bad_sem += not oracle_match_columns(queries, rules, schema).same_as(oracle_match_columns(queries, out, s2))
    _record(2, bad_sem == 0 and bad_overlap == 0,
            f"{TRANSFORM_SETS} rule sets x {TRANSFORM_QUERIES} queries: "
            f"{bad_sem} semantic mismatches, {bad_overlap} sets with overlaps")


# ---------------------------------------------------------------- 3


def test_criterion_3_nested_range_shape():
    schema, rules, order = nested_range_rules()
    out, s2 = to_v2(rules, schema)
    ranges = sorted((r.values[1].value, r.values[2].value) for r in out)
    merged = nfa_stats(compile_rules(rules, schema, order=order, merge=True))
    split, s_split = split_pair_ranges(rules, schema)
    plain = nfa_stats(build_nfa(split, s_split, order=order))

    def drawn(s):
        return s["states"] - s["terminals"] + 1

    got = (ranges, merged["transitions"], drawn(merged), plain["transitions"], drawn(plain))
    want = ([(700, 800), (801, 1000)], 4, 4, 5, 5)
    _record(3, got == want, f"ranges {ranges}; merged {got[1]} transitions / {got[2]} nodes; "
                            f"split-only {got[3]} transitions / {got[4]} nodes")


# ---------------------------------------------------------------- 4


def test_criterion_4_workload_shape(capsys):
    n_uq = 120
    wl = generate_workload(0, n_uq)
    stats = workload_stats(wl)
    # the CLI reports the same numbers for the same seed
    main(["gen-workload", "--seed", "0", "--user-queries", str(n_uq), "--format", "json"])
    cli_out = capsys.readouterr().out
    d, m = stats["direct_fraction"], stats["mean_queries_per_non_direct_ts"]
    ok = (stats["ts"] >= WORKLOAD_MIN_TS and abs(d - DIRECT_FRACTION) <= DIRECT_TOL
          and abs(m - MEAN_QUERIES) <= MEAN_TOL and f"{d}" in cli_out)
    _record(4, ok, f"{stats['ts']} TS: direct {d:.4f} (target {DIRECT_FRACTION}+-{DIRECT_TOL}), "
                   f"mean {m:.4f} (target {MEAN_QUERIES}+-{MEAN_TOL})")


# ---------------------------------------------------------------- 5


def test_criterion_5_batching_and_early_stop():
    counts = np.random.default_rng(5).integers(0, 3, size=5800)
    uq = UserQuery(0, counts, 1500)
    plan = [b.n_ts for b in batch_policy(uq, BatchPolicy())]
    uq.connection_min = np.full(uq.n_queries, 90)
    _, submitted_fast, valid = explore(uq, BatchPolicy(), lambda b: [30] * b.n_queries)
    _, submitted_slow, _ = explore(uq, BatchPolicy(), lambda b: [120] * b.n_queries)
    ok = plan == [1500, 1500, 1500, 1300] and submitted_fast == 1 and valid >= 1500 and submitted_slow == 4
    _record(5, ok, f"batches {plan}; early stop after {submitted_fast} batch(es), "
                   f"exhaustive run submits {submitted_slow}")


# ---------------------------------------------------------------- 6


def test_criterion_6_cost_tables():
    t0 = time.perf_counter()
    rows = report_tables()
    took = time.perf_counter() - t0
    devs = [float(r["deviation"]) for r in rows]
    one_time_exact = all(r["matches_printed"] for r in rows if r["pricing"] == "one-time")
    ok = (len(rows) == 14 and max(devs) <= COST_TOLERANCE and one_time_exact
          and not any(r["flagged"] for r in rows) and took < COST_BUDGET_S)
    worst = rows[int(np.argmax(devs))]["label"]
    _record(6, ok, f"{len(rows)} rows, max deviation {max(devs):.2%} ({worst}), "
                   f"one-time rows exact: {one_time_exact}, {took * 1000:.1f} ms")


# ---------------------------------------------------------------- 7


def test_criterion_7_pipeline_conservation():
    schema, rules = gen_rules(11, 2000)
    nfa = compile_rules(rules, schema, order="optimised")
    shape = WorkloadShape(required_qualified_ts=10**9)   # no early stop: every query flows
    wl = generate_workload(11, 100, shape, QuerySampler(schema, rules), ts_per_query=9800)
    reps = {cfg.label: run_pipeline(cfg, wl, nfa)
            for cfg in (PipelineConfig(1, 1, 1, 1), PipelineConfig(4, 4, 1, 4))}
    a, b = reps.values()
    ok = (a.emitted >= PIPELINE_MIN_QUERIES
          and all(r.answered == r.emitted and r.misrouted == 0 for r in (a, b))
          and a.decision_multiset() == b.decision_multiset())
    _record(7, ok, "; ".join(f"{k}: emitted {r.emitted} answered {r.answered} misrouted {r.misrouted}"
                             for k, r in reps.items())
            + f"; multisets equal: {a.decision_multiset() == b.decision_multiset()}")


# ---------------------------------------------------------------- 8


def test_criterion_8_scaling_shape():
    schema, rules = gen_rules(12, 2000)
    nfa = compile_rules(rules, schema, order="optimised")
    sampler = QuerySampler(schema, rules)
    wl = generate_workload(12, 40, WorkloadShape(required_qualified_ts=10**9), sampler, ts_per_query=2000)
    qps = {}
    for p in (1, 4):
        cfg = PipelineConfig(p, 1, 1, 1, policy=BatchPolicy("fixed", 64), per_call_overhead_us=500)
        qps[p] = max(run_pipeline(cfg, wl, nfa).throughput_qps for _ in range(2))   # best of two
    queries = sampler.sample(4096, np.random.default_rng(3))
    p90 = {}
    for overhead in (OVERHEAD_HIGH_US, OVERHEAD_LOW_US):
        rows = bench_engine(nfa, queries, BenchConfig(0, 3, repeats=30, per_call_overhead_us=overhead))
        p90[overhead] = max(r["p90_us"] for r in rows)
    gain = p90[OVERHEAD_HIGH_US] / p90[OVERHEAD_LOW_US]
    ok = qps[4] >= qps[1] and gain >= P90_MIN_GAIN
    _record(8, ok, f"throughput 1p1w {qps[1]:.0f} q/s, 4p1w {qps[4]:.0f} q/s; "
                   f"small-batch p90 {p90[OVERHEAD_HIGH_US]:.0f} us -> {p90[OVERHEAD_LOW_US]:.0f} us "
                   f"({gain:.1f}x, need {P90_MIN_GAIN}x)")


# ---------------------------------------------------------------- 9


def test_criterion_9_hot_reload():
    schema, rules = gen_rules(13, 500)
    alt_rules = [r.with_values(r.values, decision=r.decision + 1000) for r in rules]
    base = compile_rules(rules, schema, order="optimised")
    alt = compile_rules(alt_rules, schema, order="optimised")
    sampler = QuerySampler(schema, rules)
    wl = generate_workload(13, 12, WorkloadShape(required_qualified_ts=10**9), sampler, ts_per_query=3000)

    pipe = Pipeline(PipelineConfig(2, 2, 1, 2, policy=BatchPolicy("fixed", 64), per_call_overhead_us=200), base)
    errors: list = []
    done = {"n": 0}
    running = threading.Event()

    def flip():
        running.wait()
        for k in range(RELOADS):
            try:
                pipe.reload(alt if k % 2 == 0 else base)
                done["n"] += 1
            except Exception as exc:   # pragma: no cover - recorded
                errors.append(exc)
            time.sleep(0.002)

    t = threading.Thread(target=flip)
    t.start()
    running.set()
    try:
        rep = pipe.run(wl)
    except Exception as exc:   # pragma: no cover - recorded
        errors.append(exc)
        rep = None
    t.join()
    mixed = checked = 0
    if rep is not None:
        for uq in wl:
            got = rep.results[uq.id]
            for q_lo, n, version in rep.segments[uq.id]:
                want = oracle_match_columns(uq.queries.take(slice(q_lo, q_lo + n)), rules, schema).decision.tolist()
                shift = 1000 if version % 2 else 0
                mixed += got[q_lo:q_lo + n] != [None if d is None else d + shift for d in want]
                checked += 1
    versions = len(rep.versions) if rep is not None else 0
    ok = done["n"] == RELOADS and not errors and mixed == 0 and rep is not None and rep.answered == rep.emitted
    _record(9, ok, f"{done['n']} reloads, {versions} image versions served, {checked} batches checked, "
                   f"{mixed} mixed, {len(errors)} errors")


# ---------------------------------------------------------------- 10


def _error(data: bytes):
    try:
        deserialize_nfa(data)
    except NfabError as exc:
        return type(exc).__name__, str(exc)
    return None


def test_criterion_10_serialization():
    rng = np.random.default_rng(10)
    specs = (SMALL_SPEC, DENSE_SPEC, SchemaSpec())
    inexact = 0
    for k in range(SERIAL_IMAGES):
        n = int(np.exp(rng.uniform(0, math.log(300))))
        schema, rules = gen_rules(k, max(n, 1), specs[k % 3])
        nfa = compile_rules(rules, schema, order=f"random:{k}", merge=bool(k % 2))
        data = serialize_nfa(nfa)
        back = deserialize_nfa(data)
        inexact += not (back == nfa and serialize_nfa(back) == data)
    schema, rules = gen_rules(1, 200)
    data = serialize_nfa(compile_rules(rules, schema, merge=True))
    accepted = flaky = 0
    outcomes: Counter = Counter()
    for pos in range(read_header(data)["payload_start"]):
        for mask in (0x01, 0x80, 0xFF):
            corrupt = bytearray(data)
            corrupt[pos] ^= mask
            first = _error(bytes(corrupt))
            accepted += first is None
            flaky += first != _error(bytes(corrupt))
            if first:
                outcomes[first[0]] += 1
    ok = inexact == 0 and accepted == 0 and flaky == 0
    _record(10, ok, f"{SERIAL_IMAGES} images, {inexact} not bit-exact; header corruptions "
                    f"{sum(outcomes.values())} rejected ({dict(outcomes)}), {accepted} accepted, {flaky} nondeterministic")
