from __future__ import annotations

import json
import threading

import numpy as np
import pytest

from mctengine.generate import SchemaSpec, gen_rules
from mctengine.model import oracle_match_columns
from mctengine.nfa import compile_rules
from mctengine.pipeline import (
    STAGES,
    PipelineConfig,
    PipelineError,
    Pipeline,
    crossover_report,
    dumps_manifest,
    pareto_flags,
    parse_config,
    run_manifest,
    run_pipeline,
    sweep,
)
from mctengine.workload import BatchPolicy, QuerySampler, UserQuery, WorkloadShape, cpu_reference_match, generate_workload


@pytest.fixture(scope="module")
def setup():
    schema, rules = gen_rules(5, 300, SchemaSpec())
    nfa = compile_rules(rules, schema, order="optimised")
    shape = WorkloadShape(required_qualified_ts=150)
    workload = generate_workload(9, 8, shape, QuerySampler(schema, rules), ts_per_query=400)
    return schema, rules, nfa, workload


def _expected(uq, schema, rules, n):
    return oracle_match_columns(uq.queries.take(slice(0, n)), rules, schema).decision.tolist()


# ---------------------------------------------------------------- config


def test_parse_config_with_aliases_and_comments():
    cfg = parse_config("""
    [pipeline]
    p = 4   # producers
    w=2
    e = 4
    batching_policy = "fixed(64)"
    per_call_overhead_us = 12.5
    transport = socket
    """)
    assert (cfg.processes, cfg.workers, cfg.kernels, cfg.engines) == (4, 2, 1, 4)
    assert cfg.policy == BatchPolicy("fixed", 64) and cfg.transport == "socket"
    assert cfg.label == "4p2w1k4e"


@pytest.mark.parametrize("text,line", [("p = 1\nw = zero\n", 2), ("colour = blue\n", 1), ("p 4\n", 1)])
def test_parse_config_errors(text, line):
    with pytest.raises(ValueError, match=f"line {line}"):
        parse_config(text)


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(processes=0)
    with pytest.raises(ValueError):
        PipelineConfig(transport="pigeon")
    with pytest.raises(ValueError):
        PipelineConfig(per_call_overhead_us=-1)
    assert PipelineConfig(policy="per-ts").policy == BatchPolicy("per-ts")


# ---------------------------------------------------------------- runs


@pytest.mark.parametrize("cfg", [
    PipelineConfig(),
    PipelineConfig(4, 4, 1, 4),
    PipelineConfig(3, 2, 2, 2, policy=BatchPolicy("fixed", 100)),
    PipelineConfig(2, 3, 1, 1, policy=BatchPolicy("per-ts"), per_call_overhead_us=0),
])
def test_every_query_answered_once_and_correct(setup, cfg):
    schema, rules, nfa, workload = setup
    rep = run_pipeline(cfg, workload, nfa)
    assert rep.emitted == rep.answered == sum(len(d) for d in rep.results.values())
    assert rep.misrouted == 0 and set(rep.results) == {u.id for u in workload}
    assert max(rep.worker_requests) - min(rep.worker_requests) <= 1
    assert sum(rep.kernel_calls) >= 1 and all(c > 0 for c in rep.kernel_calls)
    for uq in workload:
        got = rep.results[uq.id]
        assert got == _expected(uq, schema, rules, len(got))
        segs = rep.segments[uq.id]
        assert [s[0] for s in segs] == sorted(s[0] for s in segs)
        assert sum(s[1] for s in segs) == len(got)


def test_early_stop_is_respected(setup):
    _, _, nfa, workload = setup
    rep = run_pipeline(PipelineConfig(), workload, nfa)
    for t, uq in zip(rep.traces, workload):
        assert t.valid_ts >= uq.required_qualified_ts or t.queries == uq.n_queries


def test_decisions_identical_across_configs_and_transports(setup):
    _, _, nfa, workload = setup
    base = run_pipeline(PipelineConfig(), workload, nfa)
    for cfg in (PipelineConfig(4, 2, 2, 2), PipelineConfig(2, 2, 1, 1, transport="socket")):
        rep = run_pipeline(cfg, workload, nfa)
        assert rep.decision_multiset() == base.decision_multiset()
        assert rep.decision_digest() == base.decision_digest()


def test_stage_breakdown_is_consistent(setup):
    _, _, nfa, workload = setup
    rep = run_pipeline(PipelineConfig(2, 2, 1, 1), workload, nfa)
    assert len(rep.stages) == rep.requests
    for b in rep.stages:
        assert b.queue_us >= 0 and b.parts_us <= b.total_us + 1.0
    summ = rep.stage_summary()
    assert set(summ) == set(STAGES)
    row = rep.row()
    assert row["p"] == 2 and row["throughput_qps"] > 0 and row["p50_us"] <= row["p90_us"]


def test_missing_queries_rejected(setup):
    _, _, nfa, _ = setup
    with pytest.raises(PipelineError):
        run_pipeline(PipelineConfig(), [UserQuery(0, [1, 2])], nfa)


def test_reload_during_run_never_mixes(setup):
    schema, rules, nfa, workload = setup
    alt_rules = [r.with_values(r.values, decision=r.decision + 1000) for r in rules]
    alt = compile_rules(alt_rules, schema, order="optimised")
    pipe = Pipeline(PipelineConfig(2, 2, 1, 2, policy=BatchPolicy("fixed", 32), per_call_overhead_us=100), nfa)
    stop = threading.Event()

    def flip():
        k = 0
        while not stop.is_set() and k < 200:
            pipe.reload(alt if k % 2 == 0 else nfa)
            k += 1
            stop.wait(0.002)

    t = threading.Thread(target=flip)
    t.start()
    try:
        rep = pipe.run(workload)
    finally:
        stop.set()
        t.join()
    assert len(rep.versions) > 1
    for uq in workload:
        got = rep.results[uq.id]
        for q_lo, n, version in rep.segments[uq.id]:
            seg = got[q_lo:q_lo + n]
            base = _expected_slice(uq, schema, rules, q_lo, n)
            want = [None if d is None else d + (1000 if version % 2 else 0) for d in base]
            assert seg == want


def _expected_slice(uq, schema, rules, lo, n):
    return oracle_match_columns(uq.queries.take(slice(lo, lo + n)), rules, schema).decision.tolist()


def test_reload_rejects_other_schema(setup):
    _, _, nfa, _ = setup
    schema2, rules2 = gen_rules(1, 10, SchemaSpec(exact=3, codeshare=False))
    with pytest.raises(Exception):
        Pipeline(PipelineConfig(), nfa).reload(compile_rules(rules2, schema2))


# ---------------------------------------------------------------- sweep and reports


def test_pareto_flags():
    pts = [(100, 10), (90, 5), (80, 20), (100, 10), (120, 30)]
    assert pareto_flags(pts) == [True, True, False, True, True]
    assert pareto_flags([]) == []


def test_sweep_rows(setup):
    _, _, nfa, workload = setup
    rows = sweep([PipelineConfig(), PipelineConfig(2, 2, 1, 1)], workload[:3], nfa)
    assert len(rows) == 2 and any(r["pareto"] for r in rows)
    assert len({r["decisions_sha256"] for r in rows}) == 1
    assert all(isinstance(r["oversubscribed"], bool) for r in rows)


def test_manifest_and_crossover(setup):
    schema, rules, nfa, workload = setup
    rep = run_pipeline(PipelineConfig(), workload[:2], nfa)
    m = json.loads(dumps_manifest(run_manifest(rep, 9, nfa)))
    assert m["seed"] == 9 and m["nfa_hash"] == nfa.image_hash and m["answered"] == rep.answered
    cpu = cpu_reference_match(workload[:2], rules, schema)
    rows = crossover_report(cpu, rep)
    assert [r["user_query"] for r in rows] == [0, 1]
    assert all(r["faster"] in ("cpu", "engine") for r in rows)


def test_workers_share_kernels(setup):
    _, _, nfa, workload = setup
    rep = run_pipeline(PipelineConfig(2, 4, 2, 1, policy=BatchPolicy("fixed", 50)), workload, nfa)
    assert len(rep.kernel_calls) == 2 and all(c > 0 for c in rep.kernel_calls)
    assert np.sum(rep.worker_requests) == rep.requests
