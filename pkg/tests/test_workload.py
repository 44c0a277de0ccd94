from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_case
from mctengine.generate import gen_rules
from mctengine.model import oracle_match_columns
from mctengine.workload import (
    BatchPolicy,
    QuerySampler,
    TravelSolution,
    UserQuery,
    WorkloadShape,
    batch_policy,
    complete_ts,
    connection_count_probs,
    cpu_reference_match,
    explore,
    generate_workload,
    workload_stats,
)


def _uq(n_ts=5800, required=1500, seed=0, conn=None):
    rng = np.random.default_rng(seed)
    counts = rng.integers(0, 3, size=n_ts)
    uq = UserQuery(0, counts, required)
    uq.connection_min = np.full(uq.n_queries, 90) if conn is None else conn(uq.n_queries, rng)
    return uq


# ---------------------------------------------------------------- shape


@pytest.mark.parametrize("mean", [1.0, 1.24, 2.0, 3.5])
def test_connection_probs_hit_mean(mean):
    p = connection_count_probs(mean)
    assert p.sum() == pytest.approx(1.0) and (p >= 0).all()
    assert (np.arange(1, 6) * p).sum() == pytest.approx(mean, abs=1e-9)


def test_travel_solution_legs():
    assert TravelSolution(0, 1, True).mct_queries == 0
    assert TravelSolution(0, 6, False).mct_queries == 5
    with pytest.raises(ValueError):
        TravelSolution(0, 7, False)
    with pytest.raises(ValueError):
        TravelSolution(0, 2, True)


def test_workload_is_deterministic_and_shaped():
    a = generate_workload(11, 40)
    b = generate_workload(11, 40)
    assert all(np.array_equal(x.ts_queries, y.ts_queries) for x, y in zip(a, b))
    s = workload_stats(a)
    assert s["ts"] > 30_000
    assert abs(s["direct_fraction"] - 0.17) < 0.01
    assert abs(s["mean_queries_per_non_direct_ts"] - 1.24) < 0.02
    assert all(0 <= c <= 5 for u in a for c in u.ts_queries.tolist())


def test_workload_shape_validation():
    with pytest.raises(ValueError):
        WorkloadShape(direct_fraction=1.5)
    with pytest.raises(ValueError):
        WorkloadShape(mean_queries=0.5)


def test_sampler_keeps_carrier_invariant():
    schema, rules = gen_rules(3, 300)
    q = QuerySampler(schema, rules).sample(5000, np.random.default_rng(1))
    plain = q["code_share"] == "N"
    assert (q["marketing_carrier"][plain] == q["operating_carrier"][plain]).all()
    assert (q["marketing_flight_no"][plain] == q["operating_flight_no"][plain]).all()
    assert set(q.columns) >= set(schema.fields)


def test_sampler_hit_ratio_produces_matches():
    schema, rules, queries = random_case(2, 300, 4000)
    hits = (oracle_match_columns(queries, rules, schema).rule_id >= 0).mean()
    assert hits > 0.5


def test_materialised_queries_follow_ts_counts():
    schema, rules = gen_rules(1, 50)
    uqs = generate_workload(3, 3, sampler=QuerySampler(schema, rules), ts_per_query=200)
    for u in uqs:
        assert u.n_ts == 200 and len(u.queries) == u.n_queries == len(u.connection_min)


# ---------------------------------------------------------------- batching


def test_required_qualified_batches_for_5800_ts():
    plan = batch_policy(_uq())
    assert [b.n_ts for b in plan] == [1500, 1500, 1500, 1300]
    assert plan[0].q_lo == 0 and all(a.q_hi == b.q_lo for a, b in zip(plan, plan[1:]))


def test_per_ts_and_fixed_batches_cover_all_queries():
    uq = _uq(300)
    for policy in (BatchPolicy("per-ts"), BatchPolicy("fixed", 64), BatchPolicy("fixed", 1)):
        plan = batch_policy(uq, policy)
        covered = sum(b.n_queries for b in plan)
        assert covered == uq.n_queries
        assert all(b.n_queries > 0 for b in plan)
        if policy.kind == "fixed":
            assert max(b.n_queries for b in plan) <= policy.size


def test_policy_parse():
    assert BatchPolicy.parse("fixed(32)") == BatchPolicy("fixed", 32)
    assert str(BatchPolicy.parse("per-ts")) == "per-ts"
    with pytest.raises(ValueError):
        BatchPolicy.parse("fixed(x)")
    with pytest.raises(ValueError):
        BatchPolicy("bogus")


def test_complete_ts_counts_whole_solutions():
    uq = UserQuery(0, [0, 2, 1, 0, 3], 10)
    assert [complete_ts(uq, a) for a in (0, 1, 2, 3, 5, 6)] == [1, 1, 2, 4, 4, 5]


def _answer_all(mct):
    return lambda batch: [mct] * batch.n_queries


def test_explore_stops_after_first_batch_when_everything_is_valid():
    _, submitted, valid = explore(_uq(), BatchPolicy(), _answer_all(30))
    assert submitted == 1 and valid == 1500


def test_explore_stops_once_enough_valid():
    # about half the TS with connections fail: two batches are needed
    uq = _uq(conn=lambda n, rng: rng.choice([20, 120], size=n))
    _, submitted, valid = explore(uq, BatchPolicy(), _answer_all(60))
    assert 1 < submitted < 4 and valid >= 1500


def test_explore_runs_out_of_ts():
    uq = UserQuery(0, np.ones(5800, dtype=np.int64), 1500)
    uq.connection_min = np.full(uq.n_queries, 90)
    _, submitted, valid = explore(uq, BatchPolicy(), _answer_all(500))
    assert (submitted, valid) == (4, 0)


def test_direct_solutions_are_always_valid():
    uq = _uq()
    _, _, valid = explore(uq, BatchPolicy(), _answer_all(500))
    assert valid == int((uq.ts_queries == 0).sum())


def test_non_integer_decision_falls_back_to_default():
    uq = UserQuery(0, [1, 1], 5)
    uq.connection_min = np.array([50, 70])
    assert uq.ts_validity([None, None], 60).tolist() == [False, True]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=400), st.integers(1, 500),
       st.sampled_from(["required-qualified", "per-ts", "fixed"]), st.integers(1, 50))
def test_plans_partition_query_range(counts, required, kind, size):
    uq = UserQuery(0, counts, required)
    plan = batch_policy(uq, BatchPolicy(kind, size if kind == "fixed" else 0))
    spans = [(b.q_lo, b.q_hi) for b in plan if b.n_queries]
    flat = [q for lo, hi in spans for q in range(lo, hi)]
    assert flat == list(range(uq.n_queries))


def test_cpu_reference_matches_oracle():
    schema, rules = gen_rules(2, 80)
    uqs = generate_workload(4, 2, sampler=QuerySampler(schema, rules), ts_per_query=50)
    fast = cpu_reference_match(uqs, rules, schema)
    slow = cpu_reference_match(uqs, rules, schema, scalar=True)
    for a, b in zip(fast, slow):
        assert a.results.same_as(b.results) and a.cpu_us > 0
