from __future__ import annotations

import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL_SPEC, random_case
from mctengine.engine import (
    EngineError,
    EngineHandle,
    KernelConfig,
    QueryBatch,
    SchemaMismatch,
    encode_batch,
    encode_codes,
    evaluate_batch,
    evaluate_codes,
    evaluate_parallel,
    evaluate_parallel_codes,
    reload_nfa,
)
from mctengine.generate import nested_range_rules, gen_rules, example_rules, example_query
from mctengine.model import MatchResult, oracle_match_columns
from mctengine.nfa import compile_rules


def test_example_through_engine():
    schema, rules = example_rules()
    nfa = compile_rules(rules, schema, order="optimised")
    batch = encode_batch(nfa, [example_query()])
    assert evaluate_batch(nfa, batch) == [MatchResult(2, 40, 27, None)]


def test_batch_validation():
    with pytest.raises(EngineError):
        QueryBatch(np.zeros((0, 3), dtype=np.uint32))
    with pytest.raises(EngineError):
        QueryBatch(np.zeros(3, dtype=np.uint32))


def test_missing_field_and_depth_mismatch():
    schema, rules, _ = nested_range_rules()
    nfa = compile_rules(rules, schema)
    with pytest.raises(EngineError):
        encode_codes(nfa, [{"station": "CDG"}])
    with pytest.raises(EngineError):
        evaluate_parallel_codes(nfa, np.zeros((2, nfa.depth + 1), dtype=np.uint32), KernelConfig())


def test_kernel_config_checks():
    with pytest.raises(ValueError):
        KernelConfig(0, 1)
    with pytest.raises(ValueError):
        KernelConfig(1, 1, 0.5)
    assert KernelConfig(1, 3, 1.1).slowdown == pytest.approx(1.21)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1_000_000), st.integers(1, 100), st.integers(1, 700), st.sampled_from([1, 2, 3, 4]))
def test_parallel_equals_serial(seed, n_rules, n_queries, engines):
    schema, rules, queries = random_case(seed, n_rules, n_queries)
    nfa = compile_rules(rules, schema, order="optimised")
    codes = encode_codes(nfa, queries)
    serial = evaluate_codes(nfa, codes)
    par, timings = evaluate_parallel_codes(nfa, codes, KernelConfig(1, engines))
    assert par.same_as(serial) and np.array_equal(par.fragment, serial.fragment)
    assert sum(t.queries for t in timings) == n_queries
    assert len(timings) == engines


def test_evaluate_parallel_returns_results():
    schema, rules, queries = random_case(3, 50, 64)
    nfa = compile_rules(rules, schema)
    results, timings = evaluate_parallel(nfa, encode_batch(nfa, queries), KernelConfig(1, 2))
    assert [r.key() for r in results] == oracle_match_columns(queries, rules, schema).keys()
    assert [t.engine for t in timings] == [0, 1]


def test_frequency_penalty_slows_engines():
    schema, rules, queries = random_case(4, 200, 2000)
    nfa = compile_rules(rules, schema)
    codes = encode_codes(nfa, queries)
    _, fast = evaluate_parallel_codes(nfa, codes, KernelConfig(1, 2, 1.0))
    _, slow = evaluate_parallel_codes(nfa, codes, KernelConfig(1, 2, 3.0))
    assert sum(t.wall_us for t in slow) > sum(t.wall_us for t in fast)


# ---------------------------------------------------------------- reload


def _two_images():
    schema, rules = gen_rules(5, 100, SMALL_SPEC)
    alt = [r.with_values(r.values, decision=1000 + i) for i, r in enumerate(rules)]
    return schema, compile_rules(rules, schema), compile_rules(alt, schema)


def test_reload_swaps_whole_image():
    schema, a, b = _two_images()
    h = EngineHandle(a)
    assert h.snapshot()[0] == 0
    assert reload_nfa(h, b) == 1
    version, nfa = h.snapshot()
    assert version == 1 and nfa is b


def test_reload_rejects_other_schema():
    schema, a, _ = _two_images()
    s2, r2, _ = nested_range_rules()
    h = EngineHandle(a)
    with pytest.raises(SchemaMismatch):
        h.reload(compile_rules(r2, s2))
    assert h.snapshot()[1] is a


def test_reload_under_load_never_mixes_images():
    schema, a, b = _two_images()
    _, _, queries = random_case(5, 100, 256)
    h = EngineHandle(a)
    stop = threading.Event()
    errors, seen = [], []

    def load():
        while not stop.is_set():
            try:
                cols, version = h.evaluate(queries)
            except Exception as exc:   # pragma: no cover - recorded
                errors.append(exc)
                return
            decided = [d for d in cols.decision.tolist() if d is not None]
            big = [d >= 1000 for d in decided]
            seen.append((version, all(big) if version % 2 else not any(big)))

    t = threading.Thread(target=load)
    t.start()
    for k in range(20):
        h.reload(b if k % 2 == 0 else a)
    stop.set()
    t.join()
    assert not errors and seen and all(ok for _, ok in seen)


def test_decision_payload_survives_engine():
    schema, rules, _ = nested_range_rules()
    rules = [r.with_values(r.values, decision=f"d{r.id}") for r in rules]
    nfa = compile_rules(rules, schema, merge=True)
    cols = evaluate_codes(nfa, encode_codes(nfa, [{"station": "CDG", "flight": 750}]))
    assert cols.decision.tolist() == ["d1"]
