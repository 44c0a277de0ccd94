from __future__ import annotations

import numpy as np
import pytest

from mctengine.generate import SchemaSpec, gen_rules
from mctengine.workload import QuerySampler

# acceptance criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

SMALL_SPEC = SchemaSpec(exact=3, pair_ranges=2, cardinality=3, stations=2, wildcard_ratio=0.7,
                        range_wildcard_ratio=0.4, flight_wildcard_ratio=0.4, max_span=300)

# one station, no code-share, wide ranges: range groups overlap often
DENSE_SPEC = SchemaSpec(exact=1, pair_ranges=2, codeshare=False, stations=1,
                        range_wildcard_ratio=0.3, max_span=200)


def random_case(seed: int, n_rules: int, n_queries: int, spec: SchemaSpec = SMALL_SPEC, hit_ratio=0.8):
    """A generated rule set plus sampled queries, all from one seed."""
    schema, rules = gen_rules(seed, n_rules, spec)
    queries = QuerySampler(schema, rules, hit_ratio).sample(n_queries, np.random.default_rng(seed + 1))
    return schema, rules, queries


@pytest.fixture(scope="session")
def default_case():
    return random_case(7, 400, 3000, SchemaSpec())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
