"""Business-rule matching engine for minimum connection time (MCT) rules.

Rules are compiled into a levelled automaton and evaluated in batches;
a threaded pipeline, a workload generator and a cost model sit on top.
"""
from __future__ import annotations

from .cost import CostScenario, builtin_scenarios, report_tables, scenario_cost, sizing
from .engine import EngineHandle, KernelConfig, QueryBatch, encode_batch, evaluate_batch, evaluate_parallel, reload_nfa
from .generate import SchemaSpec, nested_range_rules, gen_rules, example_rules, example_query
from .model import (
    WILDCARD,
    CriterionDecl,
    CrossCarrier,
    CrossFlight,
    Exact,
    IntDomain,
    Kind,
    MatchResult,
    QueryColumns,
    Range,
    Rule,
    RuleSchema,
    oracle_match,
    oracle_match_columns,
)
from .nfa import Nfa, build_nfa, compile_rules, nfa_stats
from .nfab import deserialize_nfa, load_nfa, save_nfa, serialize_nfa
from .pipeline import Pipeline, PipelineConfig, run_pipeline, sweep
from .ruleset import format_ruleset, load_ruleset, parse_ruleset, save_ruleset
from .transforms import apply_cross_matching, deoverlap_ranges, populate_codeshare_flight_range, split_pair_ranges, to_v2
from .workload import BatchPolicy, QuerySampler, WorkloadShape, batch_policy, generate_workload

__all__ = [name for name in dir() if not name.startswith("_") and name != "annotations"]
