"""Standalone engine benchmark: latency and throughput against batch size."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .engine import KernelConfig, encode_codes, evaluate_parallel_codes
from .model import QueryColumns
from .nfa import Nfa
from .stats import percentile

BENCH_COLUMNS = ("batch_size", "p50_us", "p90_us", "queries_per_sec")


@dataclass(frozen=True)
class BenchConfig:
    min_exp: int = 0
    max_exp: int = 12
    repeats: int = 50
    engines: int = 1
    per_call_overhead_us: float = 0.0
    frequency_penalty: float = 1.0

    def __post_init__(self):
        if not 0 <= self.min_exp <= self.max_exp <= 24:
            raise ValueError("need 0 <= min_exp <= max_exp <= 24")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.per_call_overhead_us < 0:
            raise ValueError("per_call_overhead_us must be >= 0")

    @property
    def sizes(self) -> list[int]:
        return [1 << x for x in range(self.min_exp, self.max_exp + 1)]


def bench_engine(nfa: Nfa, queries: QueryColumns, config: BenchConfig = BenchConfig()) -> list[dict]:
    """Time one kernel call per repeat for every power-of-two batch size.

    Each call pays the per-call overhead and evaluates a contiguous slice of
    ``queries`` (wrapping around). ``queries_per_sec`` is total queries over
    total wall time for that size.
    """
    n = len(queries)
    if n == 0:
        raise ValueError("benchmark needs at least one query")
    codes_all = encode_codes(nfa, queries)
    kc = KernelConfig(1, config.engines, config.frequency_penalty)
    overhead = config.per_call_overhead_us / 1e6
    rows = []
    for size in config.sizes:
        idx = np.arange(size)
        lat = []
        for r in range(config.repeats):
            codes = codes_all[(idx + r * size) % n]
            t0 = time.perf_counter()
            if overhead:
                time.sleep(overhead)
            evaluate_parallel_codes(nfa, codes, kc)
            lat.append((time.perf_counter() - t0) * 1e6)
        total_s = sum(lat) / 1e6
        rows.append({
            "batch_size": size,
            "p50_us": round(percentile(lat, 50), 3),
            "p90_us": round(percentile(lat, 90), 3),
            "queries_per_sec": round(size * config.repeats / total_s, 3),
        })
    return rows
